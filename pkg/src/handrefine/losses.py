"""Training objective: stage-1 and refinement L2 terms, edge-length and normal-consistency terms.

L2 terms average the squared norm of each element (a vertex, joint, axis-angle
vector, shape coefficient, heatmap pixel or 2D joint), so a uniform joint
offset ``t`` costs ``|t|^2``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

# name -> number of channels forming one element
MANO_TERMS = {"vertices": 3, "joints3d": 3, "theta": 3, "beta": 1, "heatmaps": 1, "joints2d": 2}


def l2_term(pred, gt, width: int, name: str = "term", return_grad: bool = False):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"{name}: prediction shape {pred.shape} != ground truth {gt.shape}")
    n = pred.size // width
    diff = pred - gt
    value = float(np.sum(diff * diff) / n)
    if return_grad:
        return value, 2.0 * diff / n
    return value


def mano_loss(pred: dict, gt: dict, skip=(), return_grad: bool = False):
    """Sum of the six stage-1 L2 terms; names in ``skip`` are left out.

    Returns ``(value, per_term)`` or, with ``return_grad``, ``(value, per_term, grads)``.
    Skipped terms appear in ``per_term`` as ``None``.
    """
    unknown = set(skip) - set(MANO_TERMS)
    if unknown:
        raise ValueError(f"unknown MANO loss terms {sorted(unknown)}")
    total = 0.0
    per_term: dict[str, float | None] = {}
    grads = {}
    for name, width in MANO_TERMS.items():
        if name in skip:
            per_term[name] = None
            continue
        if name not in pred or name not in gt:
            raise KeyError(f"mano_loss: term {name!r} missing from prediction or ground truth")
        if return_grad:
            v, g = l2_term(pred[name], gt[name], width, name, True)
            grads[name] = g
        else:
            v = l2_term(pred[name], gt[name], width, name)
        per_term[name] = v
        total += v
    if return_grad:
        return total, per_term, grads
    return total, per_term


def refinement_loss(v_tilde, j_tilde, v_gt, j_gt, return_grad: bool = False):
    if return_grad:
        lv, gv = l2_term(v_tilde, v_gt, 3, "vertices", True)
        lj, gj = l2_term(j_tilde, j_gt, 3, "joints3d", True)
        return lv + lj, gv, gj
    return l2_term(v_tilde, v_gt, 3, "vertices") + l2_term(j_tilde, j_gt, 3, "joints3d")


def mesh_edges(faces) -> np.ndarray:
    """Unique undirected edges (E x 2, sorted pairs) of a triangle list."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


def edge_loss(v_tilde, gt_mesh, faces, return_grad: bool = False):
    """Mean absolute difference of edge lengths over the unique mesh edges."""
    v_tilde = np.asarray(v_tilde)
    gt_mesh = np.asarray(gt_mesh)
    if v_tilde.shape != gt_mesh.shape:
        raise ValueError(f"edge_loss: mesh shapes differ {v_tilde.shape} vs {gt_mesh.shape}")
    edges = mesh_edges(faces)
    gt_len = np.linalg.norm(gt_mesh[edges[:, 1]] - gt_mesh[edges[:, 0]], axis=1)
    keep = gt_len > 0
    if not keep.all():
        warnings.warn(f"edge_loss: excluded {int((~keep).sum())} zero-length ground-truth edges")
    edges, gt_len = edges[keep], gt_len[keep]
    grad = np.zeros_like(v_tilde)
    if edges.shape[0] == 0:
        return (0.0, grad) if return_grad else 0.0
    vec = v_tilde[edges[:, 1]] - v_tilde[edges[:, 0]]
    length = np.linalg.norm(vec, axis=1)
    diff = length - gt_len
    value = float(np.mean(np.abs(diff)))
    if not return_grad:
        return value
    safe = np.where(length > 0, length, 1.0)
    g = (np.sign(diff) / (edges.shape[0] * safe))[:, None] * vec
    g[length == 0] = 0.0
    np.add.at(grad, edges[:, 1], g)
    np.add.at(grad, edges[:, 0], -g)
    return value, grad


def face_normals(mesh, faces) -> tuple[np.ndarray, np.ndarray]:
    """Unit face normals and the cross-product norms (zero for degenerate faces)."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    a, b, c = mesh[faces[:, 0]], mesh[faces[:, 1]], mesh[faces[:, 2]]
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1)
    return n / np.where(norm > 0, norm, 1.0)[:, None], norm


def normal_loss(v_tilde, gt_mesh, faces, return_grad: bool = False):
    """Mean |<unit predicted edge, ground-truth face normal>| over every face-edge pair."""
    v_tilde = np.asarray(v_tilde)
    gt_mesh = np.asarray(gt_mesh)
    if v_tilde.shape != gt_mesh.shape:
        raise ValueError(f"normal_loss: mesh shapes differ {v_tilde.shape} vs {gt_mesh.shape}")
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    normals, area2 = face_normals(gt_mesh, faces)
    keep = area2 > 0
    if not keep.all():
        warnings.warn(f"normal_loss: excluded {int((~keep).sum())} degenerate ground-truth faces")
    faces, normals = faces[keep], normals[keep]
    grad = np.zeros_like(v_tilde)
    if faces.shape[0] == 0:
        return (0.0, grad) if return_grad else 0.0
    starts = faces[:, [0, 1, 2]].reshape(-1)
    ends = faces[:, [1, 2, 0]].reshape(-1)
    n = np.repeat(normals, 3, axis=0)
    vec = v_tilde[ends] - v_tilde[starts]
    length = np.linalg.norm(vec, axis=1)
    safe = np.where(length > 0, length, 1.0)
    unit = vec / safe[:, None]
    dot = np.sum(unit * n, axis=1)
    count = dot.shape[0]
    value = float(np.sum(np.abs(dot)) / count)
    if not return_grad:
        return value
    g = (np.sign(dot) / (count * safe))[:, None] * (n - dot[:, None] * unit)
    g[length == 0] = 0.0
    np.add.at(grad, ends, g)
    np.add.at(grad, starts, -g)
    return value, grad


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 0.1

    def __post_init__(self) -> None:
        w = self.as_tuple()
        if any(x < 0 for x in w):
            raise ValueError(f"loss weights must be non-negative, got {w}")
        if all(x == 0 for x in w):
            raise ValueError("at least one loss weight must be positive")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)


@dataclass
class LossReport:
    l_mano: float
    l_r: float
    l_e: float
    l_n: float
    total: float
    skipped: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"l_mano": self.l_mano, "l_r": self.l_r, "l_e": self.l_e, "l_n": self.l_n,
                "total": self.total, "skipped": list(self.skipped)}


def total_loss(weights: LossWeights, l_mano: float, l_r: float, l_e: float, l_n: float,
               skipped=()) -> LossReport:
    terms = (l_mano, l_r, l_e, l_n)
    if any(t < 0 for t in terms):
        raise ValueError(f"loss terms must be non-negative, got {terms}")
    total = float(sum(w * t for w, t in zip(weights.as_tuple(), terms)))
    return LossReport(*map(float, terms), total, list(skipped))
