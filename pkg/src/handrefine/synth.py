"""Synthetic supervision: random hands, a weak-perspective camera, Gaussian heatmaps."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .archive import ArchiveError, load_archive, save_archive
from .mano import ManoModel, joints_to_21, mano_forward

THETA_RANGE = 0.5
BETA_RANGE = 2.0
IMAGE_FILL = 0.6


@dataclass
class SyntheticSample:
    theta: np.ndarray        # K x 3
    beta: np.ndarray         # S
    vertices: np.ndarray     # V x 3
    joints3d: np.ndarray     # (K + 5) x 3
    cam_scale: float
    cam_trans: np.ndarray    # 2
    joints2d: np.ndarray     # (K + 5) x 2, normalized image coordinates
    heatmaps: np.ndarray     # (K + 5) x h x w
    f_global: np.ndarray     # global_dim

    def digest(self) -> str:
        h = hashlib.sha256()
        for f in fields(self):
            h.update(np.ascontiguousarray(getattr(self, f.name), dtype=np.float64).tobytes())
        return h.hexdigest()


def project_weak_perspective(points: np.ndarray, scale: float, translation) -> np.ndarray:
    """``scale * (X, Y) + translation``; depth is dropped."""
    if not scale > 0:
        raise ValueError(f"weak-perspective scale must be positive, got {scale}")
    points = np.asarray(points)
    return scale * points[:, :2] + np.asarray(translation)


def render_heatmaps(joints2d: np.ndarray, size: int = 32, sigma: float = 1.5) -> np.ndarray:
    """Unnormalized Gaussians (peak 1) centred on each joint, ``sigma`` in pixels."""
    centers = np.asarray(joints2d) * size  # pixel units; pixel c spans [c, c + 1)
    grid = np.arange(size) + 0.5
    dx = grid[None, None, :] - centers[:, 0, None, None]
    dy = grid[None, :, None] - centers[:, 1, None, None]
    return np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))


def fit_camera(joints3d: np.ndarray, fill: float = IMAGE_FILL) -> tuple[float, np.ndarray]:
    """Scale and offset that centre the hand's xy extent in the unit image."""
    xy = joints3d[:, :2]
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    extent = float(np.max(hi - lo))
    scale = fill / max(extent, 1e-6)
    trans = 0.5 - scale * (lo + hi) / 2.0
    return scale, trans


def make_sample(model: ManoModel, theta, beta, f_global, heatmap_size: int = 32,
                heatmap_sigma: float = 1.5) -> SyntheticSample:
    vertices, posed = mano_forward(model, theta, beta)
    j3d = joints_to_21(posed, vertices, model.fingertip_ids)
    scale, trans = fit_camera(j3d)
    j2d = project_weak_perspective(j3d, scale, trans)
    return SyntheticSample(
        theta=np.asarray(theta).reshape(model.n_joints, 3), beta=np.asarray(beta), vertices=vertices,
        joints3d=j3d, cam_scale=scale, cam_trans=trans, joints2d=j2d,
        heatmaps=render_heatmaps(j2d, heatmap_size, heatmap_sigma), f_global=np.asarray(f_global))


def synth_dataset(rng: np.random.Generator, n: int, model: ManoModel, global_dim: int = 2048,
                  heatmap_size: int = 32, heatmap_sigma: float = 1.5) -> list[SyntheticSample]:
    if n < 1:
        raise ValueError("need at least one sample")
    samples = []
    for _ in range(n):
        theta = rng.uniform(-THETA_RANGE, THETA_RANGE, (model.n_joints, 3))
        beta = rng.uniform(-BETA_RANGE, BETA_RANGE, model.n_shape)
        f_global = rng.normal(0.0, 1.0, global_dim)
        samples.append(make_sample(model, theta, beta, f_global, heatmap_size, heatmap_sigma))
    return samples


def dataset_digest(samples) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.digest().encode())
    return h.hexdigest()


_ARRAY_FIELDS = ("theta", "beta", "vertices", "joints3d", "cam_trans", "joints2d", "heatmaps", "f_global")


def save_dataset(path: str | Path, samples, model: ManoModel | None = None, meta: dict | None = None) -> None:
    tensors = {}
    for i, s in enumerate(samples):
        for name in _ARRAY_FIELDS:
            tensors[f"sample/{i:05d}/{name}"] = getattr(s, name)
        tensors[f"sample/{i:05d}/cam_scale"] = np.array([s.cam_scale])
    if model is not None:
        tensors.update(model.to_tensors())
    save_archive(path, tensors, {"kind": "dataset", "n_samples": len(samples), **(meta or {})})


def load_dataset(path: str | Path) -> tuple[list[SyntheticSample], ManoModel | None, dict]:
    tensors, meta = load_archive(path)
    if meta.get("kind") != "dataset":
        raise ArchiveError(f"{path}: not a dataset archive")
    samples = []
    for i in range(int(meta["n_samples"])):
        p = f"sample/{i:05d}/"
        try:
            arrays = {name: tensors[p + name] for name in _ARRAY_FIELDS}
            scale = float(tensors[p + "cam_scale"][0])
        except KeyError as exc:
            raise ArchiveError(f"{path}: dataset is missing {exc.args[0]}") from None
        samples.append(SyntheticSample(cam_scale=scale, **arrays))
    model = ManoModel.from_tensors(tensors) if "mano/template" in tensors else None
    return samples, model, meta
