"""Parametric hand model: blendshapes, joint regression, kinematics and skinning.

Forward pass, for pose ``theta`` (K x 3 axis-angle) and shape ``beta``::

    v_shaped = template + sum_i beta_i * shape_basis[i]
    joints   = joint_regressor @ v_shaped
    v_posed  = v_shaped + pose_basis . vec(R(theta_k) - I), k = 1..K-1
    vertices = v_posed + sum_k skin_weights[:, k] * (G_k - I applied to v_posed)

where ``G_k`` is the global transform of joint ``k`` relative to its rest
pose. The root is kept at its rest position (no global translation).

Joint order follows ``parents``; ``parents[k] < k`` is required so that a
single forward sweep resolves the tree. Fingertips are ordered thumb, index,
middle, ring, pinky.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numeric import DEFAULT_DTYPE

# Kinematic tree of the 16-joint hand model: wrist, then index, middle,
# pinky, ring and thumb chains of three joints each.
MANO_PARENTS = np.array([-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14])
# Distal joint each fingertip hangs from (thumb, index, middle, ring, pinky).
MANO_TIP_JOINTS = np.array([15, 3, 6, 12, 9])
MANO_FINGERTIP_VERTS = np.array([745, 317, 444, 556, 673])

_SMALL_ANGLE = 1e-8
_SERIES_ANGLE = 1e-2


@dataclass
class ManoModel:
    template: np.ndarray          # V x 3
    shape_basis: np.ndarray       # S x V x 3
    pose_basis: np.ndarray        # 9(K-1) x V x 3
    joint_regressor: np.ndarray   # K x V
    skin_weights: np.ndarray      # V x K
    parents: np.ndarray           # K, parents[0] == -1
    faces: np.ndarray             # F x 3
    fingertip_ids: np.ndarray     # 5
    tip_joints: np.ndarray = field(default_factory=lambda: MANO_TIP_JOINTS.copy())

    def __post_init__(self) -> None:
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.fingertip_ids = np.asarray(self.fingertip_ids, dtype=np.int64)
        self.tip_joints = np.asarray(self.tip_joints, dtype=np.int64)
        self.validate()

    @property
    def n_verts(self) -> int:
        return self.template.shape[0]

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[0]

    @property
    def n_joints_out(self) -> int:
        """Joints reported downstream: articulated joints plus fingertips."""
        return self.n_joints + self.fingertip_ids.shape[0]

    def validate(self) -> None:
        v, k = self.n_verts, self.n_joints
        if self.template.shape != (v, 3):
            raise ValueError(f"template must be V x 3, got {self.template.shape}")
        if self.shape_basis.ndim != 3 or self.shape_basis.shape[1:] != (v, 3):
            raise ValueError(f"shape_basis must be S x {v} x 3, got {self.shape_basis.shape}")
        if self.pose_basis.shape != (9 * (k - 1), v, 3):
            raise ValueError(f"pose_basis must be {9 * (k - 1)} x {v} x 3, got {self.pose_basis.shape}")
        if self.joint_regressor.shape != (k, v):
            raise ValueError(f"joint_regressor must be {k} x {v}, got {self.joint_regressor.shape}")
        if self.skin_weights.shape != (v, k):
            raise ValueError(f"skin_weights must be {v} x {k}, got {self.skin_weights.shape}")
        if np.any(self.skin_weights < 0) or not np.allclose(self.skin_weights.sum(1), 1.0, atol=1e-5):
            raise ValueError("skin_weights rows must be non-negative and sum to 1")
        if not np.allclose(self.joint_regressor.sum(1), 1.0, atol=1e-5):
            raise ValueError("joint_regressor rows must sum to 1")
        if self.parents[0] != -1:
            raise ValueError("parents[0] must be -1 (root)")
        for j in range(1, k):
            if not 0 <= self.parents[j] < j:
                raise ValueError(f"parents[{j}]={self.parents[j]} must reference an earlier joint")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be F x 3")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ValueError("face index out of range")
        if np.any((self.fingertip_ids < 0) | (self.fingertip_ids >= v)):
            raise ValueError("fingertip index out of range")
        if self.tip_joints.shape != self.fingertip_ids.shape or np.any(
                (self.tip_joints < 0) | (self.tip_joints >= k)):
            raise ValueError("tip_joints must name one valid joint per fingertip")

    def astype(self, dtype) -> ManoModel:
        return ManoModel(
            template=self.template.astype(dtype), shape_basis=self.shape_basis.astype(dtype),
            pose_basis=self.pose_basis.astype(dtype), joint_regressor=self.joint_regressor.astype(dtype),
            skin_weights=self.skin_weights.astype(dtype), parents=self.parents, faces=self.faces,
            fingertip_ids=self.fingertip_ids, tip_joints=self.tip_joints)

    def to_tensors(self, prefix: str = "mano/") -> dict[str, np.ndarray]:
        return {prefix + name: np.asarray(getattr(self, name)) for name in _MODEL_FIELDS}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], prefix: str = "mano/") -> ManoModel:
        try:
            return cls(**{name: tensors[prefix + name] for name in _MODEL_FIELDS})
        except KeyError as exc:
            raise KeyError(f"archive lacks model tensor {exc.args[0]}") from None


_MODEL_FIELDS = ("template", "shape_basis", "pose_basis", "joint_regressor", "skin_weights",
                 "parents", "faces", "fingertip_ids", "tip_joints")


def skew(r: np.ndarray) -> np.ndarray:
    """Cross-product matrices for a (..., 3) array."""
    r = np.asarray(r)
    s = np.zeros(r.shape[:-1] + (3, 3), dtype=r.dtype)
    s[..., 0, 1], s[..., 0, 2] = -r[..., 2], r[..., 1]
    s[..., 1, 0], s[..., 1, 2] = r[..., 2], -r[..., 0]
    s[..., 2, 0], s[..., 2, 1] = -r[..., 1], r[..., 0]
    return s


def _rodrigues_coeffs(t: np.ndarray):
    """a = sin t / t and b = (1 - cos t) / t^2, series-expanded near zero."""
    small = t < _SMALL_ANGLE
    ts = np.where(small, 1.0, t)
    t2 = t * t
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(ts) / ts)
    b = np.where(small, 0.5 - t2 / 24.0, 2.0 * np.sin(ts / 2.0) ** 2 / (ts * ts))
    return a, b


def _rodrigues_coeff_derivs(t: np.ndarray):
    """(da/dt)/t and (db/dt)/t, with series below ``_SERIES_ANGLE`` to avoid cancellation."""
    small = t < _SERIES_ANGLE
    ts = np.where(small, 1.0, t)
    t2 = t * t
    t4 = t2 * t2
    ca_series = -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0 + t4 * t2 / 45360.0
    cb_series = -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0 + t4 * t2 / 453600.0
    ca = (ts * np.cos(ts) - np.sin(ts)) / ts**3
    cb = (ts * np.sin(ts) - 2.0 * (1.0 - np.cos(ts))) / ts**4
    return np.where(small, ca_series, ca), np.where(small, cb_series, cb)


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    r = np.asarray(axis_angle, dtype=np.result_type(axis_angle, np.float32))
    t = np.linalg.norm(r, axis=-1)
    a, b = _rodrigues_coeffs(t)
    s = skew(r)
    eye = np.broadcast_to(np.eye(3, dtype=r.dtype), s.shape)
    return eye + a[..., None, None] * s + b[..., None, None] * (s @ s)


_GENERATORS = skew(np.eye(3))


def rodrigues_backward(axis_angle: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Pull back d(loss)/dR (..., 3, 3) to d(loss)/d(axis_angle) (..., 3)."""
    r = np.asarray(axis_angle)
    t = np.linalg.norm(r, axis=-1)
    a, b = _rodrigues_coeffs(t)
    ca, cb = _rodrigues_coeff_derivs(t)
    s = skew(r)
    s2 = s @ s
    g_s = np.sum(d_rot * s, axis=(-2, -1))
    g_s2 = np.sum(d_rot * s2, axis=(-2, -1))
    out = np.empty_like(r, dtype=np.result_type(r, d_rot))
    for i in range(3):
        e = _GENERATORS[i]
        g_e = np.sum(d_rot * e, axis=(-2, -1))
        g_es = np.sum(d_rot * (e @ s + s @ e), axis=(-2, -1))
        out[..., i] = ca * r[..., i] * g_s + a * g_e + cb * r[..., i] * g_s2 + b * g_es
    return out


def _check_beta(model: ManoModel, beta: np.ndarray) -> np.ndarray:
    beta = np.asarray(beta)
    if beta.shape != (model.n_shape,):
        raise ValueError(f"beta must have length {model.n_shape}, got shape {beta.shape}")
    return beta


def _check_theta(model: ManoModel, theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta)
    if theta.size != model.n_joints * 3:
        raise ValueError(f"theta must be {model.n_joints} x 3, got shape {theta.shape}")
    return theta.reshape(model.n_joints, 3)


def shape_blend(model: ManoModel, beta: np.ndarray) -> np.ndarray:
    beta = _check_beta(model, beta)
    return np.tensordot(beta, model.shape_basis, axes=1)


def pose_features(rotations: np.ndarray) -> np.ndarray:
    """vec(R_k - I) for the non-root joints, concatenated (9(K-1),)."""
    return (rotations[1:] - np.eye(3, dtype=rotations.dtype)).reshape(-1)


def pose_blend(model: ManoModel, theta: np.ndarray) -> np.ndarray:
    theta = _check_theta(model, theta)
    return np.tensordot(pose_features(rodrigues(theta)), model.pose_basis, axes=1)


def rest_joints(model: ManoModel, beta: np.ndarray) -> np.ndarray:
    return model.joint_regressor @ (model.template + shape_blend(model, beta))


def _global_chain(rotations: np.ndarray, rest: np.ndarray, parents: np.ndarray):
    """Global rotations, posed joints and rest-relative translations.

    Translations follow ``t_j = t_p - R_p (R_j - I) rest_j`` so that the rest
    pose yields exactly zero offsets and exactly the rest joints.
    """
    k = rest.shape[0]
    eye = np.eye(3, dtype=rotations.dtype)
    rot_g = np.empty_like(rotations)
    offsets = np.empty_like(rest)
    rot_g[0] = rotations[0]
    offsets[0] = -(rotations[0] - eye) @ rest[0]
    for j in range(1, k):
        p = parents[j]
        rot_g[j] = rot_g[p] @ rotations[j]
        offsets[j] = offsets[p] - rot_g[p] @ ((rotations[j] - eye) @ rest[j])
    pos_g = np.einsum("kij,kj->ki", rot_g, rest) + offsets
    return rot_g, pos_g, offsets


def forward_kinematics(theta: np.ndarray, rest: np.ndarray, parents: np.ndarray):
    """Return rest-relative global transforms (K x 4 x 4) and posed joints (K x 3)."""
    theta = np.asarray(theta).reshape(-1, 3)
    rest = np.asarray(rest)
    parents = np.asarray(parents)
    if theta.shape[0] != rest.shape[0] or parents.shape[0] != rest.shape[0]:
        raise ValueError("theta, rest joints and parents disagree on joint count")
    rot_g, pos_g, offsets = _global_chain(rodrigues(theta), rest, parents)
    transforms = np.zeros((rest.shape[0], 4, 4), dtype=rot_g.dtype)
    transforms[:, :3, :3] = rot_g
    transforms[:, :3, 3] = offsets
    transforms[:, 3, 3] = 1.0
    return transforms, pos_g


def lbs(model: ManoModel, transforms: np.ndarray, shaped_posed_template: np.ndarray) -> np.ndarray:
    """Blend the per-joint transforms by skin weight and apply them to each vertex."""
    if transforms.shape != (model.n_joints, 4, 4):
        raise ValueError(f"expected {model.n_joints} 4x4 transforms, got {transforms.shape}")
    if shaped_posed_template.shape != (model.n_verts, 3):
        raise ValueError(f"expected {model.n_verts} x 3 vertices, got {shaped_posed_template.shape}")
    # Displacement form: exact at the rest pose even when the weights sum to 1 only approximately.
    delta = transforms[:, :3, :].copy()
    delta[:, :, :3] -= np.eye(3, dtype=delta.dtype)
    blended = np.einsum("vk,kij->vij", model.skin_weights, delta)
    v = shaped_posed_template
    return v + np.einsum("vij,vj->vi", blended[:, :, :3], v) + blended[:, :, 3]


@dataclass
class ManoCache:
    theta: np.ndarray
    rotations: np.ndarray
    v_posed: np.ndarray
    rest: np.ndarray
    rot_g: np.ndarray
    pos_g: np.ndarray
    blended_rot: np.ndarray


def mano_forward_cached(model: ManoModel, theta: np.ndarray, beta: np.ndarray):
    theta = _check_theta(model, theta)
    beta = _check_beta(model, beta)
    v_shaped = model.template + np.tensordot(beta, model.shape_basis, axes=1)
    rest = model.joint_regressor @ v_shaped
    rotations = rodrigues(theta)
    v_posed = v_shaped + np.tensordot(pose_features(rotations), model.pose_basis, axes=1)
    rot_g, pos_g, offsets = _global_chain(rotations, rest, model.parents)
    blended_rot = np.einsum("vk,kij->vij", model.skin_weights, rot_g - np.eye(3, dtype=rot_g.dtype))
    vertices = v_posed + np.einsum("vij,vj->vi", blended_rot, v_posed) + model.skin_weights @ offsets
    cache = ManoCache(theta, rotations, v_posed, rest, rot_g, pos_g, blended_rot)
    return vertices, pos_g, cache


def mano_forward(model: ManoModel, theta: np.ndarray, beta: np.ndarray):
    """Posed mesh (V x 3) and posed articulated joints (K x 3)."""
    vertices, joints, _ = mano_forward_cached(model, theta, beta)
    return vertices, joints


def mano_backward(model: ManoModel, cache: ManoCache, d_vertices: np.ndarray | None,
                  d_joints: np.ndarray | None):
    """Gradients of a scalar loss w.r.t. theta (K x 3) and beta given output gradients."""
    k = model.n_joints
    w = model.skin_weights
    dtype = cache.rot_g.dtype
    d_rot_g = np.zeros_like(cache.rot_g)
    d_pos_g = np.zeros_like(cache.pos_g) if d_joints is None else np.array(d_joints, dtype=dtype)
    d_rest = np.zeros_like(cache.rest)
    d_v_posed = np.zeros_like(cache.v_posed)

    if d_vertices is not None:
        # skinning
        d_v_posed = d_vertices + np.einsum("vji,vj->vi", cache.blended_rot, d_vertices)
        d_rot_g += np.einsum("vk,vi,vj->kij", w, d_vertices, cache.v_posed)
        d_off = w.T @ d_vertices
        d_pos_g += d_off
        d_rot_g -= np.einsum("ki,kj->kij", d_off, cache.rest)
        d_rest -= np.einsum("kji,kj->ki", cache.rot_g, d_off)

    # kinematic chain, children before parents
    d_rot = np.zeros_like(cache.rotations)
    for j in range(k - 1, 0, -1):
        p = model.parents[j]
        d_rot_g[p] += d_rot_g[j] @ cache.rotations[j].T
        d_rot[j] += cache.rot_g[p].T @ d_rot_g[j]
        d_rot_g[p] += np.outer(d_pos_g[j], cache.rest[j] - cache.rest[p])
        local = cache.rot_g[p].T @ d_pos_g[j]
        d_rest[j] += local
        d_rest[p] -= local
        d_pos_g[p] += d_pos_g[j]
    d_rot[0] += d_rot_g[0]
    d_rest[0] += d_pos_g[0]

    # pose blendshapes
    d_feat = np.tensordot(model.pose_basis, d_v_posed, axes=([1, 2], [0, 1]))
    d_rot[1:] += d_feat.reshape(k - 1, 3, 3)

    d_v_shaped = d_v_posed + model.joint_regressor.T @ d_rest
    d_beta = np.tensordot(model.shape_basis, d_v_shaped, axes=([1, 2], [0, 1]))
    d_theta = rodrigues_backward(cache.theta, d_rot)
    return d_theta, d_beta


def joints_to_21(posed_joints: np.ndarray, mesh: np.ndarray, fingertip_ids: np.ndarray) -> np.ndarray:
    """Articulated joints followed by the fingertip vertices (thumb to pinky)."""
    fingertip_ids = np.asarray(fingertip_ids)
    if np.any((fingertip_ids < 0) | (fingertip_ids >= mesh.shape[0])):
        raise IndexError(f"fingertip index out of range for a {mesh.shape[0]}-vertex mesh")
    return np.concatenate([posed_joints, mesh[fingertip_ids]], axis=0)


def joints_to_21_backward(d_out: np.ndarray, n_joints: int, n_verts: int, fingertip_ids: np.ndarray):
    d_joints = d_out[:n_joints].copy()
    d_mesh = np.zeros((n_verts, 3), dtype=d_out.dtype)
    np.add.at(d_mesh, np.asarray(fingertip_ids), d_out[n_joints:])
    return d_joints, d_mesh


def toy_parents(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Tree with joints dealt round-robin onto five fingers; returns (parents, tip_joints)."""
    parents = np.full(k, -1, dtype=np.int64)
    last = [0] * 5
    for j in range(1, k):
        f = (j - 1) % 5
        parents[j] = last[f]
        last[f] = j
    # fingertip order thumb..pinky maps onto chains 4, 0, 1, 3, 2 like the real model
    tips = np.array([last[4], last[0], last[1], last[3], last[2]], dtype=np.int64)
    return parents, tips


def make_toy_model(rng: np.random.Generator, v: int, k: int, n_shape: int = 10,
                   dtype=DEFAULT_DTYPE) -> ManoModel:
    """Random small model satisfying every model invariant.

    Vertices are grouped in contiguous blocks, one per joint, scattered around
    a synthetic bone layout; faces triangulate the vertex sequence as a strip.
    """
    if not v >= k >= 2:
        raise ValueError(f"toy model needs v >= k >= 2, got v={v}, k={k}")
    parents, tip_joints = toy_parents(k)

    # bone layout: fingers fan out from the wrist in the xy-plane, 3 cm per joint
    design = np.zeros((k, 3))
    for j in range(1, k):
        f = (j - 1) % 5
        ang = np.deg2rad(-40.0 + 20.0 * f)
        direction = np.array([np.sin(ang), np.cos(ang), 0.0])
        design[j] = design[parents[j]] + 0.03 * direction + rng.normal(0.0, 0.002, 3)

    owner = np.minimum((np.arange(v) * k) // v, k - 1)
    template = design[owner] + rng.normal(0.0, 0.008, (v, 3))

    regressor = np.zeros((k, v))
    for j in range(k):
        members = np.flatnonzero(owner == j)
        wts = rng.uniform(0.5, 1.5, members.size)
        regressor[j, members] = wts / wts.sum()

    skin = np.zeros((v, k))
    skin[np.arange(v), owner] = 1.0
    for i in range(v):
        p = parents[owner[i]]
        if p >= 0:
            skin[i, p] = rng.uniform(0.0, 0.4)
    skin /= skin.sum(axis=1, keepdims=True)

    faces = np.array([[i, i + 1, i + 2] if i % 2 == 0 else [i + 1, i, i + 2] for i in range(v - 2)],
                     dtype=np.int64).reshape(-1, 3)

    tips = np.empty(5, dtype=np.int64)
    used: dict[int, int] = {}
    for f, j in enumerate(tip_joints):
        members = np.flatnonzero(owner == j)
        n_prev = used.get(int(j), 0)
        tips[f] = members[-1 - (n_prev % members.size)]
        used[int(j)] = n_prev + 1

    return ManoModel(
        template=template.astype(dtype),
        shape_basis=rng.normal(0.0, 0.004, (n_shape, v, 3)).astype(dtype),
        pose_basis=rng.normal(0.0, 0.002, (9 * (k - 1), v, 3)).astype(dtype),
        joint_regressor=regressor.astype(dtype),
        skin_weights=skin.astype(dtype),
        parents=parents,
        faces=faces,
        fingertip_ids=tips,
        tip_joints=tip_joints,
    )
