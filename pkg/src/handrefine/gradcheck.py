"""Finite-difference checks of every hand-written backward pass at toy sizes.

Each check projects the operation's outputs onto fixed random weights to get a
scalar, then compares the analytic gradient against central differences for
the inputs and every parameter tensor (large tensors are probed on a seeded
subset of coordinates).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import PipelineConfig
from .graphs import Graph, adjacency_from_faces, adjacency_from_parents, normalize_adjacency
from .layers import MLP, Module
from .losses import edge_loss, mano_loss, normal_loss, refinement_loss
from .mano import make_toy_model, mano_backward, mano_forward_cached, rodrigues, rodrigues_backward
from .numeric import GradCheckReport, finite_diff_grad_check, make_rng, sample_indices
from .pipeline import HandReconNet, sample_loss
from .refiner import MutualAttention, NodeFeatures, RefinerStack, attend, attend_backward
from .semgcn import GConv, PoseDecoder, PoseEncoder, SemGConv, ShapeHead, soft_argmax, soft_argmax_backward
from .synth import synth_dataset

OP_TOLERANCE = 1e-5
# Whole-network probes see the full loss magnitude, so gradients near 1e-8 hit the
# central-difference roundoff floor (about 1e-11 absolute); ops are checked in isolation at 1e-5.
END_TO_END_TOLERANCE = 1e-3
GROUP_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport
    tolerance: float
    seconds: float
    parts: dict

    @property
    def passed(self) -> bool:
        return self.report.max_rel_error < self.tolerance


def _worst(reports: dict[str, GradCheckReport]) -> GradCheckReport:
    return max(reports.values(), key=lambda r: r.max_rel_error)


def check_input(f, x, rng, max_coords=None, eps=1e-5) -> GradCheckReport:
    return finite_diff_grad_check(f, x, eps, sample_indices(rng, np.size(x), max_coords))


def check_params(module: Module, run: Callable[[], float], rng, max_coords=None,
                 eps=1e-5) -> dict[str, GradCheckReport]:
    """``run()`` must do a forward and backward pass and return the scalar loss."""
    out = {}
    for name, p, g in list(module.named_parameters()):
        orig = p.copy()

        def f(x, p=p, g=g):
            p[...] = x.reshape(p.shape)
            module.zero_grad()
            value = run()
            return value, g.copy()

        try:
            out[name] = check_input(f, orig, rng, max_coords, eps)
        finally:
            p[...] = orig
    return out


def check_param_groups(module: Module, run: Callable[[], float], rng, eps=1e-5) -> dict[str, GradCheckReport]:
    """One directional derivative per parameter tensor along a random unit direction.

    Probing ``loss(p + t u)`` pools every coordinate of the group, so components far
    below the roundoff floor no longer decide the relative error on their own.
    """
    out = {}
    for name, p, g in list(module.named_parameters()):
        orig = p.copy()
        u = rng.normal(size=p.shape)
        u /= np.linalg.norm(u)

        def f(t, p=p, g=g, u=u, orig=orig):
            p[...] = orig + t[0] * u
            module.zero_grad()
            value = run()
            return value, np.array([np.sum(g * u)])

        try:
            out[name] = finite_diff_grad_check(f, np.zeros(1), eps)
        finally:
            p[...] = orig
    return out


def jitter_biases(module: Module, rng, scale: float = 0.3) -> None:
    """Random biases keep ReLU pre-activations away from the kink at exactly zero."""
    for _, p, _ in module.named_parameters():
        if p.ndim == 1:
            p[...] = rng.normal(0.0, scale, p.shape)


def _chain_graph(n: int) -> Graph:
    return adjacency_from_parents([-1] + list(range(n - 1)))


def check_rodrigues(rng) -> dict:
    out = {}
    for i, norm in enumerate((1e-6, 0.05, 0.7, 2.5)):
        r = rng.normal(size=3)
        r *= norm / np.linalg.norm(r)
        w = rng.normal(size=(3, 3))
        out[f"norm={norm:g}"] = check_input(lambda x: (float(np.sum(w * rodrigues(x))),
                                                       rodrigues_backward(x, w)), r, rng)
    return out


def check_mano(rng) -> dict:
    model = make_toy_model(rng, 14, 4)
    wv = rng.normal(size=(model.n_verts, 3))
    wj = rng.normal(size=(model.n_joints, 3))
    nt = model.n_joints * 3

    def f(x):
        v, j, c = mano_forward_cached(model, x[:nt].reshape(-1, 3), x[nt:])
        dt, db = mano_backward(model, c, wv, wj)
        return float(np.sum(wv * v) + np.sum(wj * j)), np.concatenate([dt.ravel(), db])

    x = np.concatenate([rng.uniform(-0.8, 0.8, nt), rng.uniform(-2, 2, model.n_shape)])
    return {"theta+beta": check_input(f, x, rng)}


def _layer_checks(layer: Module, x: np.ndarray, rng) -> dict:
    jitter_biases(layer, rng)
    y, _ = layer.forward(x)
    w = rng.normal(size=y.shape)

    def f_x(xv):
        layer.zero_grad()
        out, c = layer.forward(xv)
        return float(np.sum(w * out)), layer.backward(w, c)

    def run():
        out, c = layer.forward(x)
        layer.backward(w, c)
        return float(np.sum(w * out))

    res = {"x": check_input(f_x, x, rng)}
    res.update(check_params(layer, run, rng))
    return res


def check_semgconv(rng) -> dict:
    g = _chain_graph(4)
    out = {}
    for variant in ("shared", "split"):
        layer = SemGConv(rng, g, 3, 5, "relu", variant)
        layer.edge_logits[...] = rng.normal(size=layer.edge_logits.shape)
        for k, v in _layer_checks(layer, rng.normal(size=(4, 3)), rng).items():
            out[f"{variant}.{k}"] = v
    return out


def check_gconv(rng) -> dict:
    g = adjacency_from_faces([[0, 1, 2], [1, 2, 3]], 4)
    layer = GConv(rng, g, 3, 5, "relu")
    return _layer_checks(layer, rng.normal(size=(4, 3)), rng)


def check_soft_argmax(rng) -> dict:
    w = rng.normal(size=(3, 2))

    def f(x):
        out, c = soft_argmax(x, 2.0, return_cache=True)
        return float(np.sum(w * out)), soft_argmax_backward(w, c)

    return {"heatmaps": check_input(f, rng.normal(size=(3, 6, 5)), rng)}


def _toy_features(rng, nj=3, nv=5, c=4) -> NodeFeatures:
    return NodeFeatures(rng.normal(size=(nj, c)), rng.normal(size=(nv, c)))


def check_cross_attention(rng) -> dict:
    layer = MutualAttention(rng, 4)
    nf = _toy_features(rng)
    wj = rng.normal(size=(3, 4))
    wv = rng.normal(size=(5, 4))

    def forward_backward(nf_in: NodeFeatures):
        proj, pc = layer.project(nf_in)
        a_vj, agg_j = attend(proj["q_j"], proj["k_v"], proj["v_v"])
        a_jv, agg_v = attend(proj["q_v"], proj["k_j"], proj["v_j"])
        d = {}
        d["q_j"], d["k_v"], d["v_v"] = attend_backward(wj, proj["q_j"], proj["k_v"], proj["v_v"], a_vj)
        d["q_v"], d["k_j"], d["v_j"] = attend_backward(wv, proj["q_v"], proj["k_j"], proj["v_j"], a_jv)
        dj = sum(getattr(layer, n).backward(d[n], pc[n]) for n in ("q_j", "k_j", "v_j"))
        dv = sum(getattr(layer, n).backward(d[n], pc[n]) for n in ("q_v", "k_v", "v_v"))
        return float(np.sum(wj * agg_j) + np.sum(wv * agg_v)), dj, dv

    def f_j(x):
        layer.zero_grad()
        val, dj, _ = forward_backward(NodeFeatures(x, nf.vertex_feats))
        return val, dj

    def f_v(x):
        layer.zero_grad()
        val, _, dv = forward_backward(NodeFeatures(nf.joint_feats, x))
        return val, dv

    res = {"joint_feats": check_input(f_j, nf.joint_feats, rng),
           "vertex_feats": check_input(f_v, nf.vertex_feats, rng)}
    proj_only = Module()
    for n in ("q_j", "k_j", "v_j", "q_v", "k_v", "v_v"):
        proj_only.add_child(n, getattr(layer, n))
    res.update(check_params(proj_only, lambda: forward_backward(nf)[0], rng))
    return res


def check_fuse(rng) -> dict:
    mlp = MLP(rng, [8, 8, 4])
    return _layer_checks(mlp, rng.normal(size=(5, 8)), rng)


def _toy_refiner(rng, global_dim=6, width=4):
    joint_graph = _chain_graph(5)
    faces = np.array([[i, i + 1, i + 2] for i in range(10)])
    mesh_graph = adjacency_from_faces(faces, 12)
    stack = RefinerStack(rng, joint_graph, mesh_graph, width, 2, global_dim, 5, zero_init_heads=False)
    jitter_biases(stack, rng)
    return stack


def check_refiner(rng, max_coords=40) -> dict:
    stack = _toy_refiner(rng)
    f_global = rng.normal(size=6)
    j3d = rng.normal(size=(5, 3))
    mesh = rng.normal(size=(12, 3))
    wv = rng.normal(size=(12, 3))
    wj = rng.normal(size=(5, 3))

    def fb(fg, jj, mm):
        stack.zero_grad()
        v, j, c = stack.forward(fg, jj, mm)
        grads = stack.backward(wv, wj, c)
        return float(np.sum(wv * v) + np.sum(wj * j)), grads

    def pick(i):
        def f(x):
            args = [f_global, j3d, mesh]
            args[i] = x
            val, grads = fb(*args)
            return val, grads[i]
        return f

    res = {name: check_input(pick(i), x, rng)
           for i, (name, x) in enumerate((("f_global", f_global), ("j3d", j3d), ("mesh", mesh)))}

    def run():
        v, j, c = stack.forward(f_global, j3d, mesh)
        stack.backward(wv, wj, c)
        return float(np.sum(wv * v) + np.sum(wj * j))

    res.update(check_params(stack, run, rng, max_coords))
    return res


def check_pose_modules(rng) -> dict:
    joint_graph = adjacency_from_parents([-1, 0, 1, 0, 3, 0], [(6, 2), (7, 4)])
    kin = adjacency_from_parents([-1, 0, 1, 0, 3, 0])
    res = {}
    for kind in ("semgcn", "gcn", "mlp"):
        enc = PoseEncoder(rng, kind, joint_graph, 6, width=5, n_blocks=1)
        for k, v in _layer_checks(enc, rng.uniform(0, 1, (8, 2)), rng).items():
            res[f"encode_pose.{kind}.{k}"] = v
        dec = PoseDecoder(rng, kind, kin, width=5, hidden=4)
        for k, v in _layer_checks(dec, rng.normal(size=(6, 5)), rng).items():
            res[f"decode_pose.{kind}.{k}"] = v
    head = ShapeHead(rng, global_dim=7, hidden=6, n_shape=4)
    jitter_biases(head, rng)
    x = rng.normal(size=7)
    w = rng.normal(size=4)

    def f(xv):
        head.zero_grad()
        b, c = head.forward(xv)
        return float(w @ b), head.backward(w, c)

    res["shape_head.f_global"] = check_input(f, x, rng)

    def run():
        b, c = head.forward(x)
        head.backward(w, c)
        return float(w @ b)

    res.update({f"shape_head.{k}": v for k, v in check_params(head, run, rng).items()})
    return res


def _nudged_meshes(rng, v=12):
    faces = np.array([[i, i + 1, i + 2] if i % 2 == 0 else [i + 1, i, i + 2] for i in range(v - 2)])
    gt = rng.normal(size=(v, 3))
    pred = gt + rng.normal(0, 0.3, (v, 3))
    return faces, pred, gt


def check_losses(rng) -> dict:
    res = {}
    shapes = {"vertices": (7, 3), "joints3d": (5, 3), "theta": (4, 3), "beta": (6,),
              "heatmaps": (5, 4, 4), "joints2d": (5, 2)}
    gt = {k: rng.normal(size=s) for k, s in shapes.items()}
    pred = {k: rng.normal(size=s) for k, s in shapes.items()}
    for name in shapes:
        def f(x, name=name):
            p = dict(pred)
            p[name] = x
            val, _, g = mano_loss(p, gt, return_grad=True)
            return val, g[name]
        res[f"mano.{name}"] = check_input(f, pred[name], rng)

    v_gt, j_gt = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
    v_p, j_p = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
    res["refinement.vertices"] = check_input(
        lambda x: (refinement_loss(x, j_p, v_gt, j_gt), refinement_loss(x, j_p, v_gt, j_gt, True)[1]), v_p, rng)
    res["refinement.joints"] = check_input(
        lambda x: (refinement_loss(v_p, x, v_gt, j_gt), refinement_loss(v_p, x, v_gt, j_gt, True)[2]), j_p, rng)

    faces, pred_mesh, gt_mesh = _nudged_meshes(rng)
    res["edge"] = check_input(lambda x: edge_loss(x, gt_mesh, faces, True), pred_mesh, rng)
    res["normal"] = check_input(lambda x: normal_loss(x, gt_mesh, faces, True), pred_mesh, rng)

    lam = rng.uniform(0.1, 2.0, 3)

    def total(x):
        le, ge = edge_loss(x, gt_mesh, faces, True)
        ln, gn = normal_loss(x, gt_mesh, faces, True)
        lr, gr, _ = refinement_loss(x, gt_mesh, gt_mesh, gt_mesh, True)
        return lam[0] * lr + lam[1] * le + lam[2] * ln, lam[0] * gr + lam[1] * ge + lam[2] * gn

    res["total"] = check_input(total, pred_mesh, rng)
    return res


def small_network_config(**overrides) -> PipelineConfig:
    base = dict(toy_vertices=14, toy_joints=4, global_dim=8, encoder_width=6, encoder_blocks=1,
                decoder_hidden=5, shape_hidden=6, refiner_width=5, refiner_blocks=1, head_hidden=4,
                zero_init_heads=False, n_samples=1)
    base.update(overrides)
    return PipelineConfig(**base)


def _end_to_end_problem(rng, config: PipelineConfig | None):
    cfg = small_network_config() if config is None else config
    model = make_toy_model(make_rng(cfg.seed + 11), cfg.toy_vertices, cfg.toy_joints)
    net = HandReconNet(cfg, model, rng=make_rng(cfg.seed + 12))
    jitter_biases(net, rng, 0.1)
    sample = synth_dataset(make_rng(cfg.seed + 13), 1, model, cfg.global_dim)[0]

    def run():
        return sample_loss(net, sample)[0].total

    return net, run


def check_end_to_end(rng, max_coords=12, config: PipelineConfig | None = None) -> dict:
    """Coordinate-wise probes of d(total loss)/d(parameters)."""
    net, run = _end_to_end_problem(rng, config)
    return check_params(net, run, rng, max_coords)


def check_end_to_end_groups(rng, config: PipelineConfig | None = None) -> dict:
    """Directional probes of d(total loss)/d(every parameter group)."""
    net, run = _end_to_end_problem(rng, config)
    return check_param_groups(net, run, rng)


CHECKS: dict[str, tuple[Callable, float]] = {
    "rodrigues": (check_rodrigues, OP_TOLERANCE),
    "mano_forward": (check_mano, OP_TOLERANCE),
    "semgconv_forward": (check_semgconv, OP_TOLERANCE),
    "gconv_forward": (check_gconv, OP_TOLERANCE),
    "soft_argmax": (check_soft_argmax, OP_TOLERANCE),
    "cross_attention": (check_cross_attention, OP_TOLERANCE),
    "fuse": (check_fuse, OP_TOLERANCE),
    "refine_forward": (check_refiner, OP_TOLERANCE),
    "pose_modules": (check_pose_modules, OP_TOLERANCE),
    "losses": (check_losses, OP_TOLERANCE),
    "end_to_end": (check_end_to_end, END_TO_END_TOLERANCE),
    "end_to_end_groups": (check_end_to_end_groups, GROUP_TOLERANCE),
}


def run_checks(seed: int = 0, names=None) -> list[CheckResult]:
    results = []
    for name, (fn, tol) in CHECKS.items():
        if names is not None and name not in names:
            continue
        t0 = time.perf_counter()
        parts = fn(make_rng(seed))
        results.append(CheckResult(name, _worst(parts), tol, time.perf_counter() - t0, parts))
    return results
