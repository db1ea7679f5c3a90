"""End-to-end network: 2D joints and a global feature in, refined mesh and joints out."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .archive import ArchiveError, load_archive, save_archive
from .config import PipelineConfig
from .graphs import adjacency_from_faces, adjacency_from_parents, hand_joint_graph
from .layers import Module
from .losses import edge_loss, mano_loss, normal_loss, refinement_loss, total_loss
from .mano import (ManoModel, joints_to_21, joints_to_21_backward, make_toy_model, mano_backward,
                   mano_forward_cached)
from .numeric import make_rng, resolve_dtype
from .refiner import RefinerStack
from .semgcn import PoseDecoder, PoseEncoder, ShapeHead, soft_argmax

# Sub-streams of the configured seed.
_MODEL_STREAM = 1
_PARAM_STREAM = 2
_DATA_STREAM = 3
_SHUFFLE_STREAM = 4

OUTPUT_KEYS = ("theta", "beta", "vertices", "joints3d", "vertices_refined", "joints3d_refined")


def substream(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([seed, stream]))


def build_model(config: PipelineConfig) -> ManoModel:
    dtype = resolve_dtype(config.precision)
    if config.model == "toy":
        return make_toy_model(substream(config.seed, _MODEL_STREAM), config.toy_vertices,
                              config.toy_joints, config.n_shape, dtype)
    tensors, _ = load_archive(config.model)
    return ManoModel.from_tensors(tensors).astype(dtype)


class HandReconNet(Module):
    def __init__(self, config: PipelineConfig, model: ManoModel, rng: np.random.Generator | None = None) -> None:
        super().__init__()
        self.config = config
        dtype = resolve_dtype(config.precision)
        self.model = model.astype(dtype)
        rng = substream(config.seed, _PARAM_STREAM) if rng is None else rng
        self.joint_graph = hand_joint_graph(model.parents, model.tip_joints)
        self.kin_graph = adjacency_from_parents(model.parents)
        self.mesh_graph = adjacency_from_faces(model.faces, model.n_verts)
        c = config.encoder_width
        self.encoder = self.add_child("encoder", PoseEncoder(
            rng, config.encoder_kind, self.joint_graph, model.n_joints, c, config.encoder_blocks,
            config.semgconv_variant, dtype))
        self.decoder = self.add_child("decoder", PoseDecoder(
            rng, config.encoder_kind, self.kin_graph, c, config.decoder_hidden, config.semgconv_variant, dtype))
        self.shape_head = self.add_child("shape_head", ShapeHead(
            rng, config.global_dim, config.shape_hidden, model.n_shape, dtype))
        self.refiner = self.add_child("refiner", RefinerStack(
            rng, self.joint_graph, self.mesh_graph, config.refiner_width, config.refiner_blocks,
            config.global_dim, config.head_hidden, config.use_gcn_layer, config.use_mutual_attention,
            config.zero_init_heads, dtype))

    def forward(self, joints2d: np.ndarray, f_global: np.ndarray):
        """Run both stages. Returns ``(outputs, cache)``."""
        m = self.model
        latent, c_enc = self.encoder.forward(joints2d)
        theta, c_dec = self.decoder.forward(latent)
        beta, c_shape = self.shape_head.forward(f_global)
        vertices, posed, c_mano = mano_forward_cached(m, theta, beta)
        j3d = joints_to_21(posed, vertices, m.fingertip_ids)
        v_ref, j_ref, c_ref = self.refiner.forward(f_global, j3d, vertices)
        out = {"joints2d": joints2d, "theta": theta, "beta": beta, "vertices": vertices, "joints3d": j3d,
               "vertices_refined": v_ref, "joints3d_refined": j_ref}
        return out, (c_enc, c_dec, c_shape, c_mano, c_ref)

    def backward(self, grads: dict, cache) -> None:
        """Accumulate parameter gradients given d(loss)/d(output) for any of ``OUTPUT_KEYS``."""
        c_enc, c_dec, c_shape, c_mano, c_ref = cache
        m = self.model
        dtype = c_mano.v_posed.dtype

        def g(name, shape):
            v = grads.get(name)
            return np.zeros(shape, dtype=dtype) if v is None else v

        n_out = m.n_joints_out
        _, d_j3d, d_verts = self.refiner.backward(g("vertices_refined", (m.n_verts, 3)),
                                                  g("joints3d_refined", (n_out, 3)), c_ref)
        d_j3d = d_j3d + g("joints3d", (n_out, 3))
        d_verts = d_verts + g("vertices", (m.n_verts, 3))
        d_posed, d_tips = joints_to_21_backward(d_j3d, m.n_joints, m.n_verts, m.fingertip_ids)
        d_theta, d_beta = mano_backward(m, c_mano, d_verts + d_tips, d_posed)
        d_theta = d_theta + g("theta", (m.n_joints, 3))
        d_beta = d_beta + g("beta", (m.n_shape,))
        self.shape_head.backward(d_beta, c_shape)
        self.encoder.backward(self.decoder.backward(d_theta, c_dec), c_enc)

    def parameter_groups(self) -> dict[str, int]:
        return {name: child.num_parameters() for name, child in self._children.items()}


def network_inputs(sample, config: PipelineConfig):
    """2D joints fed to the network: ground-truth joints, or decoded heatmaps."""
    if config.use_heatmap_input:
        return soft_argmax(sample.heatmaps, config.softargmax_beta)
    return sample.joints2d


def sample_loss(net: HandReconNet, sample, with_grad: bool = True):
    """Weighted training loss for one sample; returns ``(LossReport, outputs, grads)``."""
    cfg = net.config
    j2d = network_inputs(sample, cfg)
    out, cache = net.forward(j2d, sample.f_global)
    faces = net.model.faces
    pred = {"vertices": out["vertices"], "joints3d": out["joints3d"], "theta": out["theta"],
            "beta": out["beta"], "heatmaps": sample.heatmaps, "joints2d": j2d}
    gt = {"vertices": sample.vertices, "joints3d": sample.joints3d, "theta": sample.theta,
          "beta": sample.beta, "heatmaps": sample.heatmaps, "joints2d": sample.joints2d}
    l_mano, _, g_mano = mano_loss(pred, gt, skip=cfg.skip_terms, return_grad=True)
    l_r, gv_r, gj_r = refinement_loss(out["vertices_refined"], out["joints3d_refined"],
                                      sample.vertices, sample.joints3d, return_grad=True)
    l_e, gv_e = edge_loss(out["vertices_refined"], sample.vertices, faces, return_grad=True)
    l_n, gv_n = normal_loss(out["vertices_refined"], sample.vertices, faces, return_grad=True)
    w1, w2, w3, w4 = cfg.loss_weights.as_tuple()
    report = total_loss(cfg.loss_weights, l_mano, l_r, l_e, l_n, skipped=list(cfg.skip_terms))
    if not with_grad:
        return report, out, None
    grads = {key: w1 * g_mano[key] for key in ("vertices", "joints3d", "theta", "beta") if key in g_mano}
    grads["vertices_refined"] = w2 * gv_r + w3 * gv_e + w4 * gv_n
    grads["joints3d_refined"] = w2 * gj_r
    net.backward(grads, cache)
    return report, out, grads


def infer(net: HandReconNet, inputs: dict) -> dict:
    """Run the pipeline on ``{"joints2d" or "heatmaps", "f_global"}``; returns every stage's output."""
    if "joints2d" in inputs:
        j2d = np.asarray(inputs["joints2d"])
    elif "heatmaps" in inputs:
        j2d = soft_argmax(inputs["heatmaps"], net.config.softargmax_beta)
    else:
        raise KeyError("infer needs 'joints2d' or 'heatmaps'")
    if "f_global" not in inputs:
        raise KeyError("infer needs 'f_global'")
    dtype = resolve_dtype(net.config.precision)
    out, _ = net.forward(j2d.astype(dtype), np.asarray(inputs["f_global"], dtype=dtype))
    return out


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, module: Module) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p, g in module.named_parameters():
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.lr:
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    step: int
    params: dict[str, np.ndarray]
    loss_history: list[float]
    term_history: list[dict]


def train_toy(config: PipelineConfig, dataset, steps: int | None = None,
              net: HandReconNet | None = None, model: ManoModel | None = None) -> tuple[TrainState, HandReconNet]:
    """Adam on the weighted loss, averaged over mini-batches; deterministic for a given seed."""
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    steps = config.steps if steps is None else steps
    if net is None:
        net = HandReconNet(config, model if model is not None else build_model(config))
    opt = Adam(config.learning_rate)
    shuffle = substream(config.seed, _SHUFFLE_STREAM)
    batch = min(config.batch_size, len(dataset))
    order = np.array([], dtype=np.int64)
    history: list[float] = []
    terms: list[dict] = []
    for step in range(steps):
        if order.size < batch:
            order = np.concatenate([order, shuffle.permutation(len(dataset))])
        idx, order = order[:batch], order[batch:]
        net.zero_grad()
        sums = np.zeros(5)
        for i in idx:
            rep, _, _ = sample_loss(net, dataset[int(i)])
            sums += (rep.l_mano, rep.l_r, rep.l_e, rep.l_n, rep.total)
        sums /= batch
        if not np.isfinite(sums[-1]):
            raise FloatingPointError(f"non-finite loss at step {step}")
        for _, _, gr in net.named_parameters():
            gr /= batch
        history.append(float(sums[-1]))
        terms.append(dict(zip(("l_mano", "l_r", "l_e", "l_n", "total"), map(float, sums))))
        opt.step(net)
    return TrainState(steps, net.state_dict(), history, terms), net


def dataset_loss(net: HandReconNet, dataset) -> float:
    return float(np.mean([sample_loss(net, s, with_grad=False)[0].total for s in dataset]))


def make_dataset(config: PipelineConfig, model: ManoModel, n: int | None = None):
    from .synth import synth_dataset

    return synth_dataset(substream(config.seed, _DATA_STREAM), config.n_samples if n is None else n, model,
                         config.global_dim, config.heatmap_size, config.heatmap_sigma)


def save_network(path: str | Path, net: HandReconNet, extra_meta: dict | None = None) -> None:
    tensors = net.model.to_tensors()
    tensors.update({f"net/{name}": p for name, p, _ in net.named_parameters()})
    tensors["graph/joint_adjacency"] = net.joint_graph.adjacency.astype(np.uint8)
    meta = {"kind": "network", "config": net.config.to_dict(), **(extra_meta or {})}
    save_archive(path, tensors, meta)


def load_network(path: str | Path, precision: str | None = None) -> HandReconNet:
    tensors, meta = load_archive(path)
    if meta.get("kind") != "network":
        raise ArchiveError(f"{path}: not a network archive")
    config = PipelineConfig.from_dict(meta["config"])
    if precision is not None:
        config = config.updated(precision=precision)
    model = ManoModel.from_tensors(tensors)
    net = HandReconNet(config, model, rng=make_rng(0))
    net.load_state_dict({k[len("net/"):]: v for k, v in tensors.items() if k.startswith("net/")})
    return net
