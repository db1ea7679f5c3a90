"""Initial-stage regressors: graph convolutions, pose encoder/decoder, shape head, heatmap decoding."""

from __future__ import annotations

import numpy as np

from .graphs import Graph, normalize_adjacency
from .layers import MLP, Linear, Module
from .numeric import DEFAULT_DTYPE, softmax_rows, softmax_rows_backward, xavier_init

ENCODER_KINDS = ("semgcn", "gcn", "mlp")


def _activate(h: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(h, 0.0) if activation == "relu" else h


def _activate_backward(dy: np.ndarray, h: np.ndarray, activation: str) -> np.ndarray:
    return dy * (h > 0) if activation == "relu" else dy


class SemGConv(Module):
    """Graph convolution with a learned, neighborhood-softmaxed edge weighting.

    ``out = act(softmax_nbr(M) @ x @ W + b)`` where the softmax runs over each
    row of ``M`` restricted to the node's neighborhood in ``A + I``. The
    ``split`` variant uses separate transforms for the self and neighbor terms.
    """

    def __init__(self, rng: np.random.Generator, graph: Graph, c_in: int, c_out: int,
                 activation: str = "relu", variant: str = "shared", dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        if variant not in ("shared", "split"):
            raise ValueError(f"unknown SemGConv variant {variant!r}")
        self.mask = graph.neighborhood_mask()
        self.activation = activation
        self.variant = variant
        self.weight = self.add_param("weight", xavier_init(rng, c_in, c_out, dtype))
        if variant == "split":
            self.weight_nbr = self.add_param("weight_nbr", xavier_init(rng, c_in, c_out, dtype))
        self.bias = self.add_param("bias", np.zeros(c_out, dtype=dtype))
        self.edge_logits = self.add_param("edge_logits", np.ones((graph.n, graph.n), dtype=dtype))

    def attention(self) -> np.ndarray:
        return softmax_rows(self.edge_logits, self.mask)

    def forward(self, x: np.ndarray):
        if x.shape[0] != self.mask.shape[0]:
            raise ValueError(f"SemGConv expects {self.mask.shape[0]} nodes, got {x.shape[0]}")
        p = self.attention()
        if self.variant == "shared":
            agg = p @ x
            h = agg @ self.weight + self.bias
            aux = agg
        else:
            s = np.diag(p)
            off = p - np.diag(s)
            xs = s[:, None] * x
            ao = off @ x
            h = xs @ self.weight + ao @ self.weight_nbr + self.bias
            aux = (xs, ao, off)
        return _activate(h, self.activation), (x, p, h, aux)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x, p, h, aux = cache
        dh = _activate_backward(dy, h, self.activation)
        self.grads["bias"] += dh.sum(axis=0)
        if self.variant == "shared":
            agg = aux
            self.grads["weight"] += agg.T @ dh
            dagg = dh @ self.weight.T
            dp = dagg @ x.T
            dx = p.T @ dagg
        else:
            xs, ao, off = aux
            s = np.diag(p)
            self.grads["weight"] += xs.T @ dh
            self.grads["weight_nbr"] += ao.T @ dh
            dxs = dh @ self.weight.T
            dao = dh @ self.weight_nbr.T
            dx = s[:, None] * dxs + off.T @ dao
            dp = (dao @ x.T) * (1.0 - np.eye(p.shape[0]))
            dp[np.diag_indices_from(dp)] += np.sum(dxs * x, axis=1)
        self.grads["edge_logits"] += softmax_rows_backward(p, dp)
        return dx


class GConv(Module):
    """Plain graph convolution ``act(norm_adj @ x @ W + b)``."""

    def __init__(self, rng: np.random.Generator, graph: Graph | None, c_in: int, c_out: int,
                 activation: str = "relu", norm_adj: np.ndarray | None = None,
                 dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.norm_adj = normalize_adjacency(graph) if norm_adj is None else np.asarray(norm_adj)
        self.activation = activation
        self.weight = self.add_param("weight", xavier_init(rng, c_in, c_out, dtype))
        self.bias = self.add_param("bias", np.zeros(c_out, dtype=dtype))

    def forward(self, x: np.ndarray):
        if x.shape[0] != self.norm_adj.shape[0] or x.shape[1] != self.weight.shape[0]:
            raise ValueError(f"GConv input {x.shape} does not match adjacency {self.norm_adj.shape} "
                             f"and weight {self.weight.shape}")
        agg = self.norm_adj @ x
        h = agg @ self.weight + self.bias
        return _activate(h, self.activation), (agg, h)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        agg, h = cache
        dh = _activate_backward(dy, h, self.activation)
        self.grads["weight"] += agg.T @ dh
        self.grads["bias"] += dh.sum(axis=0)
        return self.norm_adj.T @ (dh @ self.weight.T)


def semgconv_forward(layer: SemGConv, x: np.ndarray, g: Graph | None = None) -> np.ndarray:
    if g is not None and not np.array_equal(g.neighborhood_mask(), layer.mask):
        raise ValueError("graph does not match the layer's neighborhood mask")
    return layer.forward(x)[0]


def gconv_forward(weight: np.ndarray, x: np.ndarray, norm_adj: np.ndarray,
                  activation: str = "relu") -> np.ndarray:
    if x.shape[1] != weight.shape[0] or norm_adj.shape != (x.shape[0], x.shape[0]):
        raise ValueError(f"gconv shapes disagree: x {x.shape}, weight {weight.shape}, adj {norm_adj.shape}")
    return _activate(norm_adj @ x @ weight, activation)


class NodeLinear(Module):
    """Graph-free stand-in: the same linear map on every node."""

    def __init__(self, rng, c_in, c_out, activation="relu", dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.activation = activation
        self.fc = self.add_child("fc", Linear(rng, c_in, c_out, dtype=dtype))

    def forward(self, x):
        h, c = self.fc.forward(x)
        return _activate(h, self.activation), (c, h)

    def backward(self, dy, cache):
        c, h = cache
        return self.fc.backward(_activate_backward(dy, h, self.activation), c)


def graph_layer(kind: str, rng, graph: Graph, c_in: int, c_out: int, activation: str = "relu",
                variant: str = "shared", dtype=DEFAULT_DTYPE) -> Module:
    if kind == "semgcn":
        return SemGConv(rng, graph, c_in, c_out, activation, variant, dtype)
    if kind == "gcn":
        return GConv(rng, graph, c_in, c_out, activation, dtype=dtype)
    if kind == "mlp":
        return NodeLinear(rng, c_in, c_out, activation, dtype)
    raise ValueError(f"unknown graph layer kind {kind!r}; expected one of {ENCODER_KINDS}")


class ResGraphBlock(Module):
    """``x + layer_b(layer_a(x))``."""

    def __init__(self, layer_a: Module, layer_b: Module) -> None:
        super().__init__()
        self.layer_a = self.add_child("a", layer_a)
        self.layer_b = self.add_child("b", layer_b)

    def forward(self, x):
        h, ca = self.layer_a.forward(x)
        y, cb = self.layer_b.forward(h)
        return x + y, (ca, cb)

    def backward(self, dy, cache):
        ca, cb = cache
        return dy + self.layer_a.backward(self.layer_b.backward(dy, cb), ca)


class PoseEncoder(Module):
    """2D joints (N x 2) to the latent pose space (K x C).

    Graph kinds lift to C channels, run residual blocks and then mix nodes
    with a learned K x N map initialized to pick the K articulated joints.
    The ``mlp`` kind flattens the joints and regresses the latent directly.
    """

    def __init__(self, rng, kind: str, joint_graph: Graph, n_latent: int, width: int = 128,
                 n_blocks: int = 2, variant: str = "shared", dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.kind = kind
        self.n_in = joint_graph.n
        self.n_latent = n_latent
        self.width = width
        if kind == "mlp":
            self.mlp = self.add_child("mlp", MLP(rng, [2 * self.n_in, width, n_latent * width], dtype=dtype))
            return
        self.lift = self.add_child("lift", graph_layer(kind, rng, joint_graph, 2, width, "relu", variant, dtype))
        self.blocks = []
        for i in range(n_blocks):
            block = ResGraphBlock(graph_layer(kind, rng, joint_graph, width, width, "relu", variant, dtype),
                                  graph_layer(kind, rng, joint_graph, width, width, "relu", variant, dtype))
            self.blocks.append(self.add_child(f"block{i}", block))
        select = np.zeros((n_latent, self.n_in), dtype=dtype)
        select[np.arange(n_latent), np.arange(n_latent)] = 1.0
        self.reduce = self.add_param("reduce", select)

    def forward(self, j2d: np.ndarray):
        if j2d.shape != (self.n_in, 2):
            raise ValueError(f"expected {self.n_in} x 2 joints, got {j2d.shape}")
        if self.kind == "mlp":
            out, c = self.mlp.forward(j2d.reshape(1, -1))
            return out.reshape(self.n_latent, self.width), c
        h, c_lift = self.lift.forward(j2d)
        caches = []
        for block in self.blocks:
            h, c = block.forward(h)
            caches.append(c)
        return self.reduce @ h, (c_lift, caches, h)

    def backward(self, d_latent, cache):
        if self.kind == "mlp":
            return self.mlp.backward(d_latent.reshape(1, -1), cache).reshape(self.n_in, 2)
        c_lift, caches, h = cache
        self.grads["reduce"] += d_latent @ h.T
        d = self.reduce.T @ d_latent
        for block, c in zip(reversed(self.blocks), reversed(caches)):
            d = block.backward(d, c)
        return self.lift.backward(d, c_lift)


class PoseDecoder(Module):
    """Latent (K x C) to axis-angle pose (K x 3): one graph layer, then a per-node MLP."""

    def __init__(self, rng, kind: str, kin_graph: Graph, width: int = 128, hidden: int = 64,
                 variant: str = "shared", dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.n = kin_graph.n
        self.graph = None
        if kind != "mlp":
            self.graph = self.add_child("graph", graph_layer(kind, rng, kin_graph, width, width, "relu",
                                                             variant, dtype))
        self.mlp = self.add_child("mlp", MLP(rng, [width, hidden, 3], dtype=dtype))

    def forward(self, latent):
        if latent.shape[0] != self.n:
            raise ValueError(f"latent must have {self.n} rows, got {latent.shape}")
        cg = None
        h = latent
        if self.graph is not None:
            h, cg = self.graph.forward(latent)
        theta, cm = self.mlp.forward(h)
        return theta, (cg, cm)

    def backward(self, d_theta, cache):
        cg, cm = cache
        d = self.mlp.backward(d_theta, cm)
        if self.graph is not None:
            d = self.graph.backward(d, cg)
        return d


class ShapeHead(Module):
    def __init__(self, rng, global_dim: int = 2048, hidden: int = 128, n_shape: int = 10,
                 dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.global_dim = global_dim
        self.mlp = self.add_child("mlp", MLP(rng, [global_dim, hidden, n_shape], dtype=dtype))

    def forward(self, f_global):
        f_global = np.asarray(f_global)
        if f_global.shape != (self.global_dim,):
            raise ValueError(f"global feature must have length {self.global_dim}, got {f_global.shape}")
        beta, c = self.mlp.forward(f_global[None, :])
        return beta[0], c

    def backward(self, d_beta, cache):
        return self.mlp.backward(d_beta[None, :], cache)[0]


def encode_pose(j2d, encoder: PoseEncoder):
    return encoder.forward(np.asarray(j2d))[0]


def decode_pose(latent, decoder: PoseDecoder):
    return decoder.forward(np.asarray(latent))[0]


def shape_head(f_global, head: ShapeHead):
    return head.forward(f_global)[0]


def _pixel_grids(h: int, w: int):
    gx = np.tile((np.arange(w) + 0.5) / w, h)
    gy = np.repeat((np.arange(h) + 0.5) / h, w)
    return gx, gy


def soft_argmax(heatmaps: np.ndarray, beta: float = 1.0, return_cache: bool = False):
    """Center of mass of the spatially softmaxed maps, as normalized (x, y) per joint.

    ``beta`` scales the logits before the softmax (inverse temperature).
    """
    hm = np.asarray(heatmaps)
    if hm.ndim != 3:
        raise ValueError(f"heatmaps must be N x h x w, got {hm.shape}")
    if not np.all(np.isfinite(hm)):
        bad = int(np.flatnonzero(~np.isfinite(hm).reshape(hm.shape[0], -1).all(axis=1))[0])
        raise ValueError(f"heatmap {bad} contains non-finite values")
    n, h, w = hm.shape
    p = softmax_rows(beta * hm.reshape(n, -1))
    gx, gy = _pixel_grids(h, w)
    out = np.stack([p @ gx, p @ gy], axis=1)
    if return_cache:
        return out, (p, h, w, beta)
    return out


def soft_argmax_backward(d_out: np.ndarray, cache) -> np.ndarray:
    p, h, w, beta = cache
    gx, gy = _pixel_grids(h, w)
    dp = d_out[:, :1] * gx[None, :] + d_out[:, 1:] * gy[None, :]
    return (beta * softmax_rows_backward(p, dp)).reshape(-1, h, w)
