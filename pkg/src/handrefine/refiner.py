"""Refinement stage: joint and vertex graphs exchanging features by mutual attention.

Node features are node-major (rows are nodes). Each basic block runs a
residual intra-graph update (plain GCN on the skeleton, SemGConv on the
mesh), then cross-graph attention in both directions, then a per-graph
fusion perceptron over ``[own features, aggregated features]``. Coordinate
heads are residual: they predict offsets added to the input coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import Graph
from .layers import MLP, Linear, Module
from .numeric import DEFAULT_DTYPE, softmax_rows, softmax_rows_backward
from .semgcn import GConv, SemGConv

VERTEX_TO_JOINT = "vertex_to_joint"
JOINT_TO_VERTEX = "joint_to_vertex"


@dataclass
class NodeFeatures:
    joint_feats: np.ndarray
    vertex_feats: np.ndarray


def init_node_features(f_global: np.ndarray, j3d: np.ndarray, mesh: np.ndarray,
                       global_dim: int = 2048) -> NodeFeatures:
    """Each node gets ``[f_global, xyz]``; the last three channels are the coordinates."""
    f_global = np.asarray(f_global)
    if f_global.shape != (global_dim,):
        raise ValueError(f"global feature must have length {global_dim}, got {f_global.shape}")

    def attach(coords):
        return np.concatenate([np.broadcast_to(f_global, (coords.shape[0], global_dim)), coords], axis=1)

    return NodeFeatures(attach(np.asarray(j3d)), attach(np.asarray(mesh)))


def attend(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Scaled dot-product attention; returns (weights, aggregated values)."""
    scale = 1.0 / np.sqrt(q.shape[1])
    a = softmax_rows((q @ k.T) * scale)
    return a, a @ v


def attend_backward(d_out: np.ndarray, q, k, v, a):
    scale = 1.0 / np.sqrt(q.shape[1])
    dv = a.T @ d_out
    ds = softmax_rows_backward(a, d_out @ v.T) * scale
    return ds @ k, ds.T @ q, dv


class MutualAttention(Module):
    """Query/key/value projections for both graphs plus the two fusion units."""

    def __init__(self, rng, width: int, fuse_hidden: int | None = None, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.width = width
        # Key biases would only shift each attention row by a constant, which softmax ignores.
        for name in ("q_j", "k_j", "v_j", "q_v", "k_v", "v_v"):
            layer = Linear(rng, width, width, bias=not name.startswith("k_"), dtype=dtype)
            setattr(self, name, self.add_child(name, layer))
        hidden = 2 * width if fuse_hidden is None else fuse_hidden
        self.fuse_j = self.add_child("fuse_j", MLP(rng, [2 * width, hidden, width], dtype=dtype))
        self.fuse_v = self.add_child("fuse_v", MLP(rng, [2 * width, hidden, width], dtype=dtype))

    def project(self, nf: NodeFeatures):
        out = {}
        caches = {}
        for name in ("q_j", "k_j", "v_j"):
            out[name], caches[name] = getattr(self, name).forward(nf.joint_feats)
        for name in ("q_v", "k_v", "v_v"):
            out[name], caches[name] = getattr(self, name).forward(nf.vertex_feats)
        return out, caches

    def forward(self, nf: NodeFeatures):
        proj, pcache = self.project(nf)
        a_vj, agg_j = attend(proj["q_j"], proj["k_v"], proj["v_v"])
        a_jv, agg_v = attend(proj["q_v"], proj["k_j"], proj["v_j"])
        fj, cj = self.fuse_j.forward(np.concatenate([nf.joint_feats, agg_j], axis=1))
        fv, cv = self.fuse_v.forward(np.concatenate([nf.vertex_feats, agg_v], axis=1))
        return NodeFeatures(fj, fv), (proj, pcache, a_vj, a_jv, cj, cv)

    def backward(self, d: NodeFeatures, cache) -> NodeFeatures:
        proj, pcache, a_vj, a_jv, cj, cv = cache
        c = self.width
        dzj = self.fuse_j.backward(d.joint_feats, cj)
        dzv = self.fuse_v.backward(d.vertex_feats, cv)
        d_joint = dzj[:, :c].copy()
        d_vert = dzv[:, :c].copy()
        dproj = {}
        dproj["q_j"], dproj["k_v"], dproj["v_v"] = attend_backward(dzj[:, c:], proj["q_j"], proj["k_v"],
                                                                   proj["v_v"], a_vj)
        dproj["q_v"], dproj["k_j"], dproj["v_j"] = attend_backward(dzv[:, c:], proj["q_v"], proj["k_j"],
                                                                   proj["v_j"], a_jv)
        for name in ("q_j", "k_j", "v_j"):
            d_joint += getattr(self, name).backward(dproj[name], pcache[name])
        for name in ("q_v", "k_v", "v_v"):
            d_vert += getattr(self, name).backward(dproj[name], pcache[name])
        return NodeFeatures(d_joint, d_vert)


def cross_attention(nf: NodeFeatures, layer: MutualAttention, direction: str):
    """Attention matrix and aggregated features for one direction of the exchange."""
    proj, _ = layer.project(nf)
    if direction == VERTEX_TO_JOINT:
        return attend(proj["q_j"], proj["k_v"], proj["v_v"])
    if direction == JOINT_TO_VERTEX:
        return attend(proj["q_v"], proj["k_j"], proj["v_j"])
    raise ValueError(f"unknown direction {direction!r}")


def fuse(nf_hat: NodeFeatures, agg_j: np.ndarray, agg_v: np.ndarray, layer: MutualAttention) -> NodeFeatures:
    if agg_j.shape != nf_hat.joint_feats.shape or agg_v.shape != nf_hat.vertex_feats.shape:
        raise ValueError("aggregated features must match the node feature shapes")
    fj, _ = layer.fuse_j.forward(np.concatenate([nf_hat.joint_feats, agg_j], axis=1))
    fv, _ = layer.fuse_v.forward(np.concatenate([nf_hat.vertex_feats, agg_v], axis=1))
    return NodeFeatures(fj, fv)


class BasicBlock(Module):
    def __init__(self, rng, joint_graph: Graph, mesh_graph: Graph, width: int, use_gcn: bool = True,
                 use_attention: bool = True, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.joint_gcn = self.mesh_gcn = self.attention = None
        if use_gcn:
            self.joint_gcn = self.add_child("joint_gcn", GConv(rng, joint_graph, width, width, dtype=dtype))
            self.mesh_gcn = self.add_child("mesh_gcn", SemGConv(rng, mesh_graph, width, width, dtype=dtype))
        if use_attention:
            self.attention = self.add_child("attention", MutualAttention(rng, width, dtype=dtype))

    def intra(self, nf: NodeFeatures):
        if self.joint_gcn is None:
            return nf, None
        hj, cj = self.joint_gcn.forward(nf.joint_feats)
        hv, cv = self.mesh_gcn.forward(nf.vertex_feats)
        return NodeFeatures(nf.joint_feats + hj, nf.vertex_feats + hv), (cj, cv)

    def intra_backward(self, d: NodeFeatures, cache) -> NodeFeatures:
        if cache is None:
            return d
        cj, cv = cache
        return NodeFeatures(d.joint_feats + self.joint_gcn.backward(d.joint_feats, cj),
                            d.vertex_feats + self.mesh_gcn.backward(d.vertex_feats, cv))

    def forward(self, nf: NodeFeatures):
        hat, ci = self.intra(nf)
        if self.attention is None:
            return hat, (ci, None)
        out, ca = self.attention.forward(hat)
        return out, (ci, ca)

    def backward(self, d: NodeFeatures, cache) -> NodeFeatures:
        ci, ca = cache
        if ca is not None:
            d = self.attention.backward(d, ca)
        return self.intra_backward(d, ci)


def intra_graph_update(nf: NodeFeatures, block: BasicBlock) -> NodeFeatures:
    return block.intra(nf)[0]


class RefinerStack(Module):
    def __init__(self, rng, joint_graph: Graph, mesh_graph: Graph, width: int = 128, n_blocks: int = 2,
                 global_dim: int = 2048, head_hidden: int = 64, use_gcn: bool = True,
                 use_attention: bool = True, zero_init_heads: bool = True, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        if n_blocks < 1:
            raise ValueError("the refiner needs at least one block")
        self.global_dim = global_dim
        self.n_joints = joint_graph.n
        self.n_verts = mesh_graph.n
        self.embed_j = self.add_child("embed_j", Linear(rng, global_dim + 3, width, dtype=dtype))
        self.embed_v = self.add_child("embed_v", Linear(rng, global_dim + 3, width, dtype=dtype))
        self.blocks = [self.add_child(f"block{i}", BasicBlock(rng, joint_graph, mesh_graph, width, use_gcn,
                                                              use_attention, dtype))
                       for i in range(n_blocks)]
        self.head_j = self.add_child("head_j", MLP(rng, [width, head_hidden, 3], zero_last=zero_init_heads,
                                                   dtype=dtype))
        self.head_v = self.add_child("head_v", MLP(rng, [width, head_hidden, 3], zero_last=zero_init_heads,
                                                   dtype=dtype))

    def forward(self, f_global, j3d, mesh):
        if j3d.shape != (self.n_joints, 3) or mesh.shape != (self.n_verts, 3):
            raise ValueError(f"refiner expects {self.n_joints} joints and {self.n_verts} vertices, "
                             f"got {j3d.shape} and {mesh.shape}")
        nf0 = init_node_features(f_global, j3d, mesh, self.global_dim)
        ej, cej = self.embed_j.forward(nf0.joint_feats)
        ev, cev = self.embed_v.forward(nf0.vertex_feats)
        nf = NodeFeatures(ej, ev)
        caches = []
        for block in self.blocks:
            nf, c = block.forward(nf)
            caches.append(c)
        oj, chj = self.head_j.forward(nf.joint_feats)
        ov, chv = self.head_v.forward(nf.vertex_feats)
        return mesh + ov, j3d + oj, (cej, cev, caches, chj, chv)

    def backward(self, d_vertices, d_joints, cache):
        """Returns gradients w.r.t. (f_global, j3d, mesh)."""
        cej, cev, caches, chj, chv = cache
        d = NodeFeatures(self.head_j.backward(d_joints, chj), self.head_v.backward(d_vertices, chv))
        for block, c in zip(reversed(self.blocks), reversed(caches)):
            d = block.backward(d, c)
        dxj = self.embed_j.backward(d.joint_feats, cej)
        dxv = self.embed_v.backward(d.vertex_feats, cev)
        g = self.global_dim
        d_global = dxj[:, :g].sum(axis=0) + dxv[:, :g].sum(axis=0)
        return d_global, d_joints + dxj[:, g:], d_vertices + dxv[:, g:]


def refine_forward(stack: RefinerStack, f_global, j3d, mesh):
    v, j, _ = stack.forward(np.asarray(f_global), np.asarray(j3d), np.asarray(mesh))
    return v, j
