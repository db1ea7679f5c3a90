from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handrefine.graphs import adjacency_from_faces, adjacency_from_parents, normalize_adjacency
from handrefine.numeric import make_rng
from handrefine.refiner import (JOINT_TO_VERTEX, VERTEX_TO_JOINT, BasicBlock, MutualAttention, NodeFeatures,
                                RefinerStack, attend, cross_attention, fuse, init_node_features,
                                intra_graph_update, refine_forward)


def _graphs():
    joint_graph = adjacency_from_parents([-1, 0, 1, 2, 3])
    faces = np.array([[i, i + 1, i + 2] for i in range(10)])
    return joint_graph, adjacency_from_faces(faces, 12)


def _randomize(module, rng, scale=0.5):
    for _, p, _ in module.named_parameters():
        p[...] = rng.normal(0, scale, p.shape)


def _identity_projections(layer):
    for name in ("q_j", "k_j", "v_j", "q_v", "k_v", "v_v"):
        lin = getattr(layer, name)
        lin.weight[...] = np.eye(layer.width)
        if lin.bias is not None:
            lin.bias[...] = 0.0


def test_init_node_features_layout():
    rng = make_rng(0)
    j3d, mesh = rng.normal(size=(5, 3)), rng.normal(size=(12, 3))
    nf = init_node_features(np.zeros(6), j3d, mesh, global_dim=6)
    assert nf.joint_feats.shape == (5, 9)
    np.testing.assert_array_equal(nf.joint_feats[:, :6], 0.0)
    np.testing.assert_array_equal(nf.joint_feats[:, 6:], j3d)
    np.testing.assert_array_equal(nf.vertex_feats[:, 6:], mesh)
    j3d[1] = j3d[0]
    nf = init_node_features(rng.normal(size=6), j3d, mesh, global_dim=6)
    np.testing.assert_array_equal(nf.joint_feats[0], nf.joint_feats[1])
    with pytest.raises(ValueError):
        init_node_features(np.zeros(5), j3d, mesh, global_dim=6)


def test_zero_logits_give_uniform_attention():
    layer = MutualAttention(make_rng(1), 4)
    layer.q_j.weight[...] = 0.0
    layer.q_j.bias[...] = 0.0
    nf = NodeFeatures(make_rng(2).normal(size=(3, 4)), make_rng(3).normal(size=(7, 4)))
    a, agg = cross_attention(nf, layer, VERTEX_TO_JOINT)
    np.testing.assert_allclose(a, 1 / 7, atol=1e-15)
    v_v = layer.v_v.forward(nf.vertex_feats)[0]
    np.testing.assert_allclose(agg, np.tile(v_v.mean(axis=0), (3, 1)), atol=1e-14)


def test_saturated_attention_is_one_hot():
    layer = MutualAttention(make_rng(1), 2)
    _identity_projections(layer)
    joints = np.array([[30.0, 0.0]])
    verts = np.array([[0.0, 30.0], [30.0, 0.0], [-30.0, 0.0]])
    a, agg = cross_attention(NodeFeatures(joints, verts), layer, VERTEX_TO_JOINT)
    assert a[0, 1] > 1 - 1e-12
    np.testing.assert_allclose(agg[0], verts[1], atol=1e-9)


def test_cross_attention_two_by_three_oracle():
    layer = MutualAttention(make_rng(4), 2)
    _identity_projections(layer)
    joints = np.array([[0.2, -0.5], [1.0, 0.3]])
    verts = np.array([[0.1, 0.4], [-0.7, 0.2], [0.5, 0.5]])
    nf = NodeFeatures(joints, verts)
    a, agg = cross_attention(nf, layer, VERTEX_TO_JOINT)
    for i in range(2):
        logits = [(joints[i, 0] * verts[j, 0] + joints[i, 1] * verts[j, 1]) / np.sqrt(2) for j in range(3)]
        z = sum(np.exp(s) for s in logits)
        for j in range(3):
            assert abs(a[i, j] - np.exp(logits[j]) / z) < 1e-12
        for c in range(2):
            assert abs(agg[i, c] - sum(np.exp(logits[j]) / z * verts[j, c] for j in range(3))) < 1e-12
    a2, agg2 = cross_attention(nf, layer, JOINT_TO_VERTEX)
    assert a2.shape == (3, 2) and agg2.shape == (3, 2)
    with pytest.raises(ValueError):
        cross_attention(nf, layer, "sideways")


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-20, 20))
def test_attention_rows_and_logit_shift(seed, shift):
    rng = make_rng(seed)
    nq, nk, c = (int(x) for x in rng.integers(1, 9, 3))
    q, k, v = rng.normal(0, 3, (nq, c)), rng.normal(0, 3, (nk, c)), rng.normal(size=(nk, c))
    a, _ = attend(q, k, v)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((a >= 0) & (a <= 1))
    # Appending channel `shift` to queries and 1 to keys adds shift/sqrt(c) to every logit;
    # rescaling q keeps the 1/sqrt(width) factor equal to the unshifted case.
    scale = np.sqrt((c + 1) / c)
    k1 = np.concatenate([k, np.ones((nk, 1))], axis=1)
    shifted, _ = attend(np.concatenate([q, np.full((nq, 1), shift)], axis=1) * scale, k1, v)
    base, _ = attend(np.concatenate([q, np.zeros((nq, 1))], axis=1) * scale, k1, v)
    np.testing.assert_allclose(base, a, atol=1e-12)
    np.testing.assert_allclose(shifted, base, atol=1e-12)


def test_fuse_bypass_configurations():
    c = 3
    layer = MutualAttention(make_rng(5), c)
    own = make_rng(6).normal(size=(4, c))
    agg = make_rng(7).normal(size=(4, c))
    verts = make_rng(8).normal(size=(2, c))
    agg_v = make_rng(9).normal(size=(2, c))
    for mlp in (layer.fuse_j, layer.fuse_v):
        l0, l1 = mlp.layers
        l0.weight[...] = 0.0
        l0.weight[:c, :c] = np.eye(c)
        l0.weight[:c, c:] = -np.eye(c)
        l0.bias[...] = 0.0
        l1.weight[...] = np.vstack([np.eye(c), -np.eye(c)])
        l1.bias[...] = 0.0
    out = fuse(NodeFeatures(own, verts), agg, agg_v, layer)
    np.testing.assert_allclose(out.joint_feats, own, atol=1e-15)
    np.testing.assert_allclose(out.vertex_feats, verts, atol=1e-15)
    for mlp in (layer.fuse_j, layer.fuse_v):
        l0 = mlp.layers[0]
        l0.weight[...] = np.vstack([np.zeros((c, 2 * c)), np.hstack([np.eye(c), -np.eye(c)])])
    out = fuse(NodeFeatures(own, verts), agg, agg_v, layer)
    np.testing.assert_allclose(out.joint_feats, agg, atol=1e-15)
    with pytest.raises(ValueError):
        fuse(NodeFeatures(own, verts), agg[:2], agg_v, layer)


def test_fuse_perceptron_oracle():
    rng = make_rng(10)
    layer = MutualAttention(rng, 2)
    _randomize(layer, rng)
    own, agg = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    out = fuse(NodeFeatures(own, rng.normal(size=(1, 2))), agg, rng.normal(size=(1, 2)), layer)
    l0, l1 = layer.fuse_j.layers
    z = np.concatenate([own, agg], axis=1)
    np.testing.assert_allclose(out.joint_feats, np.maximum(z @ l0.weight + l0.bias, 0) @ l1.weight + l1.bias,
                               atol=1e-14)


def test_intra_graph_update_identity_and_separation():
    rng = make_rng(11)
    jg, mg = _graphs()
    block = BasicBlock(rng, jg, mg, 4)
    nf = NodeFeatures(rng.normal(size=(5, 4)), rng.normal(size=(12, 4)))
    for lay in (block.joint_gcn, block.mesh_gcn):
        lay.weight[...] = 0.0
    out = intra_graph_update(nf, block)
    np.testing.assert_array_equal(out.joint_feats, nf.joint_feats)
    np.testing.assert_array_equal(out.vertex_feats, nf.vertex_feats)
    _randomize(block, rng)
    out = intra_graph_update(nf, block)
    nf2 = NodeFeatures(nf.joint_feats, nf.vertex_feats + 1.0)
    np.testing.assert_array_equal(intra_graph_update(nf2, block).joint_feats, out.joint_feats)
    # composition oracle
    adj = normalize_adjacency(jg)
    jw = block.joint_gcn
    want_j = nf.joint_feats + np.maximum(adj @ nf.joint_feats @ jw.weight + jw.bias, 0)
    mw = block.mesh_gcn
    mask = mg.neighborhood_mask()
    p = np.where(mask, np.exp(mw.edge_logits - mw.edge_logits.max()), 0)
    p /= p.sum(1, keepdims=True)
    want_v = nf.vertex_feats + np.maximum(p @ nf.vertex_feats @ mw.weight + mw.bias, 0)
    np.testing.assert_allclose(out.joint_feats, want_j, atol=1e-13)
    np.testing.assert_allclose(out.vertex_feats, want_v, atol=1e-13)


def _scripted_stack(stack, jg, mg, f_global, j3d, mesh):
    def lin(layer, x):
        return x @ layer.weight + (0.0 if layer.bias is None else layer.bias)

    def mlp(m, x):
        h = x
        for i, layer in enumerate(m.layers):
            h = lin(layer, h)
            if i < len(m.layers) - 1:
                h = np.maximum(h, 0)
        return h

    def softmax(s):
        e = np.exp(s - s.max(1, keepdims=True))
        return e / e.sum(1, keepdims=True)

    g = f_global.shape[0]
    fj = lin(stack.embed_j, np.hstack([np.tile(f_global, (j3d.shape[0], 1)), j3d]))
    fv = lin(stack.embed_v, np.hstack([np.tile(f_global, (mesh.shape[0], 1)), mesh]))
    assert g == stack.global_dim
    adj = normalize_adjacency(jg)
    mask = mg.neighborhood_mask()
    for b in stack.blocks:
        fj = fj + np.maximum(adj @ fj @ b.joint_gcn.weight + b.joint_gcn.bias, 0)
        p = softmax(np.where(mask, b.mesh_gcn.edge_logits, -np.inf))
        fv = fv + np.maximum(p @ fv @ b.mesh_gcn.weight + b.mesh_gcn.bias, 0)
        at = b.attention
        c = fj.shape[1]
        agg_j = softmax(lin(at.q_j, fj) @ lin(at.k_v, fv).T / np.sqrt(c)) @ lin(at.v_v, fv)
        agg_v = softmax(lin(at.q_v, fv) @ lin(at.k_j, fj).T / np.sqrt(c)) @ lin(at.v_j, fj)
        fj, fv = mlp(at.fuse_j, np.hstack([fj, agg_j])), mlp(at.fuse_v, np.hstack([fv, agg_v]))
    return mesh + mlp(stack.head_v, fv), j3d + mlp(stack.head_j, fj)


def test_refine_forward_block_by_block_oracle():
    rng = make_rng(12)
    jg, mg = _graphs()
    stack = RefinerStack(rng, jg, mg, width=4, n_blocks=2, global_dim=6, head_hidden=5, zero_init_heads=False)
    _randomize(stack, rng, 0.4)
    f, j3d, mesh = rng.normal(size=6), rng.normal(size=(5, 3)), rng.normal(size=(12, 3))
    v, j = refine_forward(stack, f, j3d, mesh)
    ov, oj = _scripted_stack(stack, jg, mg, f, j3d, mesh)
    np.testing.assert_allclose(v, ov, atol=1e-12)
    np.testing.assert_allclose(j, oj, atol=1e-12)


def test_zero_heads_make_refiner_identity():
    rng = make_rng(13)
    jg, mg = _graphs()
    stack = RefinerStack(rng, jg, mg, width=4, n_blocks=3, global_dim=6, head_hidden=5)
    f, j3d, mesh = rng.normal(size=6), rng.normal(size=(5, 3)), rng.normal(size=(12, 3))
    v, j = refine_forward(stack, f, j3d, mesh)
    assert np.array_equal(v, mesh) and np.array_equal(j, j3d)
    with pytest.raises(ValueError):
        refine_forward(stack, f, j3d[:4], mesh)


def test_key_projections_have_no_bias():
    layer = MutualAttention(make_rng(0), 4)
    assert layer.k_j.bias is None and layer.k_v.bias is None and layer.q_j.bias is not None
