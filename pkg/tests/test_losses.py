from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handrefine.losses import (MANO_TERMS, LossWeights, edge_loss, mano_loss, mesh_edges, normal_loss,
                               refinement_loss, total_loss)
from handrefine.mano import make_toy_model
from handrefine.numeric import finite_diff_grad_check, make_rng

SHAPES = {"vertices": (7, 3), "joints3d": (5, 3), "theta": (4, 3), "beta": (6,), "heatmaps": (5, 4, 4),
          "joints2d": (5, 2)}


def _pair(seed):
    rng = make_rng(seed)
    return ({k: rng.normal(size=s) for k, s in SHAPES.items()},
            {k: rng.normal(size=s) for k, s in SHAPES.items()})


def _strip(v):
    return np.array([[i, i + 1, i + 2] if i % 2 == 0 else [i + 1, i, i + 2] for i in range(v - 2)])


def test_mano_loss_zero_at_gt():
    pred, _ = _pair(0)
    total, terms = mano_loss(pred, pred)
    assert total == 0.0 and all(v == 0.0 for v in terms.values())


def test_mano_loss_term_isolation():
    pred, _ = _pair(1)
    gt = {k: v.copy() for k, v in pred.items()}
    eps = 0.01
    gt["theta"][2] += np.array([0.6, 0.0, 0.8]) * eps
    total, terms = mano_loss(pred, gt)
    assert np.isclose(total, eps ** 2 / 4, rtol=1e-12)
    assert all(v == 0.0 for k, v in terms.items() if k != "theta")


def test_mano_loss_scripted_oracle():
    pred, gt = _pair(2)
    oracle = 0.0
    for name, width in (("vertices", 3), ("joints3d", 3), ("theta", 3), ("beta", 1), ("heatmaps", 1),
                        ("joints2d", 2)):
        d = (pred[name] - gt[name]).reshape(-1, width)
        oracle += sum(float(row @ row) for row in d) / d.shape[0]
    assert np.isclose(mano_loss(pred, gt)[0], oracle, rtol=1e-13)


def test_mano_loss_skip_and_errors():
    pred, gt = _pair(3)
    total, terms = mano_loss(pred, gt, skip=("heatmaps", "joints2d"))
    assert terms["heatmaps"] is None and terms["joints2d"] is None
    assert np.isclose(total, sum(v for v in terms.values() if v is not None))
    bad = dict(pred)
    bad["theta"] = np.zeros((3, 3))
    with pytest.raises(ValueError, match="theta"):
        mano_loss(bad, gt)
    with pytest.raises(ValueError):
        mano_loss(pred, gt, skip=("nonsense",))


def test_refinement_loss_cases():
    rng = make_rng(4)
    v, j = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
    assert refinement_loss(v, j, v, j) == 0.0
    t = np.array([0.01, -0.02, 0.03])
    assert np.isclose(refinement_loss(v, j + t, v, j), t @ t, rtol=1e-12)
    v2, j2 = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
    oracle = np.mean(np.sum((v2 - v) ** 2, axis=1)) + np.mean(np.sum((j2 - j) ** 2, axis=1))
    assert np.isclose(refinement_loss(v2, j2, v, j), oracle, rtol=1e-13)


def test_mesh_edges_unique():
    assert mesh_edges([[0, 1, 2], [2, 1, 3]]).tolist() == [[0, 1], [0, 2], [1, 2], [1, 3], [2, 3]]


def test_edge_loss_identity_and_scaling():
    m = make_toy_model(make_rng(5), 12, 3)
    gt = m.template
    assert edge_loss(gt, gt, m.faces) == 0.0
    e = mesh_edges(m.faces)
    mean_len = np.mean(np.linalg.norm(gt[e[:, 1]] - gt[e[:, 0]], axis=1))
    assert np.isclose(edge_loss(1.7 * gt, gt, m.faces), 0.7 * mean_len, rtol=1e-12)


def test_edge_loss_loop_oracle():
    rng = make_rng(6)
    faces = _strip(12)
    pred, gt = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    seen = set()
    diffs = []
    for f in faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (min(a, b), max(a, b))
            if key in seen:
                continue
            seen.add(key)
            diffs.append(abs(np.linalg.norm(pred[a] - pred[b]) - np.linalg.norm(gt[a] - gt[b])))
    assert abs(edge_loss(pred, gt, faces) - sum(diffs) / len(diffs)) < 1e-12


def test_edge_loss_excludes_degenerate_gt_edges():
    gt = np.array([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]])
    pred = np.array([[0.0, 0, 0], [0.5, 0, 0], [1.0, 0, 0]])
    with pytest.warns(UserWarning, match="excluded 1"):
        value = edge_loss(pred, gt, [[0, 1, 2]])
    assert np.isclose(value, (0.5 + 0.0) / 2)


def test_normal_loss_identity_and_parallel_edge():
    m = make_toy_model(make_rng(7), 12, 3)
    assert normal_loss(m.template, m.template, m.faces) < 1e-12
    gt = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]])
    pred = gt.copy()
    pred[1] = [0.0, 0.0, 1.0]  # edge 0 -> 1 now along the ground-truth normal
    dots = [1.0, abs(np.dot((pred[2] - pred[1]) / np.linalg.norm(pred[2] - pred[1]), [0, 0, 1])), 0.0]
    assert np.isclose(normal_loss(pred, gt, [[0, 1, 2]]), np.mean(dots), rtol=1e-12)


def test_normal_loss_loop_oracle():
    rng = make_rng(8)
    faces = _strip(12)
    pred, gt = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    total, count = 0.0, 0
    for f in faces:
        n = np.cross(gt[f[1]] - gt[f[0]], gt[f[2]] - gt[f[0]])
        n = n / np.linalg.norm(n)
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            e = pred[b] - pred[a]
            total += abs(np.dot(e / np.linalg.norm(e), n))
            count += 1
    assert abs(normal_loss(pred, gt, faces) - total / count) < 1e-12


def test_normal_loss_degenerate_face_warning():
    gt = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [0.0, 1, 0]])
    with pytest.warns(UserWarning, match="degenerate"):
        normal_loss(gt, gt, [[0, 1, 2], [0, 1, 3]])


@pytest.mark.parametrize("loss", [edge_loss, normal_loss])
def test_mesh_loss_gradients_away_from_kinks(loss):
    rng = make_rng(9)
    faces = _strip(12)
    gt = rng.normal(size=(12, 3))
    pred = gt + rng.normal(0, 0.3, (12, 3))  # nudged so no term sits at its |.| kink
    rep = finite_diff_grad_check(lambda x: loss(x, gt, faces, True), pred)
    assert rep.max_rel_error < 1e-5


def test_l2_gradients():
    pred, gt = _pair(10)
    for name in MANO_TERMS:
        def f(x, name=name):
            p = dict(pred)
            p[name] = x
            v, _, g = mano_loss(p, gt, return_grad=True)
            return v, g[name]
        assert finite_diff_grad_check(f, pred[name]).max_rel_error < 1e-6


def test_total_loss_and_weights():
    rep = total_loss(LossWeights(1, 0, 0, 0), 2.0, 3.0, 4.0, 5.0)
    assert rep.total == 2.0
    assert total_loss(LossWeights(), 0.0, 0.0, 0.0, 0.0).total == 0.0
    rng = make_rng(11)
    w, t = rng.uniform(0, 2, 4), rng.uniform(0, 2, 4)
    assert np.isclose(total_loss(LossWeights(*w), *t).total, float(np.dot(w, t)), rtol=1e-14)
    with pytest.raises(ValueError):
        LossWeights(-1.0, 1, 1, 1)
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0, 0)
    with pytest.raises(ValueError):
        total_loss(LossWeights(), -1.0, 0, 0, 0)
    assert LossWeights().as_tuple() == (1.0, 1.0, 1.0, 0.1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_losses_non_negative_and_zero_at_gt(seed):
    rng = make_rng(seed)
    faces = _strip(10)
    gt = rng.normal(size=(10, 3))
    pred = rng.normal(size=(10, 3))
    j = rng.normal(size=(4, 3))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for value in (edge_loss(pred, gt, faces), normal_loss(pred, gt, faces), refinement_loss(pred, j, gt, j)):
            assert value >= 0
        assert edge_loss(gt, gt, faces) == 0.0
        assert normal_loss(gt, gt, faces) < 1e-12
    assert refinement_loss(gt, j, gt, j) == 0.0
