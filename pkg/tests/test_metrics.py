from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from handrefine.metrics import (evaluate_samples, f_score, pa_position_error, pck_curve, position_error,
                                procrustes_align, procrustes_transform)
from handrefine.numeric import make_rng


def random_similarity(rng):
    rot = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
    return rot, float(rng.uniform(0.3, 3.0)), rng.normal(size=3)


def test_position_error_cases():
    rng = make_rng(0)
    gt = rng.normal(size=(21, 3))
    assert position_error(gt, gt) == 0.0
    assert np.isclose(position_error(gt + [0.003, 0, 0], gt), 3.0)
    pred = rng.normal(size=(21, 3))
    oracle = sum(np.sqrt(sum((pred[i, c] - gt[i, c]) ** 2 for c in range(3))) for i in range(21)) / 21 * 1000
    assert np.isclose(position_error(pred, gt), oracle, rtol=1e-13)
    with pytest.raises(ValueError):
        position_error(pred[:3], gt)


@pytest.mark.parametrize("n", [5, 21, 50])
def test_procrustes_exact_recovery(n):
    rng = make_rng(n)
    for _ in range(200):
        gt = rng.normal(size=(n, 3))
        rot, s, t = random_similarity(rng)
        pred = s * gt @ rot.T + t
        assert np.abs(procrustes_align(pred, gt) - gt).max() < 1e-9


def test_procrustes_identity():
    gt = make_rng(1).normal(size=(10, 3))
    s, r, t = procrustes_transform(gt, gt)
    assert np.isclose(s, 1.0) and np.allclose(r, np.eye(3)) and np.allclose(t, 0, atol=1e-15)
    assert pa_position_error(gt, gt) < 1e-10


def test_procrustes_beats_random_search():
    rng = make_rng(2)
    gt = rng.normal(size=(21, 3))
    pred = gt + rng.normal(0, 0.1, gt.shape)
    best = np.sum((procrustes_align(pred, gt) - gt) ** 2)
    for _ in range(1000):
        rot, s, t = random_similarity(rng)
        assert best <= np.sum((s * pred @ rot.T + t - gt) ** 2) + 1e-12


def test_procrustes_excludes_reflection():
    rng = make_rng(3)
    gt = rng.normal(size=(12, 3))
    mirrored = gt * [-1, 1, 1]
    _, rot, _ = procrustes_transform(mirrored, gt)
    assert np.isclose(np.linalg.det(rot), 1.0)


def test_procrustes_rank_deficient():
    line = np.outer(np.arange(5.0), [1.0, 0, 0])
    with pytest.raises(np.linalg.LinAlgError):
        procrustes_align(line, line)
    with pytest.raises(ValueError):
        procrustes_align(np.zeros((2, 3)), np.ones((2, 3)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pa_error_similarity_invariance(seed):
    rng = make_rng(seed)
    gt = rng.normal(size=(21, 3))
    pred = gt + rng.normal(0, 0.05, gt.shape)
    rot, s, t = random_similarity(rng)
    assert abs(pa_position_error(s * pred @ rot.T + t, gt) - pa_position_error(pred, gt)) < 1e-9


def _brute_f(pred, gt, tau_mm):
    tau = tau_mm / 1000
    d = np.array([[np.linalg.norm(p - g) for g in gt] for p in pred])
    prec = np.mean(d.min(axis=1) <= tau)
    rec = np.mean(d.min(axis=0) <= tau)
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


def test_f_score_cases_and_oracle():
    rng = make_rng(4)
    gt = rng.normal(0, 0.02, (12, 3))
    assert f_score(gt, gt, 5.0) == 1.0
    far = gt + [1.0, 0, 0]
    assert f_score(far, gt, 5.0) == 0.0
    for tau in (1.0, 5.0, 15.0, 30.0):
        pred = gt + rng.normal(0, 0.006, gt.shape)
        assert abs(f_score(pred, gt, tau) - _brute_f(pred, gt, tau)) < 1e-12
    with pytest.raises(ValueError):
        f_score(np.zeros((0, 3)), np.zeros((0, 3)), 5.0)


def test_f_score_monotone_in_threshold():
    rng = make_rng(5)
    gt = rng.normal(0, 0.02, (30, 3))
    pred = gt + rng.normal(0, 0.01, gt.shape)
    scores = [f_score(pred, gt, t) for t in np.linspace(0, 60, 31)]
    assert all(a <= b for a, b in zip(scores, scores[1:]))


def test_pck_cases_and_oracle():
    rng = make_rng(6)
    gt = rng.normal(size=(40, 3))
    frac, auc = pck_curve(gt, gt, [0, 10, 20])
    assert frac == [1.0, 1.0, 1.0] and auc == 1.0
    pred = gt + rng.normal(0, 0.01, gt.shape)
    thr = np.linspace(0, 50, 51)
    frac, auc = pck_curve(pred, gt, thr)
    dist = [np.linalg.norm(pred[i] - gt[i]) * 1000 for i in range(40)]
    for t, f in zip(thr, frac):
        assert f == sum(d <= t for d in dist) / 40
    assert all(a <= b for a, b in zip(frac, frac[1:]))
    trap = sum((frac[i] + frac[i + 1]) / 2 for i in range(50)) / 50
    assert np.isclose(auc, trap)
    with pytest.raises(ValueError):
        pck_curve(pred, gt, [])


def test_evaluate_identity_and_similarity():
    rng = make_rng(7)
    gts = [{"joints": rng.normal(0, 0.05, (21, 3)), "vertices": rng.normal(0, 0.05, (30, 3))} for _ in range(3)]
    rep, curves = evaluate_samples(gts, gts)
    d = rep.to_json_dict()
    assert d["j_pe_mm"] == 0 and d["v_pe_mm"] == 0 and d["pa_f5"] == 1.0 and d["pa_f15"] == 1.0
    assert set(json.loads(rep.to_json())) == {"j_pe_mm", "v_pe_mm", "pa_j_pe_mm", "pa_v_pe_mm", "pa_f5",
                                              "pa_f15", "pck_auc", "n_samples"}
    rot, s, t = random_similarity(rng)
    moved = [{k: s * v @ rot.T + t for k, v in g.items()} for g in gts]
    rep2, _ = evaluate_samples(moved, gts)
    assert rep2.pa_j_pe < 1e-9 and rep2.pa_v_pe < 1e-9 and rep2.j_pe > 0 and rep2.v_pe > 0
    assert len(curves["joints"]) == 51
    with pytest.raises(ValueError):
        evaluate_samples(gts[:2], gts)


def test_evaluate_gaussian_noise_matches_analytic_mean():
    rng = make_rng(8)
    sigma_mm = 1.0
    gts = [{"joints": rng.normal(0, 0.05, (21, 3)), "vertices": rng.normal(0, 0.05, (21, 3))}
           for _ in range(100)]
    preds = [{k: v + rng.normal(0, sigma_mm / 1000, v.shape) for k, v in g.items()} for g in gts]
    rep, _ = evaluate_samples(preds, gts)
    expected = sigma_mm * np.sqrt(8 / np.pi)
    # standard error of the mean over 2100 draws of a Maxwell variable
    se = sigma_mm * np.sqrt(3 - 8 / np.pi) / np.sqrt(2100)
    assert abs(rep.j_pe - expected) < 3 * max(se, 0.01 * sigma_mm)
