from __future__ import annotations

import numpy as np

from handrefine.gradcheck import CHECKS, check_input, check_param_groups, jitter_biases, run_checks
from handrefine.layers import Linear
from handrefine.numeric import make_rng


def test_every_check_passes():
    for r in run_checks(seed=0):
        assert r.passed, (r.name, r.report.max_rel_error, r.tolerance)
        assert r.report.n_checked > 0


def test_names_filter():
    assert [r.name for r in run_checks(names=["rodrigues"])] == ["rodrigues"]
    assert "end_to_end" in CHECKS and CHECKS["end_to_end"][1] > CHECKS["rodrigues"][1]


def test_detects_wrong_gradient():
    rng = make_rng(0)
    rep = check_input(lambda x: (float(np.sum(x ** 3)), 2.0 * x ** 2), rng.normal(size=5), rng)
    assert rep.max_rel_error > 0.1


def test_jitter_biases_only_touches_vectors():
    layer = Linear(make_rng(1), 3, 2)
    w = layer.params["weight"].copy()
    jitter_biases(layer, make_rng(2))
    assert np.array_equal(layer.params["weight"], w)
    assert np.all(layer.params["bias"] != 0)


def test_group_check_detects_wrong_gradient():
    layer = Linear(make_rng(3), 4, 2)
    x = make_rng(4).normal(size=(3, 4))

    def run(scale):
        y, cache = layer.forward(x)
        layer.backward(np.ones_like(y) * scale, cache)
        return float(np.sum(y))

    assert max(r.max_rel_error for r in check_param_groups(layer, lambda: run(1.0), make_rng(5)).values()) < 1e-8
    assert max(r.max_rel_error for r in check_param_groups(layer, lambda: run(1.1), make_rng(5)).values()) > 0.05
