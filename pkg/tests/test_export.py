from __future__ import annotations

import numpy as np
import pytest

from handrefine.export import format_obj, read_obj, write_obj
from handrefine.mano import make_toy_model
from handrefine.numeric import make_rng

FIXTURE = b"v 0.000000 0.000000 0.000000\nv 1.000000 0.000000 0.000000\nv 0.000000 1.000000 0.000000\nf 1 2 3\n"


def test_fixture_bytes(tmp_path):
    write_obj([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], tmp_path / "t.obj")
    assert (tmp_path / "t.obj").read_bytes() == FIXTURE


def test_negative_zero_prints_unsigned():
    assert format_obj([[-0.0, 0.0, 0.0]], np.zeros((0, 3), int)) == "v 0.000000 0.000000 0.000000\n"


def test_round_trip(tmp_path):
    m = make_toy_model(make_rng(0), 20, 4)
    write_obj(m.template, m.faces, tmp_path / "m.obj")
    v, f = read_obj(tmp_path / "m.obj")
    assert np.abs(v - m.template).max() <= 5e-7
    assert np.array_equal(f, m.faces)


@pytest.mark.parametrize("verts, faces", [
    (np.zeros((3, 2)), [[0, 1, 2]]),
    ([[0, 0, 0], [1, 0, 0], [np.nan, 0, 0]], [[0, 1, 2]]),
    (np.zeros((3, 3)), [[0, 1, 3]]),
    (np.zeros((3, 3)), [[0, 1]]),
])
def test_invalid_input(verts, faces):
    with pytest.raises(ValueError):
        format_obj(verts, faces)
