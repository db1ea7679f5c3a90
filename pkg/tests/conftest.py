from __future__ import annotations

import numpy as np
import pytest

from handrefine.mano import ManoModel, make_toy_model
from handrefine.numeric import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def toy_model():
    return make_toy_model(make_rng(1), 12, 3)


@pytest.fixture
def toy_model_8():
    return make_toy_model(make_rng(5), 40, 8)


def hand_model(template, skin_weights, parents, joint_regressor=None, faces=None, n_shape=2,
               pose_basis=None, shape_basis=None) -> ManoModel:
    """Small hand-built model for rigid-motion and skinning oracles."""
    template = np.asarray(template, dtype=np.float64)
    v = template.shape[0]
    k = len(parents)
    if joint_regressor is None:
        joint_regressor = np.zeros((k, v))
        joint_regressor[np.arange(k), np.arange(k) % v] = 1.0
    return ManoModel(
        template=template,
        shape_basis=np.zeros((n_shape, v, 3)) if shape_basis is None else shape_basis,
        pose_basis=np.zeros((9 * (k - 1), v, 3)) if pose_basis is None else pose_basis,
        joint_regressor=np.asarray(joint_regressor, dtype=np.float64),
        skin_weights=np.asarray(skin_weights, dtype=np.float64),
        parents=parents,
        faces=np.array([[0, 1, 2]]) if faces is None else faces,
        fingertip_ids=np.zeros(5, dtype=np.int64),
        tip_joints=np.full(5, k - 1),
    )
