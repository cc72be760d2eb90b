import numpy as np
import pytest

from alflow.geometry import BifurcationParams, generate_bifurcation
from alflow.oracle import label_shape


@pytest.fixture(scope="session")
def small_bifurcation():
    params = BifurcationParams.with_murray(
        2e-3, 0.8, parent_length=8e-3, child_lengths=(6e-3, 5e-3),
        child_angles=(0.5, 0.7), seed=3, n_interior=384, n_wall=192, n_cap=24)
    return generate_bifurcation(params, shape_id="bif-small")


@pytest.fixture(scope="session")
def small_labels(small_bifurcation):
    return label_shape(small_bifurcation)


@pytest.fixture(scope="session")
def straight_tube():
    params = BifurcationParams.straight(2e-3, 1e-2, seed=1, n_interior=2048, n_wall=1024, n_cap=64)
    return generate_bifurcation(params, shape_id="tube")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
