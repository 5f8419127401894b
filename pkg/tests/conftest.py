import numpy as np
import pytest

from f4flow.models import BaseModelSpec, build_base
from f4flow.pipeline import DatasetRecipe, build_patches
from f4flow.volume import FlowSample, FluidMask, ScalarField, VectorField, VolumeGrid


@pytest.fixture(scope="session")
def small_patches():
    """Two families, three models each, one frame: a few dozen patches."""
    recipe = DatasetRecipe(families=("tube-jet", "cavity-vortex"), n_models=3, n_frames=1, stride=12, seed=11)
    return build_patches(recipe)


@pytest.fixture
def tiny_model():
    return build_base(BaseModelSpec(channels=4, n_blocks_low=1, n_blocks_high=1, seed=5))


def make_sample(n=8, venc=100.0, seed=0, compartment="aortic"):
    rng = np.random.default_rng(seed)
    grid = VolumeGrid(n, n, n, 1.5)
    vel = rng.uniform(-0.5, 0.5, (3, n, n, n)) * venc
    mask = rng.random((n, n, n)) < 0.4
    mag = np.where(mask, 1.0, 0.05)
    return FlowSample(ScalarField(grid, mag), VectorField.from_array(grid, vel), FluidMask(grid, mask), venc,
                      compartment)
