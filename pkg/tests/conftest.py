import numpy as np
import pytest

from urbanwind.citygen import CityGenConfig, generate_layout, rasterize_hard
from urbanwind.domain import BuildingFootprint, GridSpec, SimConfig


def seeded_scene(seed, n=64, T=28):
    """Generated layout rasterized to an n x n grid, with its simulation config."""
    blocks, sim = generate_layout(CityGenConfig(seed=seed, grid_size=n, T=T))
    return rasterize_hard(blocks, sim.grid), sim


def random_footprint(rng, n=8, p=0.2):
    occ = (rng.random((n, n)) < p).astype(np.uint8)
    occ[:, 0] = occ[:, -1] = 0
    return BuildingFootprint(occ)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return SimConfig(u_in=5.0, grid=GridSpec(8, 8, 80.0), T=3)
