import numpy as np
import pytest

from trigen import scenes as sc


@pytest.fixture(scope="session")
def small_surround():
    """8-view surround three_spheres dataset at 48px (shared; treat read-only)."""
    return sc.make_scene("three_spheres", 8, "surround", 48, seed=1, gt_samples=384)


@pytest.fixture(scope="session")
def small_arc():
    """8-view forward-arc three_spheres dataset at 48px."""
    return sc.make_scene("three_spheres", 8, "forward_arc", 48, seed=2, gt_samples=384)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
