import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from geometry import GeoPoint, Projection, Trajectory  # noqa: E402
from gmm import EmConfig  # noqa: E402
from processor import SyntheticCitySpec, synth_city  # noqa: E402

PORTO = GeoPoint(-8.6110, 41.1456)


@pytest.fixture
def projection():
    return Projection(PORTO)


@pytest.fixture
def make_trajectory(projection):
    """Fabrique une trajectoire à partir de positions planes (mètres)."""
    def _make(xy, trip_id="t", start=1_372_636_800.0, step=15.0, hour=0, weekday=1):
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        return Trajectory(
            id=trip_id,
            xy=xy,
            times=start + step * np.arange(len(xy)),
            lonlat=projection.unproject_many(xy),
            start_hour=hour,
            start_weekday=weekday,
        )
    return _make


@pytest.fixture
def random_trajectories(make_trajectory):
    """Générateur de trajectoires aléatoires (marches de 2 à 8 points)."""
    def _make(count, seed=0, min_points=2, max_points=8, scale=500.0):
        rng = np.random.default_rng(seed)
        out = []
        for i in range(count):
            n = int(rng.integers(min_points, max_points + 1))
            xy = np.cumsum(rng.normal(0.0, scale, size=(n, 2)), axis=0)
            out.append(make_trajectory(xy, trip_id=f"r{i}"))
        return out
    return _make


@pytest.fixture
def fast_em():
    return EmConfig(max_iter=100, tol=1e-5, n_restarts=2, seed=0)


@pytest.fixture(scope="session")
def small_city():
    """Ville synthétique réduite : 3 flux x 20 trajets, pas de 100 m."""
    spec = SyntheticCitySpec(K=3, per_flow=20, step_m=100.0, noise_m=20.0, seed=1)
    trajectories, labels = synth_city(spec)
    return spec, trajectories, labels
