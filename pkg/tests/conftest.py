import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from egp.manifolds import Grassmann, PlanarShape, Spd, Sphere, Stiefel, sample_uniform

settings.register_profile(
    "egp", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("egp")

ALL_KINDS = [Sphere(2), Sphere(4), PlanarShape(5), Spd(3), Grassmann(6, 2), Stiefel(5, 3)]


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def sample(kind, n, seed=0):
    g = np.random.default_rng(seed)
    return [sample_uniform(kind, g) for _ in range(n)]


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
