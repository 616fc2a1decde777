import numpy as np
import pytest

from hdg_audit.fields import HybridSpace
from hdg_audit.mesh import build_structured


def pytest_configure(config):
    config.addinivalue_line("markers", "integration: refinement sweeps that take more than a few seconds")


@pytest.fixture
def mesh2():
    """Unit square split into 2 x 2 squares (8 triangles)."""
    return build_structured(2)


@pytest.fixture
def mesh4():
    return build_structured(4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_space():
    """Factory for hybrid spaces on a structured mesh."""
    def factory(k: int = 1, n: int = 2, tag_rule: str = "all-dirichlet") -> HybridSpace:
        return HybridSpace(build_structured(n, tag_rule), k)
    return factory
