import numpy as np
import pytest

from nfreg import shapes

# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def blob200():
    """Asymmetric closed mesh with 200 vertices."""
    return shapes.blob(11, 18)


@pytest.fixture(scope="session")
def blob300():
    return shapes.blob(16, 20)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def permuted_copy(mesh, rng):
    """Same surface with shuffled vertex order; returns (copy, p2p) with
    ``copy.vertices[j] == mesh.vertices[p2p[j]]``."""
    perm = rng.permutation(mesh.n_vertices)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    from nfreg.geometry import Mesh

    return Mesh(mesh.vertices[perm], inv[mesh.faces]), perm
