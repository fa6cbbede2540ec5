import numpy as np
import pytest

from gmreskit.harness import gen_convdiff, gen_spectrum


@pytest.fixture(scope="session")
def convdiff100():
    """Nonsymmetric 100x100 convection-diffusion operator (10x10 grid)."""
    return gen_convdiff(10, 10, peclet=10.0)


@pytest.fixture(scope="session")
def rhs100():
    return np.random.default_rng(100).standard_normal(100)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)


def random_spd_shifted(rng, n, shift=3.0):
    """Well-conditioned nonsymmetric test matrix with PD symmetric part."""
    return rng.standard_normal((n, n)) / np.sqrt(n) + shift * np.eye(n)


@pytest.fixture(scope="session")
def kappa1e6_problem():
    """Engineered symmetric operator with condition number 1e6."""
    eigs = np.logspace(0, 6, 60)
    return gen_spectrum(eigs, seed=77)
