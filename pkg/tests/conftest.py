import numpy as np
import pytest

from app.services.meanfield import critical_coupling
from app.services.spin_algebra import ModelParams


def balanced(N: int, factor: float, omega_c: float = 2.5, kappa: float = 0.5) -> ModelParams:
    """Balanced model with 2ḡ = factor · g_c."""
    base = ModelParams(N=N, omega_a=1.0, omega_c=omega_c, kappa=kappa)
    return ModelParams.balanced(N, 1.0, omega_c, kappa, factor * critical_coupling(base))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def quench_params():
    """N = 8 quench above threshold used by the oracle comparisons."""
    return balanced(8, 1.4)


@pytest.fixture
def bistable_params():
    return ModelParams(N=20, omega_a=1.0, omega_c=1.0, kappa=1.0, g_plus=0.782, g_minus=1.8)


def random_state(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return v / np.linalg.norm(v)


def random_density(rng: np.random.Generator, dim: int, rank: int = 3) -> np.ndarray:
    vectors = [random_state(rng, dim) for _ in range(rank)]
    weights = rng.uniform(size=rank)
    weights /= weights.sum()
    return sum(w * np.outer(v, v.conj()) for w, v in zip(weights, vectors))
