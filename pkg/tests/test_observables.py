import numpy as np
import pytest

from app.services.errors import ModelDomainError
from app.services.exact_solver import JointDensityMatrix, joint_product_state
from app.services.observables import (
    DegenerateMeanSpin,
    atom_field_covariance,
    bipartite_negativity,
    clebsch_gordan,
    quadrature_grid,
    scaled_covariance,
    spin_q_function,
    spin_squeezing,
    split_negativity,
    uniform_grid,
)
from app.services.spin_algebra import SpinState, dicke_state, spin_coherent_state

from tests.conftest import random_density, random_state


def test_q_function_of_top_state_at_poles():
    q = spin_q_function(dicke_state(3, 1.5).projector(), uniform_grid(5, 4))
    np.testing.assert_allclose(q.values[0], 1.0, atol=1e-14)
    np.testing.assert_allclose(q.values[-1], 0.0, atol=1e-14)


def test_q_function_of_maximally_mixed_state_is_flat():
    N = 5
    q = spin_q_function(np.eye(N + 1) / (N + 1), uniform_grid(7, 9))
    np.testing.assert_allclose(q.values, 1 / (N + 1), atol=1e-14)


@pytest.mark.parametrize("N", [1, 4, 9, 20])
def test_quadrature_normalisation_is_exact(rng, N):
    rho = random_density(rng, N + 1)
    assert spin_q_function(rho).normalization(N) == pytest.approx(1.0, abs=1e-8)


def test_uniform_grid_normalisation_is_close(rng):
    N = 6
    q = spin_q_function(random_density(rng, N + 1), uniform_grid())
    assert q.normalization(N) == pytest.approx(1.0, abs=1e-3)


def test_q_function_peaks_at_coherent_direction():
    N = 12
    q = spin_q_function(spin_coherent_state(N, np.pi / 3, np.pi / 2), uniform_grid(13, 8))
    row, col = np.unravel_index(np.argmax(q.values), q.values.shape)
    assert q.theta[row] == pytest.approx(np.pi / 3)
    assert q.phi[col] == pytest.approx(np.pi / 2)
    assert q.values[row, col] == pytest.approx(1.0)


def test_quadrature_grid_sizes():
    grid = quadrature_grid(6)
    assert grid.theta.size == 8
    assert grid.phi.size == 14
    assert grid.cos_weights.sum() == pytest.approx(2.0)


def test_covariance_vanishes_for_product_states(rng):
    joint = joint_product_state(random_state(rng, 4), n_fock=3, photons=1)
    assert atom_field_covariance(joint) == pytest.approx(0.0, abs=1e-14)


def test_covariance_of_entangled_state():
    psi = np.zeros(4, dtype=complex)
    psi[0] = psi[3] = 1 / np.sqrt(2)
    joint = JointDensityMatrix(rho=np.outer(psi, psi.conj()), N=1, n_fock=2)
    assert atom_field_covariance(joint) == pytest.approx(0.25)
    assert scaled_covariance(0.25, 4) == pytest.approx(0.25 / 8)


def test_coherent_states_are_not_squeezed(rng):
    for _ in range(5):
        theta, phi = rng.uniform(0.1, np.pi - 0.1), rng.uniform(0, 2 * np.pi)
        result = spin_squeezing(spin_coherent_state(15, theta, phi))
        assert result.xi2 == pytest.approx(1.0, abs=1e-10)
        assert abs(np.dot(result.e_perp, result.mean_spin)) < 1e-9


def test_one_axis_twisting_squeezes():
    N = 20
    coherent = spin_coherent_state(N, np.pi / 2, 0.0).amplitudes
    m = N / 2 - np.arange(N + 1)
    twisted = SpinState(amplitudes=np.exp(-1j * 0.05 * m**2) * coherent)
    result = spin_squeezing(twisted)
    assert result.xi2 < 1.0
    assert result.mean_spin[0] > 0
    assert abs(result.e_perp[0]) < 1e-9


def test_squeezing_needs_a_mean_spin():
    with pytest.raises(DegenerateMeanSpin):
        spin_squeezing(np.eye(5) / 5)


@pytest.mark.parametrize(("args", "value"), [
    ((0.5, 0.5, 0.5, -0.5, 1, 0), 1 / np.sqrt(2)),
    ((0.5, 0.5, -0.5, 0.5, 0, 0), -1 / np.sqrt(2)),
    ((1, 1, 1, -1, 1, 0), 1 / np.sqrt(2)),
    ((1, 1, -1, 1, 1, 0), -1 / np.sqrt(2)),
    ((1, 1, 0, 0, 1, 0), 0.0),
    ((1, 1, 1, -1, 2, 0), 1 / np.sqrt(6)),
    ((1, 1, 0, 0, 2, 0), np.sqrt(2 / 3)),
    ((1, 1, 1, -1, 0, 0), 1 / np.sqrt(3)),
    ((1, 1, 0, 0, 0, 0), -1 / np.sqrt(3)),
    ((1.5, 1.5, 1.5, 1.5, 3, 3), 1.0),
])
def test_clebsch_gordan_values(args, value):
    assert clebsch_gordan(*args) == pytest.approx(value, abs=1e-14)


def test_clebsch_gordan_selection_rules():
    assert clebsch_gordan(1, 1, 1, 0, 1, 0) == 0.0
    assert clebsch_gordan(1, 1, 1, 1, 3, 2) == 0.0


@pytest.mark.parametrize("args", [(1, 1, 2, 0, 2, 2), (1, 1, 0.5, 0.5, 1, 1), (-1, 1, 0, 0, 0, 0)])
def test_clebsch_gordan_rejects_bad_projections(args):
    with pytest.raises(ModelDomainError):
        clebsch_gordan(*args)


def test_clebsch_gordan_orthogonality():
    j = 3
    ms = np.arange(-j, j + 1)
    for J in range(0, 2 * j + 1):
        for Jp in range(0, 2 * j + 1):
            for M in range(-min(J, Jp), min(J, Jp) + 1):
                total = sum(clebsch_gordan(j, j, m1, M - m1, J, M) * clebsch_gordan(j, j, m1, M - m1, Jp, M)
                            for m1 in ms if abs(M - m1) <= j)
                assert total == pytest.approx(1.0 if J == Jp else 0.0, abs=1e-12)


def test_two_spin_symmetric_state_negativity():
    assert split_negativity(dicke_state(2, 0).projector(), 0.5, 0.5) == pytest.approx(0.5)


def test_stretched_state_is_separable():
    assert bipartite_negativity(dicke_state(8, 4).projector(), 8) == pytest.approx(0.0, abs=1e-12)
    coherent = spin_coherent_state(8, 1.1, 0.3).projector()
    assert bipartite_negativity(coherent, 8) == pytest.approx(0.0, abs=1e-10)


def test_negativity_is_independent_of_transposed_side(rng):
    rho = random_density(rng, 9, rank=2)
    first = split_negativity(rho, 2, 2, transpose_first=True)
    second = split_negativity(rho, 2, 2, transpose_first=False)
    assert first == pytest.approx(second, abs=1e-12)
    unequal = split_negativity(rho, 1.5, 2.5)
    assert unequal == pytest.approx(split_negativity(rho, 1.5, 2.5, transpose_first=True), abs=1e-12)


def test_negativity_needs_equal_groups():
    with pytest.raises(ModelDomainError):
        bipartite_negativity(np.eye(7) / 7, 6)
    with pytest.raises(ModelDomainError):
        split_negativity(np.eye(7) / 7, 1, 1)
