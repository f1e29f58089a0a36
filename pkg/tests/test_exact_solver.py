import numpy as np
import pytest

from app.services.errors import ModelDomainError
from app.services.exact_solver import (
    FockTruncationExceeded,
    IntegratorConfig,
    JointDensityMatrix,
    LindbladModel,
    NoConvergence,
    StepSizeTooLarge,
    build_hamiltonian,
    evolve_exact,
    evolve_exact_adaptive,
    joint_observables,
    joint_product_state,
    reduce_to_spin,
    steady_state,
)
from app.services.spin_algebra import ModelParams, build_spin_operators, dicke_state, spin_coherent_state

from tests.conftest import random_density


def _bell_state() -> JointDensityMatrix:
    # (|↑,0> + |↓,1>)/√2 with spin-major ordering, n_fock = 2
    psi = np.zeros(4, dtype=complex)
    psi[0] = psi[3] = 1 / np.sqrt(2)
    return JointDensityMatrix(rho=np.outer(psi, psi.conj()), N=1, n_fock=2)


def test_counter_rotating_matrix_element():
    H = build_hamiltonian(ModelParams(N=1, omega_a=0.0, omega_c=0.0, g_minus=1.0), n_fock=2).toarray()
    # <↑,0| H |↓,1> with index = spin * n_fock + photons
    assert H[0, 3] == pytest.approx(1.0)
    assert H[1, 2] == pytest.approx(0.0)


def test_hamiltonian_hermitian_and_balanced_form():
    params = ModelParams.balanced(3, 1.2, 0.7, 0.0, 1.6)
    n_fock = 5
    H = build_hamiltonian(params, n_fock).toarray()
    np.testing.assert_allclose(H, H.conj().T, atol=1e-14)

    spins = build_spin_operators(3)
    a = np.diag(np.sqrt(np.arange(1, n_fock)), 1)
    q = a + a.T
    expected = (
        1.2 * np.kron(spins.Sz.toarray(), np.eye(n_fock))
        + 1.6 / np.sqrt(3) * np.kron(spins.Sx.toarray(), q)
        + 0.7 * np.kron(np.eye(4), a.T @ a)
    )
    np.testing.assert_allclose(H, expected, atol=1e-14)


def test_hamiltonian_rejects_tiny_truncation():
    with pytest.raises(ModelDomainError):
        build_hamiltonian(ModelParams(N=2), n_fock=1)


def test_decoupled_photon_decays_exponentially():
    params = ModelParams(N=2, omega_a=1.0, omega_c=2.0, kappa=0.3)
    rho0 = joint_product_state(dicke_state(2, 0), n_fock=4, photons=1)
    t = np.linspace(0.0, 2.0, 21)
    states = evolve_exact(rho0, params, t)
    n = np.array([joint_observables(rho)["n"] for rho in states])
    np.testing.assert_allclose(n, np.exp(-2 * 0.3 * t), atol=1e-8)


def test_closed_system_preserves_purity_and_trace():
    params = ModelParams.balanced(2, 1.0, 1.0, 0.0, 0.3)
    rho0 = joint_product_state(spin_coherent_state(2, 1.0, 0.5), n_fock=10)
    states = evolve_exact(rho0, params, np.linspace(0.0, 1.0, 11))
    for rho in states:
        assert abs(np.trace(rho.rho) - 1.0) < 1e-10
        assert abs(np.trace(rho.rho @ rho.rho) - 1.0) < 1e-9


def test_symmetric_initial_state_keeps_parity():
    params = ModelParams.balanced(2, 1.0, 1.0, 0.5, 1.0)
    states = evolve_exact(joint_product_state(dicke_state(2, -1), n_fock=12), params, np.linspace(0.0, 1.0, 6))
    for rho in states:
        obs = joint_observables(rho)
        assert abs(obs["sx"]) < 1e-10
        assert abs(obs["sy"]) < 1e-10
        assert abs(obs["a"]) < 1e-10


def test_lindblad_rhs_is_traceless_and_hermitian(rng):
    model = LindbladModel(ModelParams(N=2, kappa=0.4, g_plus=0.3, g_minus=0.8), n_fock=4)
    rho = random_density(rng, 12)
    drho = model.rhs(0.0, rho)
    assert abs(np.trace(drho)) < 1e-12
    np.testing.assert_allclose(drho, drho.conj().T, atol=1e-12)


def test_reduce_bell_like_state_gives_maximally_mixed_spin():
    np.testing.assert_allclose(reduce_to_spin(_bell_state()).rho, 0.5 * np.eye(2), atol=1e-15)


def test_joint_observables_of_bell_like_state():
    obs = joint_observables(_bell_state())
    assert obs["sx"] == pytest.approx(0.0)
    assert obs["a"] == pytest.approx(0.0)
    assert obs["n"] == pytest.approx(0.5)
    assert obs["c_af"] == pytest.approx(0.25)


def test_reduce_product_state_returns_spin_factor(rng):
    spin = random_density(rng, 4)
    rho_c = np.diag([0.5, 0.3, 0.2]).astype(complex)
    joint = JointDensityMatrix(rho=np.kron(spin, rho_c), N=3, n_fock=3)
    np.testing.assert_allclose(reduce_to_spin(joint).rho, spin, atol=1e-14)


def test_small_truncation_is_reported():
    params = ModelParams.balanced(2, 1.0, 1.0, 0.0, 2.0)
    with pytest.raises(FockTruncationExceeded) as excinfo:
        evolve_exact(joint_product_state(dicke_state(2, -1), n_fock=2), params, np.linspace(0.0, 1.0, 11))
    assert excinfo.value.n_fock == 2
    assert excinfo.value.top_population > 1e-8


def test_adaptive_truncation_doubles_until_converged():
    params = ModelParams.balanced(2, 1.0, 1.0, 0.5, 2.0)
    cfg = IntegratorConfig(initial_fock=2, max_fock=64)
    states = evolve_exact_adaptive(dicke_state(2, -1), params, np.linspace(0.0, 1.0, 11), cfg)
    assert states[0].n_fock > 2
    assert abs(np.trace(states[-1].rho) - 1.0) < 1e-8


def test_coarse_step_is_rejected():
    params = ModelParams(N=1, omega_a=1.0, omega_c=1.0, kappa=0.5)
    rho0 = joint_product_state(dicke_state(1, -0.5), n_fock=4, photons=1)
    with pytest.raises(StepSizeTooLarge):
        evolve_exact(rho0, params, np.linspace(0.0, 3.0, 11), IntegratorConfig(dt=0.3))


def test_time_grid_must_start_at_zero():
    params = ModelParams(N=1)
    with pytest.raises(ModelDomainError):
        evolve_exact(joint_product_state(dicke_state(1, 0.5), 2), params, np.array([0.5, 1.0]))


def test_steady_state_of_decoupled_model_is_ground_state():
    params = ModelParams(N=2, omega_a=1.0, omega_c=1.0, kappa=1.0)
    rho = steady_state(params, n_fock=3).rho
    expected = np.zeros(9)
    expected[6] = 1.0  # |j,-j> ⊗ |0>
    np.testing.assert_allclose(np.diag(rho).real, expected, atol=1e-12)


def test_steady_state_needs_dissipation():
    with pytest.raises(ModelDomainError):
        steady_state(ModelParams(N=2, kappa=0.0), n_fock=3)


def test_steady_state_reports_exhausted_horizon():
    params = ModelParams.balanced(2, 1.0, 1.0, 0.05, 0.5)
    cfg = IntegratorConfig(steady_horizon=1.0)
    with pytest.raises(NoConvergence) as excinfo:
        steady_state(params, n_fock=8, tol=1e-12, integrator_cfg=cfg)
    assert excinfo.value.residual > 1e-12
    assert excinfo.value.partial.n_fock == 8
