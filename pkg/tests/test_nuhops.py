import dataclasses
import logging

import numpy as np
import pytest

from app.services.ensemble import run_ensemble
from app.services.errors import ModelDomainError
from app.services.exact_solver import IntegratorConfig, evolve_exact_adaptive, joint_observables, reduce_to_spin
from app.services.nuhops import (
    HopsConfig,
    HopsState,
    WindowOperators,
    ensemble_average,
    ensemble_cavity_moments,
    hops_rhs,
    propagate_trajectory,
    reconstruct_cavity_amplitude,
    sample_ou_path,
    trajectory_rng,
    update_memory,
)
from app.services.spin_algebra import ModelParams, build_spin_operators, dicke_state, spin_coherent_state

from tests.conftest import balanced


def _complex_se(samples: np.ndarray) -> float:
    n = samples.size
    return float(np.hypot(samples.real.std(ddof=1), samples.imag.std(ddof=1)) / np.sqrt(n))


@pytest.mark.parametrize("kwargs", [
    {"fock_levels": 1},
    {"fock_tol": 0.0},
    {"window_tol": 1.0},
    {"dt": 0.0},
    {"n_traj": 0},
    {"noise_dt": -1.0},
    {"t_end": 1.0, "snapshot_times": (2.0,)},
])
def test_config_validation(kwargs):
    with pytest.raises(ModelDomainError):
        HopsConfig(**kwargs)


def test_record_grid_and_noise_step():
    cfg = HopsConfig(t_end=1.0, record_dt=0.25, dt=0.02)
    np.testing.assert_allclose(cfg.record_grid, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert cfg.effective_noise_dt == 0.02
    assert HopsConfig(noise_dt=0.005).effective_noise_dt == 0.005


def test_ou_noise_statistics():
    params = ModelParams.balanced(4, 1.0, 2.5, 0.5, 1.2)
    variance = 1.2**2
    t = np.arange(101) * 0.01
    lag = 50
    rng = np.random.default_rng(7)
    paths = np.stack([sample_ou_path(params, t, rng).z_conj.conj() for _ in range(10_000)])

    equal_time = np.abs(paths[:, -1]) ** 2
    assert abs(equal_time.mean() - variance) < 5 * equal_time.std(ddof=1) / np.sqrt(equal_time.size)

    pseudo = paths[:, -1] * paths[:, -1]
    assert abs(pseudo.mean()) < 5 * _complex_se(pseudo)

    tau = lag * 0.01
    lagged = paths[:, lag] * paths[:, 0].conj()
    expected = variance * np.exp(-(1j * 2.5 + 0.5) * tau)
    assert abs(lagged.mean() - expected) < 5 * _complex_se(lagged)


def test_noise_is_keyed_by_seed_and_index():
    params = ModelParams.balanced(4, 1.0, 1.0, 0.5, 1.0)
    t = np.arange(20) * 0.1
    first = sample_ou_path(params, t, trajectory_rng(3, 11)).z_conj
    again = sample_ou_path(params, t, trajectory_rng(3, 11)).z_conj
    other = sample_ou_path(params, t, trajectory_rng(3, 12)).z_conj
    np.testing.assert_array_equal(first, again)
    assert not np.allclose(first, other)


def test_noise_vanishes_without_coupling():
    path = sample_ou_path(ModelParams(N=2, kappa=0.5), np.arange(10) * 0.1, 1)
    np.testing.assert_array_equal(path.z_conj, 0)


def test_noise_grid_must_be_uniform():
    with pytest.raises(ModelDomainError):
        sample_ou_path(ModelParams.balanced(2, 1, 1, 1, 1), np.array([0.0, 0.1, 0.3]), 0)


def test_memory_with_constant_coupling_expectation():
    params = ModelParams.balanced(4, 1.0, 2.0, 0.5, 1.0)
    L = 0.3 + 0.1j
    dt, steps = 0.01, 200
    mu = 0j
    for _ in range(steps):
        mu = update_memory(mu, L, params, dt)
    rate = 1j * params.omega_c + params.kappa
    expected = (2 * params.g_bar) ** 2 * L / rate * (1 - np.exp(-rate * dt * steps))
    assert abs(mu - expected) < 1e-8


def test_memory_stays_zero_without_source():
    params = ModelParams.balanced(4, 1.0, 2.0, 0.5, 1.0)
    assert update_memory(0j, 0j, params, 0.1) == 0


def test_first_hierarchy_level_from_ground_state():
    params = balanced(6, 1.4)
    N = params.N
    phi = np.zeros((N + 1, 4), dtype=complex)
    phi[N, 0] = 1.0
    state = HopsState(phi=phi, lo=0, hi=N)
    d = hops_rhs(state, 0j, params, WindowOperators(params, 0, N))

    expected_vac = np.zeros(N + 1, dtype=complex)
    expected_vac[N] = -1j * params.omega_a * (-N / 2)
    np.testing.assert_allclose(d.phi[:, 0], expected_vac, atol=1e-14)
    assert np.linalg.norm(d.phi[:, 1]) == pytest.approx(params.g_bar)
    np.testing.assert_allclose(d.phi[:, 2:], 0.0)
    assert d.mu == 0


def test_rhs_is_linear_at_fixed_memory(rng):
    params = ModelParams(N=5, omega_a=1.0, omega_c=1.5, kappa=0.4, g_plus=0.5, g_minus=1.2)
    phi = rng.normal(size=(6, 4)) + 1j * rng.normal(size=(6, 4))
    ops = WindowOperators(params, 0, 5)
    z = 0.3 - 0.7j
    base = hops_rhs(HopsState(phi=phi, lo=0, hi=5, mu=0.2 + 0.1j), z, params, ops)
    scaled = hops_rhs(HopsState(phi=2.5j * phi, lo=0, hi=5, mu=0.2 + 0.1j), z, params, ops)
    np.testing.assert_allclose(scaled.phi, 2.5j * base.phi, atol=1e-12)
    assert scaled.mu == pytest.approx(base.mu)


def test_uncoupled_trajectory_precesses():
    params = ModelParams(N=6, omega_a=1.3, omega_c=1.0, kappa=0.5)
    cfg = HopsConfig(t_end=3.0, record_dt=0.1, n_traj=1)
    record = propagate_trajectory(spin_coherent_state(6, 1.0, 0.4), params, cfg, 0)
    s0 = 3.0 * np.sin(1.0) * np.exp(0.4j)
    np.testing.assert_allclose(record.sx + 1j * record.sy, s0 * np.exp(1.3j * record.t), atol=1e-5)
    np.testing.assert_allclose(record.sz, 3.0 * np.cos(1.0), atol=1e-6)
    np.testing.assert_allclose(record.mu, 0.0)
    np.testing.assert_allclose(reconstruct_cavity_amplitude(record, params), 0.0)


def test_trajectory_is_deterministic_per_index(quench_params):
    cfg = HopsConfig(t_end=0.5, record_dt=0.05, base_seed=5)
    spin = spin_coherent_state(quench_params.N, np.pi / 4, np.pi)
    a = propagate_trajectory(spin, quench_params, cfg, 3)
    b = propagate_trajectory(spin, quench_params, cfg, 3)
    c = propagate_trajectory(spin, quench_params, cfg, 4)
    np.testing.assert_array_equal(a.sx, b.sx)
    np.testing.assert_array_equal(a.mu, b.mu)
    assert not np.array_equal(a.sx, c.sx)


def test_window_starts_narrow_for_dicke_state():
    params = balanced(40, 1.4)
    cfg = HopsConfig(t_end=0.1, record_dt=0.05)
    record = propagate_trajectory(dicke_state(40, -20), params, cfg, 0)
    assert record.window_hi[0] == 40
    assert record.window_lo[0] == 40 - 8
    assert np.all(np.diff(record.window_lo) <= 0)


def test_mismatched_atom_number_is_rejected():
    with pytest.raises(ModelDomainError):
        propagate_trajectory(dicke_state(3, 0.5), balanced(4, 1.0), HopsConfig(t_end=0.1), 0)


def test_single_trajectory_density_matrix_is_pure(quench_params):
    cfg = HopsConfig(t_end=0.5, record_dt=0.05, n_traj=1, snapshot_times=(0.5,))
    run = run_ensemble(spin_coherent_state(quench_params.N, np.pi / 4, np.pi), quench_params, cfg)
    rho = run.average.rho[0].rho
    assert np.trace(rho).real == pytest.approx(1.0)
    np.testing.assert_allclose(rho @ rho, rho, atol=1e-12)
    assert np.all(np.isnan(run.average.se["sx"]))


def test_average_warns_on_failures(quench_params, caplog):
    cfg = HopsConfig(t_end=0.1, record_dt=0.05)
    spin = spin_coherent_state(quench_params.N, np.pi / 4, np.pi)
    records = [propagate_trajectory(spin, quench_params, cfg, i) for i in range(2)]
    with caplog.at_level(logging.WARNING, logger="app.services.nuhops"):
        average = ensemble_average(records, n_failed=1)
    assert average.n_failed == 1
    assert "trajectories failed" in caplog.text


def test_average_needs_records():
    with pytest.raises(ModelDomainError):
        ensemble_average([])


def test_results_do_not_depend_on_worker_count(quench_params):
    cfg = HopsConfig(t_end=0.3, record_dt=0.05, n_traj=6, base_seed=11, snapshot_times=(0.3,))
    spin = spin_coherent_state(quench_params.N, np.pi / 4, np.pi)
    serial = run_ensemble(spin, quench_params, cfg, workers=1).average
    parallel = run_ensemble(spin, quench_params, cfg, workers=2).average
    for name in ("sx", "sy", "sz", "vacuum_norm2"):
        np.testing.assert_array_equal(serial.mean[name], parallel.mean[name])
        np.testing.assert_array_equal(serial.se[name], parallel.se[name])
    np.testing.assert_array_equal(serial.rho[0].rho, parallel.rho[0].rho)


def test_cavity_moments_shape(quench_params):
    cfg = HopsConfig(t_end=0.2, record_dt=0.05, n_traj=3)
    run = run_ensemble(spin_coherent_state(quench_params.N, np.pi / 4, np.pi), quench_params, cfg)
    cavity = ensemble_cavity_moments(run.records, quench_params)
    assert cavity.a.shape == cavity.c_af.shape == run.average.t.shape
    assert cavity.a[0] == 0


def _exact_means(params, spin, t):
    """Exact <Sx>, <Sy>, <Sz> and <a> on the times ``t``."""
    states = evolve_exact_adaptive(spin, params, t, IntegratorConfig(verify_step=False))
    ops = build_spin_operators(params.N)
    spin_means = np.array([[np.trace(op.toarray() @ reduce_to_spin(rho).rho).real
                            for op in (ops.Sx, ops.Sy, ops.Sz)] for rho in states])
    cavity = np.array([joint_observables(rho)["a"] for rho in states])
    return spin_means, cavity


def _compare_with_exact(N: int, n_traj: int, t_end: float):
    params = balanced(N, 1.4)
    spin = spin_coherent_state(N, np.pi / 4, np.pi)
    cfg = HopsConfig(t_end=t_end, record_dt=0.05, n_traj=n_traj, base_seed=2024)
    run = run_ensemble(spin, params, cfg, workers=1)
    average = run.average
    spin_means, cavity = _exact_means(params, spin, average.t)
    for k, name in enumerate(("sx", "sy", "sz")):
        allowed = np.maximum(3 * average.se[name], 0.02 * N / 2)
        assert np.all(np.abs(average.mean[name] - spin_means[:, k]) <= allowed), name

    estimate = ensemble_cavity_moments(run.records, params)
    allowed = np.maximum(3 * estimate.a_se, 0.02 * np.sqrt(N))
    assert np.all(np.abs(estimate.a - cavity) <= allowed), "a"


def test_ensemble_tracks_master_equation_small():
    _compare_with_exact(N=4, n_traj=300, t_end=1.0)


@pytest.mark.slow
def test_ensemble_tracks_master_equation_oracle():
    _compare_with_exact(N=8, n_traj=2000, t_end=10.0)


def test_trajectory_converged_under_refinement(quench_params):
    spin = spin_coherent_state(quench_params.N, np.pi / 4, np.pi)
    base = HopsConfig(t_end=1.0, record_dt=0.1, dt=0.01, noise_dt=0.01, base_seed=9)
    reference = propagate_trajectory(spin, quench_params, base, 0)
    j = quench_params.N / 2
    for refined in (
        dataclasses.replace(base, dt=0.005),
        dataclasses.replace(base, fock_levels=2 * base.fock_levels),
        dataclasses.replace(base, window_tol=1e-12),
    ):
        record = propagate_trajectory(spin, quench_params, refined, 0)
        for name in ("sx", "sy", "sz"):
            change = np.abs(getattr(record, name) - getattr(reference, name)).max() / j
            assert change < 1e-4, (refined, name, change)


def test_parity_symmetric_start_keeps_zero_order_parameter():
    params = balanced(4, 1.4)
    cfg = HopsConfig(t_end=2.0, record_dt=0.5, n_traj=300, base_seed=77)
    run = run_ensemble(dicke_state(4, -2), params, cfg, workers=1)
    average = run.average
    assert np.all(np.abs(average.mean["sx"]) <= 3 * average.se["sx"] + 1e-12)
    cavity = ensemble_cavity_moments(run.records, params)
    assert np.all(np.abs(cavity.a) <= 3 * cavity.a_se + 1e-12)
