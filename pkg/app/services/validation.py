"""Oracle acceptance suite run by the ``validate`` subcommand.

The quick suite finishes in well under a minute. ``validate.full = true``
adds the N = 8 trajectory-versus-master-equation comparison at the
configured ensemble size and the convergence-in-N trend.
"""

import logging
from dataclasses import dataclass

import numpy as np

from app.services.cumulant2 import MomentVector, cumulant_rhs, moments_from_joint, moments_from_product_state
from app.services.ensemble import run_ensemble
from app.services.errors import DickeError
from app.services.exact_solver import (
    IntegratorConfig,
    JointDensityMatrix,
    LindbladModel,
    evolve_exact_adaptive,
    joint_product_state,
    reduce_to_spin,
)
from app.services.meanfield import (
    MeanFieldState,
    critical_coupling,
    detect_critical_coupling,
    evolve_meanfield,
    meanfield_rhs,
)
from app.services.nuhops import HopsConfig
from app.services.observables import quadrature_grid, spin_q_function, spin_squeezing, split_negativity
from app.services.run_config import RunConfig
from app.services.runner import meanfield_deviation
from app.services.spin_algebra import ModelParams, build_spin_operators, dicke_state, spin_coherent_state
from app.services.tunneling import rate_ode_full, rate_solution

logger = logging.getLogger(__name__)

# Quench used by the trajectory oracles
ORACLE_OMEGA_C = 2.5
ORACLE_KAPPA = 0.5
ORACLE_COUPLING_GC = 1.4
ORACLE_THETA = np.pi / 4
ORACLE_PHI = np.pi


class ValidationFailure(DickeError):
    def __init__(self, failed: list[str], summary: dict | None = None):
        super().__init__(f"{len(failed)} validation check(s) failed: {', '.join(failed)}")
        self.failed = failed
        self.summary = summary or {}


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float


def _check(name: str, value: float, tolerance: float) -> CheckResult:
    passed = bool(np.isfinite(value) and value <= tolerance)
    log = logger.info if passed else logger.error
    log("%s: %s (value %.3e, tolerance %.1e)", name, "ok" if passed else "FAILED", value, tolerance)
    return CheckResult(name=name, passed=passed, value=float(value), tolerance=float(tolerance))


def oracle_params(N: int) -> ModelParams:
    base = ModelParams(N=N, omega_a=1.0, omega_c=ORACLE_OMEGA_C, kappa=ORACLE_KAPPA)
    return ModelParams.balanced(N, 1.0, ORACLE_OMEGA_C, ORACLE_KAPPA, ORACLE_COUPLING_GC * critical_coupling(base))


def check_spin_identities(N: int = 7) -> CheckResult:
    ops = build_spin_operators(N)
    j = N / 2
    commutator = (ops.Sx @ ops.Sy - ops.Sy @ ops.Sx - 1j * ops.Sz).toarray()
    casimir = (ops.Sx @ ops.Sx + ops.Sy @ ops.Sy + ops.Sz @ ops.Sz).toarray() - j * (j + 1) * np.eye(N + 1)
    return _check("spin commutator and Casimir", max(np.abs(commutator).max(), np.abs(casimir).max()), 1e-12)


def check_critical_coupling(rng: np.random.Generator, n_sets: int) -> CheckResult:
    worst = 0.0
    for _ in range(n_sets):
        params = ModelParams(N=10, omega_a=rng.uniform(0.5, 2.0), omega_c=rng.uniform(0.5, 3.0),
                             kappa=rng.uniform(0.1, 1.0))
        expected = critical_coupling(params)
        worst = max(worst, abs(detect_critical_coupling(params) - expected) / expected)
    return _check("mean-field critical coupling", worst, 0.01)


def check_rate_algebra(rng: np.random.Generator, n_sets: int) -> list[CheckResult]:
    t = np.linspace(0.0, 100.0, 201)
    worst_ode, worst_steady = 0.0, 0.0
    for _ in range(n_sets):
        g_ns, g_sn, g_ss = rng.uniform(0.01, 1.0, size=3)
        full = rate_ode_full(g_ns, g_sn, g_ss, np.array([1.0, 0.0, 0.0]), t)
        p_n, _ = rate_solution(g_ns, g_sn, 1.0, 0.0, t)
        worst_ode = max(worst_ode, float(np.abs(full[:, 0] - p_n).max()))

        generator = np.array([[-2 * g_ns, g_sn], [2 * g_ns, -g_sn]])
        _, _, vh = np.linalg.svd(generator)
        null = vh[-1] / vh[-1].sum()
        worst_steady = max(worst_steady, abs(null[0] - 1.0 / (1.0 + 2.0 * g_ns / g_sn)))
    return [
        _check("rate closed form vs integration", worst_ode, 1e-10),
        _check("rate steady state", worst_steady, 1e-12),
    ]


def check_observables(rng: np.random.Generator) -> list[CheckResult]:
    N = 12
    theta, phi = rng.uniform(0.2, np.pi - 0.2), rng.uniform(0.0, 2 * np.pi)
    coherent = spin_coherent_state(N, theta, phi)
    xi2 = spin_squeezing(coherent).xi2
    norm = spin_q_function(coherent.projector(), quadrature_grid(N)).normalization(N)
    negativity = split_negativity(dicke_state(2, 0).projector(), 0.5, 0.5)
    return [
        _check("coherent-state squeezing", abs(xi2 - 1.0), 1e-10),
        _check("Q-function normalisation", abs(norm - 1.0), 1e-8),
        _check("two-spin negativity", abs(negativity - 0.5), 1e-12),
    ]


def check_cumulant_oracle(N: int = 8) -> list[CheckResult]:
    params = oracle_params(N)
    spin = spin_coherent_state(N, ORACLE_THETA, ORACLE_PHI)
    rho0 = joint_product_state(spin, 8)
    model = LindbladModel(params, rho0.n_fock)
    exact = moments_from_joint(JointDensityMatrix(rho=model.rhs(0.0, rho0.rho), N=N, n_fock=rho0.n_fock))
    closed = cumulant_rhs(moments_from_product_state(spin), params)
    derivative_error = float(np.abs(exact.to_vector() - closed.to_vector()).max())

    state = MeanFieldState.from_angles(ORACLE_THETA, ORACLE_PHI, 0.3 - 0.2j)
    mf = meanfield_rhs(state, params)
    moments = cumulant_rhs(MomentVector.factorised(state, N), params)
    consistency = max(float(np.abs(moments.s / N - mf.m).max()),
                      abs(moments.alpha / np.sqrt(N) - mf.beta))
    return [
        _check("cumulant derivative vs master equation", derivative_error, 1e-6),
        _check("factorised cumulants vs mean field", consistency, 1e-12),
    ]


def _exact_spin_series(params: ModelParams, spin, t_grid: np.ndarray):
    states = evolve_exact_adaptive(spin, params, t_grid, IntegratorConfig(dt=0.01, verify_step=False))
    ops = _spin_ops(params.N)
    means = np.array([[np.trace(op @ reduce_to_spin(rho).rho).real for op in ops] for rho in states])
    return states, means


def _spin_ops(N: int):
    ops = build_spin_operators(N)
    return ops.Sx.toarray(), ops.Sy.toarray(), ops.Sz.toarray()


def check_hops_vs_exact(N: int, n_traj: int, t_end: float, seed: int, workers: int,
                        trace_time: float | None = None) -> list[CheckResult]:
    params = oracle_params(N)
    spin = spin_coherent_state(N, ORACLE_THETA, ORACLE_PHI)
    snapshots = (trace_time,) if trace_time is not None else ()
    cfg = HopsConfig(t_end=t_end, record_dt=0.05, n_traj=n_traj, base_seed=seed, snapshot_times=snapshots)
    average = run_ensemble(spin, params, cfg, workers=workers).average
    states, exact = _exact_spin_series(params, spin, average.t)

    worst = 0.0
    for k, name in enumerate(("sx", "sy", "sz")):
        allowed = np.maximum(3.0 * average.se[name], 0.02 * N / 2)
        worst = max(worst, float(np.max(np.abs(average.mean[name] - exact[:, k]) / allowed)))
    results = [_check(f"nuHOPS vs exact spin means (N={N}, {n_traj} trajectories)", worst, 1.0)]

    if trace_time is not None:
        index = int(np.argmin(np.abs(average.t - trace_time)))
        diff = average.rho[0].rho - reduce_to_spin(states[index]).rho
        distance = 0.5 * float(np.abs(np.linalg.eigvalsh(0.5 * (diff + diff.conj().T))).sum())
        results.append(_check(f"reduced-state trace distance at t={trace_time}", distance, 0.05))
    return results


def check_convergence_in_n(n_traj: int, seed: int, workers: int) -> CheckResult:
    deviations = []
    for N in (25, 100, 400):
        params = oracle_params(N)
        cfg = HopsConfig(t_end=10.0, record_dt=0.05, n_traj=n_traj, base_seed=seed)
        average = run_ensemble(spin_coherent_state(N, ORACLE_THETA, ORACLE_PHI), params, cfg,
                               workers=workers).average
        trajectory = evolve_meanfield(MeanFieldState.from_angles(ORACLE_THETA, ORACLE_PHI), params, average.t)
        means = np.stack([average.mean["sx"], average.mean["sy"], average.mean["sz"]], axis=1)
        deviations.append(meanfield_deviation(average.t, means, N, trajectory))
    logger.info("Mean-field deviation for N=25, 100, 400: %s", ", ".join(f"{d:.4f}" for d in deviations))
    increases = max(deviations[1] - deviations[0], deviations[2] - deviations[1], 0.0)
    return _check("deviation from mean field decreases with N", increases, 0.0)


def run_suite(cfg: RunConfig, workers: int = 1) -> list[CheckResult]:
    """Run every check and return the results in a fixed order."""
    rng = np.random.default_rng(cfg.seed)
    full = cfg.validate_full
    results = [check_spin_identities(), check_critical_coupling(rng, 10 if full else 3)]
    results += check_rate_algebra(rng, 100 if full else 20)
    results += check_observables(rng)
    results += check_cumulant_oracle()
    if full:
        results += check_hops_vs_exact(8, cfg.validate_n_traj, 10.0, cfg.seed, workers, trace_time=7.5)
        results.append(check_convergence_in_n(max(20, cfg.validate_n_traj // 20), cfg.seed, workers))
    else:
        results += check_hops_vs_exact(4, 200, 2.0, cfg.seed, workers)
    failed = sum(not r.passed for r in results)
    logger.info("Validation: %d/%d checks passed", len(results) - failed, len(results))
    return results
