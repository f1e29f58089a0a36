"""Numerically exact propagation of the spin ⊗ cavity master equation.

    dρ/dt = −i[H, ρ] + κ(2aρa† − {a†a, ρ})

The joint space is ordered spin-major (index = spin_index · n_fock + photon
number). Propagation works with matrix-matrix products against the sparse
H and a only; the Liouvillian superoperator is never formed, so memory stays
O(dim²). This is the oracle every other solver is checked against.
"""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from app.services.errors import ModelDomainError, NumericalError
from app.services.spin_algebra import ModelParams, SpinState, build_spin_operators
from app.utils.integrators import propagate_on_grid, rk4_step

logger = logging.getLogger(__name__)


class FockTruncationExceeded(NumericalError):
    """Raised when the highest kept photon level carries too much population."""

    def __init__(self, n_fock: int, top_population: float):
        super().__init__(
            f"top Fock level population {top_population:.3e} exceeds tolerance at n_fock={n_fock}"
        )
        self.n_fock = n_fock
        self.top_population = top_population


class StepSizeTooLarge(NumericalError):
    """Raised when halving the step changes a tracked observable by more than the tolerance."""


class NoConvergence(NumericalError):
    """Raised when the steady-state search exhausts its horizon.

    The last state and its residual are attached for diagnostics.
    """

    def __init__(self, message: str, partial: "JointDensityMatrix", residual: float):
        super().__init__(message)
        self.partial = partial
        self.residual = residual


@dataclass(frozen=True, eq=False)
class JointDensityMatrix:
    rho: np.ndarray
    N: int
    n_fock: int

    @property
    def dimension(self) -> int:
        return (self.N + 1) * self.n_fock


@dataclass(frozen=True, eq=False)
class SpinDensityMatrix:
    rho: np.ndarray

    @property
    def N(self) -> int:
        return self.rho.shape[0] - 1


@dataclass(frozen=True)
class IntegratorConfig:
    """Fixed-step RK4 settings for the density-matrix propagator."""

    dt: float = 0.01
    verify_step: bool = True
    step_tolerance: float = 1e-6
    fock_tolerance: float = 1e-8
    initial_fock: int = 16
    max_fock: int = 128
    steady_horizon: float = 400.0
    check_interval: float = 1.0


class JointOperators:
    """Spin and cavity operators lifted to the joint space."""

    def __init__(self, N: int, n_fock: int):
        if n_fock < 2:
            raise ModelDomainError(f"n_fock must be >= 2, got {n_fock}")
        self.N = N
        self.n_fock = n_fock
        spins = build_spin_operators(N)
        eye_s = sp.identity(N + 1, dtype=complex, format="csr")
        eye_c = sp.identity(n_fock, dtype=complex, format="csr")
        a = cavity_annihilation(n_fock)

        self.a = sp.kron(eye_s, a, format="csr")
        self.adag = self.a.conj().T.tocsr()
        self.n = (self.adag @ self.a).tocsr()
        self.Sx = sp.kron(spins.Sx, eye_c, format="csr")
        self.Sy = sp.kron(spins.Sy, eye_c, format="csr")
        self.Sz = sp.kron(spins.Sz, eye_c, format="csr")

    @cached_property
    def top_level_mask(self) -> np.ndarray:
        idx = np.arange((self.N + 1) * self.n_fock)
        return idx % self.n_fock == self.n_fock - 1

    def top_population(self, rho: np.ndarray) -> float:
        return float(np.real(np.diagonal(rho)[self.top_level_mask]).sum())


class LindbladModel(JointOperators):
    """Joint operators plus the Hamiltonian of one parameter set."""

    def __init__(self, params: ModelParams, n_fock: int):
        super().__init__(params.N, n_fock)
        self.params = params
        self.H = build_hamiltonian(params, n_fock)

    def rhs(self, _t: float, rho: np.ndarray) -> np.ndarray:
        return lindblad_rhs(rho, self.H, self.a, self.n, self.params.kappa)


def cavity_annihilation(n_fock: int) -> sp.csr_matrix:
    """Truncated annihilation operator on photon numbers 0 ... n_fock-1."""
    return sp.diags(np.sqrt(np.arange(1, n_fock)).astype(complex), offsets=1, format="csr")


def build_hamiltonian(params: ModelParams, n_fock: int) -> sp.csr_matrix:
    """H = ω_a Sz⊗1 + (1/√N)(g₋ S⁻⊗a† + g₊ S⁺⊗a† + h.c.) + ω_c 1⊗a†a.

    Raises:
        ModelDomainError: If ``n_fock < 2``.
    """
    if n_fock < 2:
        raise ModelDomainError(f"n_fock must be >= 2, got {n_fock}")
    spins = build_spin_operators(params)
    a = cavity_annihilation(n_fock)
    adag = a.conj().T.tocsr()
    eye_s = sp.identity(params.N + 1, dtype=complex, format="csr")
    eye_c = sp.identity(n_fock, dtype=complex, format="csr")

    coupling = (params.g_minus * sp.kron(spins.Sm, adag) + params.g_plus * sp.kron(spins.Sp, adag))
    coupling = coupling + coupling.conj().T
    H = (
        params.omega_a * sp.kron(spins.Sz, eye_c)
        + coupling / np.sqrt(params.N)
        + params.omega_c * sp.kron(eye_s, adag @ a)
    )
    return H.tocsr()


def _times_right(rho: np.ndarray, op: sp.spmatrix) -> np.ndarray:
    """rho @ op with the sparse factor on the left of the product."""
    return (op.T @ rho.T).T


def lindblad_rhs(rho: np.ndarray, H: sp.spmatrix, a: sp.spmatrix, n: sp.spmatrix, kappa: float) -> np.ndarray:
    """−i[H, ρ] + κ(2aρa† − a†aρ − ρa†a)."""
    out = -1j * (H @ rho - _times_right(rho, H))
    if kappa:
        a_rho = a @ rho
        out += kappa * (2.0 * _times_right(a_rho, a.conj().T) - n @ rho - _times_right(rho, n))
    return out


def joint_product_state(spin: SpinState | np.ndarray, n_fock: int, photons: int = 0) -> JointDensityMatrix:
    """ρ_spin ⊗ |photons><photons|."""
    if isinstance(spin, SpinState):
        rho_s = spin.projector()
    else:
        rho_s = np.asarray(spin, dtype=complex)
        if rho_s.ndim == 1:
            rho_s = np.outer(rho_s, rho_s.conj())
    if not 0 <= photons < n_fock:
        raise ModelDomainError(f"photon number {photons} outside truncation {n_fock}")
    rho_c = np.zeros((n_fock, n_fock), dtype=complex)
    rho_c[photons, photons] = 1.0
    return JointDensityMatrix(rho=np.kron(rho_s, rho_c), N=rho_s.shape[0] - 1, n_fock=n_fock)


def _check_time_grid(t_grid: np.ndarray) -> np.ndarray:
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size < 1 or t_grid[0] != 0.0:
        raise ModelDomainError("time grid must be one-dimensional and start at 0")
    if np.any(np.diff(t_grid) <= 0):
        raise ModelDomainError("time grid must be strictly increasing")
    return t_grid


def _run(ops: LindbladModel, rho0: np.ndarray, t_grid: np.ndarray, dt: float) -> list[np.ndarray]:
    return propagate_on_grid(ops.rhs, rho0, t_grid, dt, observe=np.copy)


def evolve_exact(
    rho0: JointDensityMatrix,
    params: ModelParams,
    t_grid: np.ndarray,
    integrator_cfg: IntegratorConfig | None = None,
) -> list[JointDensityMatrix]:
    """Propagate the joint state and return it on every time of ``t_grid``.

    Args:
        rho0: Initial joint state (spin-major ordering).
        params: Model parameters.
        t_grid: Strictly increasing times starting at 0.
        integrator_cfg: Step length and convergence checks.

    Raises:
        FockTruncationExceeded: If the top photon level gets populated above the tolerance.
        StepSizeTooLarge: If step halving changes ⟨Sz⟩ or ⟨a†a⟩ by more than the tolerance.
    """
    cfg = integrator_cfg or IntegratorConfig()
    t_grid = _check_time_grid(t_grid)
    if rho0.N != params.N:
        raise ModelDomainError(f"initial state has N={rho0.N}, params have N={params.N}")
    ops = LindbladModel(params, rho0.n_fock)

    logger.debug("Exact propagation: N=%d, n_fock=%d, dim=%d, dt=%g, %d output times",
                 params.N, rho0.n_fock, rho0.dimension, cfg.dt, t_grid.size)
    states = _run(ops, rho0.rho, t_grid, cfg.dt)

    top = max(ops.top_population(rho) for rho in states)
    if top > cfg.fock_tolerance:
        raise FockTruncationExceeded(rho0.n_fock, top)

    if cfg.verify_step:
        fine = _run(ops, rho0.rho, t_grid, 0.5 * cfg.dt)
        tracked = (ops.Sz, ops.n)
        worst = 0.0
        for coarse_rho, fine_rho in zip(states, fine):
            for op in tracked:
                diff = abs(np.trace(op @ coarse_rho) - np.trace(op @ fine_rho))
                worst = max(worst, diff)
        if worst > cfg.step_tolerance:
            raise StepSizeTooLarge(
                f"halving dt={cfg.dt} changed a tracked observable by {worst:.3e} "
                f"(tolerance {cfg.step_tolerance:.1e})"
            )
        states = fine

    return [JointDensityMatrix(rho=rho, N=params.N, n_fock=rho0.n_fock) for rho in states]


def evolve_exact_adaptive(
    spin0: SpinState | np.ndarray,
    params: ModelParams,
    t_grid: np.ndarray,
    integrator_cfg: IntegratorConfig | None = None,
) -> list[JointDensityMatrix]:
    """Evolve ``spin0 ⊗ |0><0|`` doubling the Fock truncation until the top level stays empty."""
    cfg = integrator_cfg or IntegratorConfig()
    n_fock = cfg.initial_fock
    while True:
        try:
            return evolve_exact(joint_product_state(spin0, n_fock), params, t_grid, cfg)
        except FockTruncationExceeded as e:
            if 2 * n_fock > cfg.max_fock:
                raise
            logger.info("Fock truncation %d too small (top population %.2e), doubling",
                        n_fock, e.top_population)
            n_fock *= 2


def reduce_to_spin(rho_tot: JointDensityMatrix) -> SpinDensityMatrix:
    """Partial trace over the cavity."""
    d = rho_tot.N + 1
    blocks = rho_tot.rho.reshape(d, rho_tot.n_fock, d, rho_tot.n_fock)
    return SpinDensityMatrix(rho=np.einsum("iaja->ij", blocks))


def _trace_norm(matrix: np.ndarray) -> float:
    hermitian = 0.5 * (matrix + matrix.conj().T)
    return float(np.abs(np.linalg.eigvalsh(hermitian)).sum())


def steady_state(
    params: ModelParams,
    n_fock: int,
    tol: float = 1e-8,
    integrator_cfg: IntegratorConfig | None = None,
) -> JointDensityMatrix:
    """Stationary joint state by long-time propagation from |j,−j>⊗|0>.

    Stops once the trace norm of dρ/dt drops below ``tol``.

    Raises:
        ModelDomainError: If κ = 0 (no dissipation, no attractor).
        NoConvergence: If the horizon is exhausted; the last state is attached.
    """
    if params.kappa <= 0:
        raise ModelDomainError("steady state requires kappa > 0")
    cfg = integrator_cfg or IntegratorConfig()
    ops = LindbladModel(params, n_fock)

    ground = np.zeros(params.N + 1, dtype=complex)
    ground[-1] = 1.0
    rho = joint_product_state(ground, n_fock).rho

    steps_per_check = max(1, int(round(cfg.check_interval / cfg.dt)))
    t = 0.0
    residual = _trace_norm(ops.rhs(t, rho))
    while residual >= tol:
        if t >= cfg.steady_horizon:
            partial = JointDensityMatrix(rho=rho, N=params.N, n_fock=n_fock)
            raise NoConvergence(
                f"no steady state within t={cfg.steady_horizon} (residual {residual:.3e})",
                partial=partial,
                residual=residual,
            )
        for _ in range(steps_per_check):
            rho = rk4_step(ops.rhs, t, rho, cfg.dt)
            t += cfg.dt
        residual = _trace_norm(ops.rhs(t, rho))

    logger.info("Steady state reached at t=%.1f (residual %.2e, n_fock=%d)", t, residual, n_fock)
    top = ops.top_population(rho)
    if top > cfg.fock_tolerance:
        raise FockTruncationExceeded(n_fock, top)
    return JointDensityMatrix(rho=rho, N=params.N, n_fock=n_fock)


def joint_observables(rho_tot: JointDensityMatrix) -> dict[str, complex]:
    """Spin means, cavity amplitude, photon number and the atom-field covariance C_af."""
    ops = JointOperators(rho_tot.N, rho_tot.n_fock)
    rho = rho_tot.rho

    def mean(op) -> complex:
        return complex(np.trace(op @ rho))

    sx, sy, sz = mean(ops.Sx).real, mean(ops.Sy).real, mean(ops.Sz).real
    a = mean(ops.a)
    return {
        "sx": sx,
        "sy": sy,
        "sz": sz,
        "a": a,
        "n": mean(ops.n).real,
        "c_af": mean(ops.Sx @ ops.a) - sx * a,
    }
