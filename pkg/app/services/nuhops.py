"""nuHOPS stochastic pure-state trajectories for the open Dicke model.

The damped cavity is treated as an exponential-kernel bath for the spin:

    ∂Φ = [−iω_a Sz + (z*/√N + μ*/N) L − (μ/N) L† − (iω_c + κ) b†b
          − (2iḡ/√N)((L† − <L>*) b + (L − <L>) b†)] Φ
    dμ/dt = −(iω_c + κ) μ + (2ḡ)² <L>

with z_t an Ornstein-Uhlenbeck process of correlation
<z_t z_s*> = (2ḡ)² exp(−iω_c(t−s) − κ|t−s|) and <L> taken from the
normalised vacuum component Φ[:, 0]. The 1/√N and 1/N factors come from
writing the cavity coupling in terms of the normalised operator L/√N.

Φ is stored as an array of shape (window, D): rows are Dicke indices
lo..hi, columns are auxiliary Fock levels, so b acts on columns.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from app.services.errors import ModelDomainError, NumericalError
from app.services.exact_solver import SpinDensityMatrix
from app.services.spin_algebra import ModelParams, SpinState, build_spin_operators

logger = logging.getLogger(__name__)

WINDOW_GROWTH = 8
WINDOW_MIN = 3
FAILED_FRACTION_WARN = 0.01


class DimensionBlowup(NumericalError):
    """Raised when the window × Fock dimension of a trajectory exceeds its cap."""

    def __init__(self, message: str, traj_index: int | None = None):
        super().__init__(message)
        self.traj_index = traj_index


@dataclass(frozen=True)
class HopsConfig:
    """Truncation, stepping and ensemble settings of a nuHOPS run."""

    fock_levels: int = 8
    fock_tol: float = 1e-8
    window_tol: float = 1e-10
    dt: float = 0.01
    noise_dt: float | None = None
    t_end: float = 10.0
    record_dt: float = 0.05
    n_traj: int = 100
    base_seed: int = 0
    max_fock_levels: int = 512
    max_dimension: int = 262144
    snapshot_times: tuple[float, ...] = ()

    def __post_init__(self):
        if self.fock_levels < 2:
            raise ModelDomainError(f"fock_levels must be >= 2, got {self.fock_levels}")
        for name in ("fock_tol", "window_tol"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ModelDomainError(f"{name} must lie in (0, 1), got {value}")
        if self.dt <= 0 or self.record_dt <= 0 or self.t_end <= 0:
            raise ModelDomainError("dt, record_dt and t_end must be positive")
        if self.noise_dt is not None and self.noise_dt <= 0:
            raise ModelDomainError(f"noise_dt must be positive, got {self.noise_dt}")
        if self.n_traj < 1:
            raise ModelDomainError(f"n_traj must be >= 1, got {self.n_traj}")
        if any(t < 0 or t > self.t_end for t in self.snapshot_times):
            raise ModelDomainError("snapshot times must lie inside [0, t_end]")

    @property
    def effective_noise_dt(self) -> float:
        return self.noise_dt if self.noise_dt is not None else self.dt

    @property
    def record_grid(self) -> np.ndarray:
        n = int(round(self.t_end / self.record_dt))
        return np.linspace(0.0, n * self.record_dt, n + 1)


@dataclass(frozen=True, eq=False)
class OUNoisePath:
    t_grid: np.ndarray
    z_conj: np.ndarray
    seed: int | None = None

    @property
    def dt(self) -> float:
        return float(self.t_grid[1] - self.t_grid[0]) if self.t_grid.size > 1 else 0.0

    def at(self, t: float) -> complex:
        """z_t* by linear interpolation between grid samples."""
        if self.t_grid.size == 1:
            return complex(self.z_conj[0])
        pos = min(max(t / self.dt, 0.0), self.t_grid.size - 1.0)
        k = min(int(pos), self.t_grid.size - 2)
        w = pos - k
        return complex((1.0 - w) * self.z_conj[k] + w * self.z_conj[k + 1])


@dataclass(eq=False)
class HopsState:
    phi: np.ndarray
    lo: int
    hi: int
    mu: complex = 0j
    log_norm: float = 0.0

    @property
    def fock_levels(self) -> int:
        return self.phi.shape[1]

    @property
    def vacuum(self) -> np.ndarray:
        return self.phi[:, 0]

    @property
    def vacuum_norm2(self) -> float:
        return float(np.vdot(self.vacuum, self.vacuum).real)


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    traj_index: int
    seed: int
    params: ModelParams
    dt: float
    t: np.ndarray
    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray
    L: np.ndarray
    mu: np.ndarray
    vacuum_norm2: np.ndarray
    window_lo: np.ndarray
    window_hi: np.ndarray
    fock_levels: np.ndarray
    snapshot_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    snapshots: np.ndarray = field(default_factory=lambda: np.empty((0, 0), dtype=complex))


@dataclass(frozen=True, eq=False)
class EnsembleAverage:
    """Ensemble means, standard errors of the mean and density-matrix estimates."""

    t: np.ndarray
    mean: dict[str, np.ndarray]
    se: dict[str, np.ndarray]
    n_traj: int
    n_failed: int
    snapshot_times: np.ndarray
    rho: list[SpinDensityMatrix]


@dataclass(frozen=True, eq=False)
class CavityEstimate:
    t: np.ndarray
    a: np.ndarray
    a_se: np.ndarray
    c_af: np.ndarray


def trajectory_rng(base_seed: int, traj_index: int) -> np.random.Generator:
    """Counter-based generator for one trajectory, independent of scheduling."""
    seq = np.random.SeedSequence(base_seed, spawn_key=(traj_index,))
    return np.random.Generator(np.random.Philox(seq))


def sample_ou_path(
    params: ModelParams,
    t_grid: np.ndarray,
    seed: int | np.random.Generator | None = None,
) -> OUNoisePath:
    """Stationary complex OU path on a uniform grid by exact discrete updates.

    z_{k+1} = e^{−(iω_c+κ)dt} z_k + ξ_k with ξ_k circular complex normal of
    variance (2ḡ)²(1 − e^{−2κdt}); z_0 has variance (2ḡ)².
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.size > 2 and not np.allclose(np.diff(t_grid), t_grid[1] - t_grid[0], rtol=1e-9, atol=1e-12):
        raise ModelDomainError("noise grid must be uniform")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    variance = (2.0 * params.g_bar) ** 2
    dt = float(t_grid[1] - t_grid[0]) if t_grid.size > 1 else 0.0
    decay = np.exp(-(1j * params.omega_c + params.kappa) * dt)
    kick_sd = np.sqrt(0.5 * variance * (1.0 - np.exp(-2.0 * params.kappa * dt)))

    normals = rng.standard_normal((t_grid.size, 2))
    z = np.empty(t_grid.size, dtype=complex)
    z[0] = np.sqrt(0.5 * variance) * (normals[0, 0] + 1j * normals[0, 1])
    kicks = kick_sd * (normals[1:, 0] + 1j * normals[1:, 1])
    for k in range(1, t_grid.size):
        z[k] = decay * z[k - 1] + kicks[k - 1]
    return OUNoisePath(t_grid=t_grid, z_conj=z.conj(), seed=seed if isinstance(seed, int) else None)


def _memory_rate(mu: complex, L_expect: complex, params: ModelParams) -> complex:
    return -(1j * params.omega_c + params.kappa) * mu + (2.0 * params.g_bar) ** 2 * L_expect


def update_memory(
    mu: complex,
    L_expect: complex,
    params: ModelParams,
    dt: float,
    L_next: complex | None = None,
) -> complex:
    """One RK4 step of dμ/dt = −(iω_c+κ)μ + (2ḡ)²<L>.

    <L> is held at ``L_expect`` over the step, or interpolated linearly to
    ``L_next`` when the end value is known.
    """
    L_end = L_expect if L_next is None else L_next
    L_mid = 0.5 * (L_expect + L_end)
    k1 = _memory_rate(mu, L_expect, params)
    k2 = _memory_rate(mu + 0.5 * dt * k1, L_mid, params)
    k3 = _memory_rate(mu + 0.5 * dt * k2, L_mid, params)
    k4 = _memory_rate(mu + dt * k3, L_end, params)
    return complex(mu + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))


class WindowOperators:
    """Spin operators restricted to the Dicke indices lo..hi."""

    def __init__(self, params: ModelParams, lo: int, hi: int):
        full = build_spin_operators(params)
        sl = slice(lo, hi + 1)
        self.lo, self.hi = lo, hi
        self.sz = np.real(full.Sz.diagonal()[sl])
        self.L = full.L[sl, sl].tocsr()
        self.Ldag = self.L.conj().T.tocsr()
        self.Sp = full.Sp[sl, sl].tocsr()


def _expectation_L(vacuum: np.ndarray, ops: WindowOperators) -> complex:
    norm2 = np.vdot(vacuum, vacuum).real
    if norm2 == 0:
        return 0j
    return complex(np.vdot(vacuum, ops.L @ vacuum) / norm2)


def hops_rhs(
    state: HopsState,
    z_conj_t: complex,
    params: ModelParams,
    ops: WindowOperators | None = None,
) -> HopsState:
    """Time derivative of (Φ, μ); <L> is computed from the normalised vacuum of ``state``."""
    if ops is None:
        ops = WindowOperators(params, state.lo, state.hi)
    phi = state.phi
    D = phi.shape[1]
    sqrt_N = np.sqrt(params.N)
    L_exp = _expectation_L(phi[:, 0], ops)
    mu = state.mu

    L_phi = ops.L @ phi
    Ldag_phi = ops.Ldag @ phi
    levels = np.arange(D)
    ladder = np.sqrt(np.arange(1, D))

    b_phi = np.zeros_like(phi)
    b_phi[:, :-1] = phi[:, 1:] * ladder
    bdag_phi = np.zeros_like(phi)
    bdag_phi[:, 1:] = phi[:, :-1] * ladder

    dphi = (
        (-1j * params.omega_a * ops.sz)[:, None] * phi
        + (z_conj_t / sqrt_N + np.conj(mu) / params.N) * L_phi
        - (mu / params.N) * Ldag_phi
        - (1j * params.omega_c + params.kappa) * phi * levels[None, :]
    )
    if params.g_bar:
        coupling = -2j * params.g_bar / sqrt_N
        dphi += coupling * (
            (ops.Ldag @ b_phi - np.conj(L_exp) * b_phi)
            + (ops.L @ bdag_phi - L_exp * bdag_phi)
        )
    return HopsState(phi=dphi, lo=state.lo, hi=state.hi, mu=_memory_rate(mu, L_exp, params))


def _rk4_joint(state: HopsState, t: float, h: float, noise: OUNoisePath,
               params: ModelParams, ops: WindowOperators) -> HopsState:
    def shifted(base: HopsState, k: HopsState, scale: float) -> HopsState:
        return HopsState(phi=base.phi + scale * k.phi, lo=base.lo, hi=base.hi, mu=base.mu + scale * k.mu)

    k1 = hops_rhs(state, noise.at(t), params, ops)
    k2 = hops_rhs(shifted(state, k1, 0.5 * h), noise.at(t + 0.5 * h), params, ops)
    k3 = hops_rhs(shifted(state, k2, 0.5 * h), noise.at(t + 0.5 * h), params, ops)
    k4 = hops_rhs(shifted(state, k3, h), noise.at(t + h), params, ops)
    return HopsState(
        phi=state.phi + (h / 6.0) * (k1.phi + 2 * k2.phi + 2 * k3.phi + k4.phi),
        lo=state.lo,
        hi=state.hi,
        mu=state.mu + (h / 6.0) * (k1.mu + 2 * k2.mu + 2 * k3.mu + k4.mu),
        log_norm=state.log_norm,
    )


def _initial_window(amplitudes: np.ndarray, window_tol: float) -> tuple[int, int]:
    N = amplitudes.shape[0] - 1
    support = np.flatnonzero(np.abs(amplitudes) ** 2 > window_tol)
    if support.size == 0:
        raise ModelDomainError("initial spin state has no weight above window_tol")
    lo = max(0, int(support[0]) - WINDOW_GROWTH)
    hi = min(N, int(support[-1]) + WINDOW_GROWTH)
    while hi - lo + 1 < min(WINDOW_MIN, N + 1):
        lo, hi = max(0, lo - 1), min(N, hi + 1)
    return lo, hi


def _adapt(state: HopsState, params: ModelParams, cfg: HopsConfig) -> bool:
    """Grow the window and the Fock cutoff in place; True when the window changed."""
    N = params.N
    phi = state.phi
    changed = False

    grow_lo = state.lo > 0 and np.sum(np.abs(phi[0]) ** 2) > cfg.window_tol
    grow_hi = state.hi < N and np.sum(np.abs(phi[-1]) ** 2) > cfg.window_tol
    if grow_lo or grow_hi:
        new_lo = max(0, state.lo - WINDOW_GROWTH) if grow_lo else state.lo
        new_hi = min(N, state.hi + WINDOW_GROWTH) if grow_hi else state.hi
        grown = np.zeros((new_hi - new_lo + 1, phi.shape[1]), dtype=complex)
        grown[state.lo - new_lo: state.lo - new_lo + phi.shape[0]] = phi
        state.phi, state.lo, state.hi = grown, new_lo, new_hi
        changed = True

    D = state.phi.shape[1]
    if np.sum(np.abs(state.phi[:, -1]) ** 2) > cfg.fock_tol:
        if 2 * D > cfg.max_fock_levels:
            raise DimensionBlowup(f"auxiliary Fock cutoff would exceed {cfg.max_fock_levels}")
        padded = np.zeros((state.phi.shape[0], 2 * D), dtype=complex)
        padded[:, :D] = state.phi
        state.phi = padded

    if state.phi.size > cfg.max_dimension:
        raise DimensionBlowup(
            f"trajectory dimension {state.phi.shape[0]}x{state.phi.shape[1]} exceeds cap {cfg.max_dimension}"
        )
    return changed


def _embed(vacuum: np.ndarray, lo: int, N: int) -> np.ndarray:
    full = np.zeros(N + 1, dtype=complex)
    norm = np.linalg.norm(vacuum)
    full[lo: lo + vacuum.shape[0]] = vacuum / norm if norm > 0 else vacuum
    return full


def propagate_trajectory(
    psi0: SpinState,
    params: ModelParams,
    cfg: HopsConfig,
    traj_index: int,
) -> TrajectoryRecord:
    """Propagate one trajectory from psi0 ⊗ |0_b> and record observables on ``cfg.record_grid``.

    Raises:
        DimensionBlowup: If the adaptive basis outgrows its caps.
    """
    if psi0.N != params.N:
        raise ModelDomainError(f"initial state has N={psi0.N}, params have N={params.N}")
    N = params.N
    t_rec = cfg.record_grid
    noise_dt = cfg.effective_noise_dt
    n_noise = int(np.ceil(t_rec[-1] / noise_dt - 1e-9)) + 1
    noise = sample_ou_path(params, np.arange(n_noise) * noise_dt, trajectory_rng(cfg.base_seed, traj_index))

    lo, hi = _initial_window(psi0.amplitudes, cfg.window_tol)
    phi = np.zeros((hi - lo + 1, cfg.fock_levels), dtype=complex)
    phi[:, 0] = psi0.amplitudes[lo: hi + 1] / np.linalg.norm(psi0.amplitudes[lo: hi + 1])
    state = HopsState(phi=phi, lo=lo, hi=hi)
    ops = WindowOperators(params, lo, hi)

    n_rec = t_rec.size
    columns = {name: np.empty(n_rec) for name in ("sx", "sy", "sz", "vacuum_norm2")}
    L_col = np.empty(n_rec, dtype=complex)
    mu_col = np.empty(n_rec, dtype=complex)
    win = np.empty((n_rec, 2), dtype=int)
    fock = np.empty(n_rec, dtype=int)
    snap_times = np.asarray(cfg.snapshot_times, dtype=float)
    snap_index = {int(np.argmin(np.abs(t_rec - ts))): i for i, ts in enumerate(snap_times)}
    snapshots = np.zeros((snap_times.size, N + 1), dtype=complex)

    def record(i: int) -> None:
        vac = state.vacuum
        norm2 = np.vdot(vac, vac).real
        sp_exp = np.vdot(vac, ops.Sp @ vac) / norm2
        columns["sx"][i] = sp_exp.real
        columns["sy"][i] = sp_exp.imag
        columns["sz"][i] = np.dot(ops.sz, np.abs(vac) ** 2) / norm2
        columns["vacuum_norm2"][i] = norm2
        L_col[i] = np.vdot(vac, ops.L @ vac) / norm2
        mu_col[i] = state.mu
        win[i] = state.lo, state.hi
        fock[i] = state.fock_levels
        if i in snap_index:
            snapshots[snap_index[i]] = _embed(vac, state.lo, N)

    record(0)
    for i in range(1, n_rec):
        t0, t1 = t_rec[i - 1], t_rec[i]
        n_sub = max(1, int(np.ceil((t1 - t0) / cfg.dt - 1e-9)))
        h = (t1 - t0) / n_sub
        t = t0
        for _ in range(n_sub):
            state = _rk4_joint(state, t, h, noise, params, ops)
            t += h
            norm = np.linalg.norm(state.phi)
            if not np.isfinite(norm) or norm == 0:
                raise DimensionBlowup(f"trajectory state norm became {norm}", traj_index)
            state.phi /= norm
            state.log_norm += float(np.log(norm))
            try:
                window_changed = _adapt(state, params, cfg)
            except DimensionBlowup as e:
                e.traj_index = traj_index
                raise
            if window_changed:
                ops = WindowOperators(params, state.lo, state.hi)
        record(i)

    logger.debug("Trajectory %d done: window [%d, %d], D=%d, log-norm %.3f",
                 traj_index, state.lo, state.hi, state.fock_levels, state.log_norm)
    return TrajectoryRecord(
        traj_index=traj_index,
        seed=cfg.base_seed,
        params=params,
        dt=cfg.dt,
        t=t_rec,
        sx=columns["sx"],
        sy=columns["sy"],
        sz=columns["sz"],
        L=L_col,
        mu=mu_col,
        vacuum_norm2=columns["vacuum_norm2"],
        window_lo=win[:, 0],
        window_hi=win[:, 1],
        fock_levels=fock,
        snapshot_times=snap_times,
        snapshots=snapshots,
    )


def _mean_and_se(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = stack.shape[0]
    mean = stack.mean(axis=0)
    if n < 2:
        return mean, np.full(mean.shape, np.nan)
    return mean, stack.std(axis=0, ddof=1) / np.sqrt(n)


def ensemble_average(records: list[TrajectoryRecord], n_failed: int = 0) -> EnsembleAverage:
    """Means with standard errors and ρ(t) = E[|ψ⁰><ψ⁰| / <ψ⁰|ψ⁰>] at the snapshot times.

    Records are reduced in trajectory-index order.
    """
    if not records:
        raise ModelDomainError("ensemble average needs at least one trajectory")
    records = sorted(records, key=lambda r: r.traj_index)
    total = len(records) + n_failed
    if n_failed and n_failed / total > FAILED_FRACTION_WARN:
        logger.warning("%d of %d trajectories failed (%.1f%%)", n_failed, total, 100.0 * n_failed / total)

    mean, se = {}, {}
    for name in ("sx", "sy", "sz", "vacuum_norm2"):
        mean[name], se[name] = _mean_and_se(np.stack([getattr(r, name) for r in records]))

    snapshot_times = records[0].snapshot_times
    rho = []
    for k in range(snapshot_times.size):
        vectors = np.stack([r.snapshots[k] for r in records])
        rho.append(SpinDensityMatrix(rho=np.einsum("ni,nj->ij", vectors, vectors.conj()) / len(records)))

    return EnsembleAverage(
        t=records[0].t,
        mean=mean,
        se=se,
        n_traj=len(records),
        n_failed=n_failed,
        snapshot_times=snapshot_times,
        rho=rho,
    )


def reconstruct_cavity_amplitude(record: TrajectoryRecord, params: ModelParams) -> np.ndarray:
    """Trajectory cavity estimate â(t) = −iμ(t)/(2ḡ√N); zero when ḡ = 0."""
    if params.g_bar == 0:
        return np.zeros_like(record.mu)
    return -1j * record.mu / (2.0 * params.g_bar * np.sqrt(params.N))


def ensemble_cavity_moments(records: list[TrajectoryRecord], params: ModelParams) -> CavityEstimate:
    """E[â] with its standard error and the trajectory-level C_af estimate.

    C_af = E[<Sx>·â] − E[<Sx>]E[â] is heuristic: <Sx a> does not factorise
    on single trajectories.
    """
    records = sorted(records, key=lambda r: r.traj_index)
    a = np.stack([reconstruct_cavity_amplitude(r, params) for r in records])
    sx = np.stack([r.sx for r in records])
    a_mean, a_se = _mean_and_se(a)
    c_af = (sx * a).mean(axis=0) - sx.mean(axis=0) * a_mean
    return CavityEstimate(t=records[0].t, a=a_mean, a_se=a_se, c_af=c_af)
