"""Metastability analysis: phase labels, occupation curves, tunnelling rates and their N-scaling.

Rate model between the normal state n and the two superradiant states s±:

    dp_n/dt  = −2γ_ns p_n + γ_sn (p_s+ + p_s−)
    dp_s±/dt = γ_ns p_n − γ_sn p_s± − γ_ss (p_s± − p_s∓)

Summing the superradiant pair gives a two-state system with relaxation
rate Γ = 2γ_ns + γ_sn and stationary p_n = γ_sn / Γ.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import solve_ivp
from scipy.ndimage import uniform_filter1d
from scipy.optimize import least_squares
from scipy.special import expit

from app.services.ensemble import run_ensemble
from app.services.errors import ModelDomainError, NumericalError
from app.services.meanfield import FixedPoint, PhaseLabel, classify_phase, find_fixed_points
from app.services.nuhops import HopsConfig, TrajectoryRecord
from app.services.spin_algebra import ModelParams, SpinState

logger = logging.getLogger(__name__)

# Parameter point whose data sit at s = 0.69 on the g₋ = 1.8 cut
ANCHOR_G_MINUS = 1.8
ANCHOR_G_PLUS = 0.782
ANCHOR_S = 0.69
ANCHOR_TOL = 0.02


class NonIdentifiable(NumericalError):
    """Raised when a tunnelling direction shows no events; carries one-event upper bounds."""

    def __init__(self, message: str, upper_bounds: dict[str, float]):
        super().__init__(message)
        self.upper_bounds = upper_bounds


@dataclass(frozen=True, eq=False)
class OccupationCurves:
    t: np.ndarray
    p_s: np.ndarray
    p_n: np.ndarray
    se: np.ndarray
    n_traj: int
    n_switched: int
    initial_phase: str


@dataclass(frozen=True, eq=False)
class RateFit:
    gamma_ns: float
    gamma_sn: float
    covariance: np.ndarray
    residual_norm: float

    @property
    def sigma_ns(self) -> float:
        return float(np.sqrt(self.covariance[0, 0]))

    @property
    def sigma_sn(self) -> float:
        return float(np.sqrt(self.covariance[1, 1]))


@dataclass(frozen=True, eq=False)
class ExponentFit:
    """γ_i = A_i exp(r_i N) fitted per cut position ``s``; ``s_c`` where r_ns = r_sn."""

    s: np.ndarray
    A_ns: np.ndarray
    r_ns: np.ndarray
    r_ns_se: np.ndarray
    A_sn: np.ndarray
    r_sn: np.ndarray
    r_sn_se: np.ndarray
    s_c: float | None


@dataclass(frozen=True)
class CutSpec:
    """Line at fixed g₋ with s = 0 on the superradiant boundary and s = 1 on the normal one."""

    g_minus: float
    g_plus_sr: float
    g_plus_np: float
    base: ModelParams

    def s_of(self, g_plus: float) -> float:
        return (self.g_plus_sr - g_plus) / (self.g_plus_sr - self.g_plus_np)

    def g_plus_of(self, s: float) -> float:
        return self.g_plus_sr + s * (self.g_plus_np - self.g_plus_sr)

    def params_at(self, s: float, N: int | None = None) -> ModelParams:
        changes = {"g_minus": self.g_minus, "g_plus": self.g_plus_of(s)}
        if N is not None:
            changes["N"] = N
        return self.base.replace(**changes)


# --- classification ---------------------------------------------------------

def classify_magnetisation(
    t: np.ndarray,
    m: np.ndarray,
    fixed_points: list[FixedPoint],
    window_time: float,
) -> np.ndarray:
    """Superradiant (True) / normal (False) label per time from a centred moving average of m."""
    candidates = [p for p in fixed_points if p.stable] or list(fixed_points)
    if not candidates:
        raise ModelDomainError("classification needs at least one fixed point")
    dt = float(t[1] - t[0]) if t.size > 1 else 1.0
    size = max(1, int(round(window_time / dt)))
    smooth = uniform_filter1d(np.asarray(m, dtype=float), size=size, axis=0, mode="nearest")

    targets = np.stack([p.state.m for p in candidates])
    superradiant = np.array([p.is_superradiant for p in candidates])
    distances = np.linalg.norm(smooth[:, None, :] - targets[None, :, :], axis=2)
    return superradiant[np.argmin(distances, axis=1)]


def classify_state(
    record: TrajectoryRecord,
    fixed_points: list[FixedPoint],
    window_time: float | None = None,
) -> np.ndarray:
    """Label each recorded time of a trajectory; the window defaults to 5/κ."""
    params = record.params
    if window_time is None:
        if params.kappa <= 0:
            raise ModelDomainError("default window 5/kappa needs kappa > 0")
        window_time = 5.0 / params.kappa
    m = np.stack([record.sx, record.sy, record.sz], axis=1) / params.N
    return classify_magnetisation(record.t, m, fixed_points, window_time)


def occupation_curves(labels: np.ndarray, t: np.ndarray) -> OccupationCurves:
    """Fraction of trajectories in the superradiant phase per time.

    Args:
        labels: Boolean array (n_traj, n_times), True for superradiant.
        t: Times of the label columns.
    """
    labels = np.atleast_2d(np.asarray(labels, dtype=bool))
    n = labels.shape[0]
    p_s = labels.mean(axis=0)
    initial = labels[:, 0]
    if initial.all():
        tag = "superradiant"
    elif not initial.any():
        tag = "normal"
    else:
        tag = "mixed"
    switched = int(np.sum(np.any(labels != initial[:, None], axis=1)))
    return OccupationCurves(
        t=np.asarray(t, dtype=float),
        p_s=p_s,
        p_n=1.0 - p_s,
        se=np.sqrt(p_s * (1.0 - p_s) / n),
        n_traj=n,
        n_switched=switched,
        initial_phase=tag,
    )


# --- rate equations ----------------------------------------------------------

def _check_rates(*rates: float) -> None:
    if any(r < 0 for r in rates):
        raise ModelDomainError(f"rates must be nonnegative, got {rates}")


def rate_solution(
    gamma_ns: float,
    gamma_sn: float,
    p_n0: float,
    p_s0: float,
    t: np.ndarray | float,
) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form (p_n, p_s) of the reduced two-state rate system."""
    _check_rates(gamma_ns, gamma_sn)
    if abs(p_n0 + p_s0 - 1.0) > 1e-12:
        raise ModelDomainError(f"initial probabilities must sum to 1, got {p_n0 + p_s0}")
    t = np.asarray(t, dtype=float)
    total = 2.0 * gamma_ns + gamma_sn
    if total == 0:
        return np.full(t.shape, float(p_n0)), np.full(t.shape, float(p_s0))
    p_n_inf = gamma_sn / total
    p_n = p_n_inf + (p_n0 - p_n_inf) * np.exp(-total * t)
    return p_n, 1.0 - p_n


def rate_ode_full(
    gamma_ns: float,
    gamma_sn: float,
    gamma_ss: float,
    p0: np.ndarray,
    t_grid: np.ndarray,
) -> np.ndarray:
    """Integrate the three-state system for (p_n, p_s+, p_s−); returns shape (len(t_grid), 3)."""
    _check_rates(gamma_ns, gamma_sn, gamma_ss)
    p0 = np.asarray(p0, dtype=float)
    if abs(p0.sum() - 1.0) > 1e-12:
        raise ModelDomainError(f"initial probabilities must sum to 1, got {p0.sum()}")
    generator = np.array([
        [-2 * gamma_ns, gamma_sn, gamma_sn],
        [gamma_ns, -gamma_sn - gamma_ss, gamma_ss],
        [gamma_ns, gamma_ss, -gamma_sn - gamma_ss],
    ])
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.size == 1:
        return p0[None, :]
    sol = solve_ivp(lambda _t, p: generator @ p, (t_grid[0], t_grid[-1]), p0,
                    method="DOP853", t_eval=t_grid, rtol=1e-13, atol=1e-15)
    if not sol.success:
        raise NumericalError(f"rate integration failed: {sol.message}")
    return sol.y.T


# --- fitting -------------------------------------------------------------------

def _smoothed_sigma(p: np.ndarray, n: int) -> np.ndarray:
    p_tilde = (p * n + 1.0) / (n + 2.0)
    return np.sqrt(p_tilde * (1.0 - p_tilde) / n)


def _one_event_bound(n: int, horizon: float) -> float:
    return float(-np.log(1.0 - 1.0 / n) / horizon) if n > 1 else float("inf")


def _initial_rate(fraction: float, n: int, horizon: float, factor: float) -> float:
    fraction = min(max(fraction, 1.0 / (n + 2)), 1.0 - 1.0 / (n + 2))
    return float(-np.log(1.0 - fraction) / (factor * horizon))


def fit_rates(normal_start: OccupationCurves, superradiant_start: OccupationCurves) -> RateFit:
    """Joint weighted fit of the normal-start and superradiant-start solutions.

    Normal start: p_s(t) = (2γ_ns/Γ)(1 − e^{−Γt}); superradiant start:
    p_n(t) = (γ_sn/Γ)(1 − e^{−Γt}); Γ = 2γ_ns + γ_sn. Rates are fitted in
    log space with Levenberg-Marquardt; weights use the binomial error of
    the smoothed fraction (k+1)/(n+2).

    Raises:
        NonIdentifiable: If either ensemble shows no switching event.
    """
    bounds = {}
    if normal_start.n_switched == 0:
        bounds["gamma_ns"] = _one_event_bound(normal_start.n_traj, float(normal_start.t[-1]))
    if superradiant_start.n_switched == 0:
        bounds["gamma_sn"] = _one_event_bound(superradiant_start.n_traj, float(superradiant_start.t[-1]))
    if bounds:
        raise NonIdentifiable(f"no tunnelling events for {', '.join(sorted(bounds))}", upper_bounds=bounds)

    t_n, obs_n = normal_start.t[1:], normal_start.p_s[1:]
    t_s, obs_s = superradiant_start.t[1:], superradiant_start.p_n[1:]
    sig_n = _smoothed_sigma(obs_n, normal_start.n_traj)
    sig_s = _smoothed_sigma(obs_s, superradiant_start.n_traj)

    def residuals(log_rates: np.ndarray) -> np.ndarray:
        g_ns, g_sn = np.exp(log_rates)
        total = 2 * g_ns + g_sn
        model_n = 2 * g_ns / total * (1 - np.exp(-total * t_n))
        model_s = g_sn / total * (1 - np.exp(-total * t_s))
        return np.concatenate([(model_n - obs_n) / sig_n, (model_s - obs_s) / sig_s])

    x0 = np.log([
        _initial_rate(float(normal_start.p_s[-1]), normal_start.n_traj, float(normal_start.t[-1]), 2.0),
        _initial_rate(float(superradiant_start.p_n[-1]), superradiant_start.n_traj, float(superradiant_start.t[-1]), 1.0),
    ])
    fit = least_squares(residuals, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=10000)
    rates = np.exp(fit.x)
    try:
        cov_log = np.linalg.inv(fit.jac.T @ fit.jac)
    except np.linalg.LinAlgError as e:
        raise NumericalError("rate fit covariance is singular") from e
    covariance = rates[:, None] * cov_log * rates[None, :]
    logger.debug("Rate fit: gamma_ns=%.4e gamma_sn=%.4e (cost %.3e, %s)",
                 rates[0], rates[1], fit.cost, fit.message)
    return RateFit(gamma_ns=float(rates[0]), gamma_sn=float(rates[1]),
                   covariance=covariance, residual_norm=float(np.linalg.norm(fit.fun)))


def transition_point(s: np.ndarray, r_ns: np.ndarray, r_sn: np.ndarray) -> float | None:
    """First sign change of r_ns − r_sn along s, linearly interpolated; None without a crossing."""
    s = np.asarray(s, dtype=float)
    diff = np.asarray(r_ns, dtype=float) - np.asarray(r_sn, dtype=float)
    order = np.argsort(s)
    s, diff = s[order], diff[order]
    for k in range(s.size):
        if diff[k] == 0:
            return float(s[k])
        if k + 1 < s.size and diff[k] * diff[k + 1] < 0:
            return float(s[k] - diff[k] * (s[k + 1] - s[k]) / (diff[k + 1] - diff[k]))
    return None


def _line(Ns: np.ndarray, rates: np.ndarray, sigmas: np.ndarray) -> tuple[float, float, float]:
    log_rates = np.log(rates)
    if np.all(sigmas > 0):
        coef, cov = np.polyfit(Ns, log_rates, 1, w=rates / sigmas, cov="unscaled")
        return float(np.exp(coef[1])), float(coef[0]), float(np.sqrt(cov[0, 0]))
    coef = np.polyfit(Ns, log_rates, 1)
    return float(np.exp(coef[1])), float(coef[0]), float("nan")


def fit_exponents(entries: list[tuple[float, int, RateFit | NonIdentifiable | None]]) -> ExponentFit:
    """Fit ln γ = ln A + rN per cut position and locate s_c.

    Non-identifiable entries are dropped; positions with fewer than three
    atom numbers left are skipped.

    Args:
        entries: (s, N, fit) triples.
    """
    grouped: dict[float, list[tuple[int, RateFit]]] = defaultdict(list)
    dropped = 0
    for s, N, fit in entries:
        if isinstance(fit, RateFit):
            grouped[float(s)].append((int(N), fit))
        else:
            dropped += 1
    if dropped:
        logger.warning("Excluded %d non-identifiable rate fits from the exponent fit", dropped)

    rows = []
    for s in sorted(grouped):
        cells = sorted(grouped[s], key=lambda item: item[0])
        if len(cells) < 3:
            logger.warning("Skipping s=%.3f: only %d atom numbers", s, len(cells))
            continue
        Ns = np.array([N for N, _ in cells], dtype=float)
        ns = _line(Ns, np.array([f.gamma_ns for _, f in cells]), np.array([f.sigma_ns for _, f in cells]))
        sn = _line(Ns, np.array([f.gamma_sn for _, f in cells]), np.array([f.sigma_sn for _, f in cells]))
        if ns[1] >= 0 or sn[1] >= 0:
            logger.warning("Non-negative rate exponent at s=%.3f: r_ns=%.4f r_sn=%.4f", s, ns[1], sn[1])
        rows.append((s, *ns, *sn))
    if not rows:
        raise NumericalError("no cut position has rates for three atom numbers")

    table = np.array(rows)
    return ExponentFit(
        s=table[:, 0],
        A_ns=table[:, 1], r_ns=table[:, 2], r_ns_se=table[:, 3],
        A_sn=table[:, 4], r_sn=table[:, 5], r_sn_se=table[:, 6],
        s_c=transition_point(table[:, 0], table[:, 2], table[:, 5]),
    )


def extrapolated_normal_population(A_ns: float, r_ns: float, A_sn: float, r_sn: float, N: float) -> float:
    """Stationary p_n = 1/(1 + 2A_ns/A_sn · e^{(r_ns − r_sn)N}); ``N = inf`` gives the limit."""
    if np.isinf(N):
        if r_ns > r_sn:
            return 0.0
        if r_ns < r_sn:
            return 1.0
        return float(1.0 / (1.0 + 2.0 * A_ns / A_sn))
    exponent = np.log(2.0 * A_ns / A_sn) + (r_ns - r_sn) * N
    return float(expit(-exponent))


# --- cut geometry and finite-time map -----------------------------------------

def _bisect_boundary(base: ModelParams, g_minus: float, lo: float, hi: float,
                     lo_label: PhaseLabel, tol: float) -> float:
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if classify_phase(base.replace(g_minus=g_minus, g_plus=mid)) == lo_label:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def cut_from_meanfield(
    g_minus: float,
    base: ModelParams,
    g_plus_max: float | None = None,
    n_scan: int = 61,
    tol: float = 1e-6,
) -> CutSpec:
    """Mean-field bistable interval along g₊ at fixed g₋, refined by bisection.

    Raises:
        NumericalError: If the scan finds no bistable interval bordering both phases.
    """
    g_plus_max = g_plus_max if g_plus_max is not None else 2.0 * g_minus
    grid = np.linspace(0.0, g_plus_max, n_scan)
    labels = [classify_phase(base.replace(g_minus=g_minus, g_plus=float(g))) for g in grid]

    edges = {}
    for k in range(n_scan - 1):
        pair = {labels[k], labels[k + 1]}
        if PhaseLabel.BISTABLE not in pair or len(pair) != 2:
            continue
        other = (pair - {PhaseLabel.BISTABLE}).pop()
        if other in (PhaseLabel.SUPERRADIANT, PhaseLabel.NORMAL) and other not in edges:
            edges[other] = _bisect_boundary(base, g_minus, float(grid[k]), float(grid[k + 1]), labels[k], tol)
    if len(edges) != 2:
        raise NumericalError(f"no bistable interval between both phases found at g-={g_minus}")

    cut = CutSpec(g_minus=g_minus, g_plus_sr=edges[PhaseLabel.SUPERRADIANT],
                  g_plus_np=edges[PhaseLabel.NORMAL], base=base)
    logger.info("Cut at g-=%.3f: SR boundary g+=%.5f, NP boundary g+=%.5f",
                g_minus, cut.g_plus_sr, cut.g_plus_np)
    if abs(g_minus - ANCHOR_G_MINUS) < 1e-12:
        anchor = cut.s_of(ANCHOR_G_PLUS)
        if abs(anchor - ANCHOR_S) > ANCHOR_TOL:
            logger.warning("Cut calibration: g+=%.3f maps to s=%.3f, expected %.2f +- %.2f",
                           ANCHOR_G_PLUS, anchor, ANCHOR_S, ANCHOR_TOL)
    return cut


def finite_time_occupation(
    psi0: SpinState,
    params: ModelParams,
    cfg: HopsConfig,
    time: float,
    window_time: float | None = None,
    workers: int = 1,
) -> tuple[float, float]:
    """Fraction of trajectories labelled superradiant at ``time``, with its standard error."""
    run_cfg = cfg if cfg.t_end >= time else replace(cfg, t_end=time)
    fixed_points = find_fixed_points(params)
    ensemble = run_ensemble(psi0, params, run_cfg, workers=workers)
    index = int(np.argmin(np.abs(ensemble.records[0].t - time)))
    labels = np.array([classify_state(r, fixed_points, window_time)[index] for r in ensemble.records])
    p = float(labels.mean())
    return p, float(np.sqrt(p * (1.0 - p) / labels.size))
