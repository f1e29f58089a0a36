"""Mean-field dynamics of the (un)balanced open Dicke model.

Ehrenfest factorisation of the Hamiltonian in units m = <S>/N, β = <a>/√N:

    dm/dt = B × m,   B = (2ḡ(β + β*), 2iΔg(β − β*), ω_a)
    dβ/dt = −(iω_c + κ)β − i(2ḡ m_x − 2iΔg m_y)

At Δg = 0 this is the familiar balanced form with g ≡ 2ḡ. The spin length
|m| is a constant of motion, so fixed points are searched on the sphere
|m| = 1/2 and their stability is judged in the tangent space.
"""

import itertools
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import least_squares

from app.services.errors import ModelDomainError, NumericalError
from app.services.spin_algebra import ModelParams

logger = logging.getLogger(__name__)

ROOT_RESIDUAL_MAX = 1e-10
STABILITY_THRESHOLD = -1e-9
JACOBIAN_STEP = 1e-6
# Cartesian distance under which two roots are the same point
DUPLICATE_DISTANCE = 1e-6

NORMAL_M = np.array([0.0, 0.0, -0.5])


class IntegrationFailure(NumericalError):
    """Raised when the adaptive ODE integrator gives up."""


class PhaseLabel(str, Enum):
    NORMAL = "Normal"
    SUPERRADIANT = "Superradiant"
    BISTABLE = "Bistable"
    NON_STATIONARY = "NonStationary"


class Stability(str, Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"


@dataclass(frozen=True, eq=False)
class MeanFieldState:
    """Magnetisation m = <S>/N and scaled cavity amplitude β = <a>/√N."""

    m: np.ndarray
    beta: complex

    @classmethod
    def from_vector(cls, y: np.ndarray) -> "MeanFieldState":
        return cls(m=np.array(y[:3], dtype=float), beta=complex(y[3], y[4]))

    @classmethod
    def from_angles(cls, theta: float, phi: float, beta: complex = 0j) -> "MeanFieldState":
        """Fully polarised spin pointing along (θ, φ)."""
        m = 0.5 * np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
        return cls(m=m, beta=complex(beta))

    @classmethod
    def normal(cls) -> "MeanFieldState":
        return cls(m=NORMAL_M.copy(), beta=0j)

    def to_vector(self) -> np.ndarray:
        return np.array([*self.m, self.beta.real, self.beta.imag])


@dataclass(frozen=True, eq=False)
class FixedPoint:
    state: MeanFieldState
    stability: Stability
    eigenvalues: np.ndarray
    residual: float

    @property
    def stable(self) -> bool:
        return self.stability is Stability.STABLE

    @property
    def is_normal(self) -> bool:
        y = self.state.to_vector()
        return float(np.linalg.norm(y - MeanFieldState.normal().to_vector())) < DUPLICATE_DISTANCE

    @property
    def is_superradiant(self) -> bool:
        return abs(self.state.beta) > DUPLICATE_DISTANCE


@dataclass(frozen=True, eq=False)
class MeanFieldTrajectory:
    t: np.ndarray
    m: np.ndarray
    beta: np.ndarray

    def state_at(self, index: int) -> MeanFieldState:
        return MeanFieldState(m=self.m[index].copy(), beta=complex(self.beta[index]))


@dataclass(frozen=True, eq=False)
class PhaseRow:
    g_minus: float
    g_plus: float
    label: PhaseLabel
    stable_points: list[MeanFieldState]


def _rhs_vector(_t: float, y: np.ndarray, params: ModelParams) -> np.ndarray:
    m = y[:3]
    beta = complex(y[3], y[4])
    field = np.array([
        4.0 * params.g_bar * beta.real,
        -4.0 * params.delta_g * beta.imag,
        params.omega_a,
    ])
    m_dot = np.cross(field, m)
    beta_dot = (
        -(1j * params.omega_c + params.kappa) * beta
        - 2j * params.g_bar * m[0]
        - 2.0 * params.delta_g * m[1]
    )
    return np.array([*m_dot, beta_dot.real, beta_dot.imag])


def meanfield_rhs(state: MeanFieldState, params: ModelParams) -> MeanFieldState:
    """Time derivative of (m, β); returned in the same container type."""
    return MeanFieldState.from_vector(_rhs_vector(0.0, state.to_vector(), params))


def evolve_meanfield(
    init: MeanFieldState,
    params: ModelParams,
    t_grid: np.ndarray,
    rtol: float = 1e-10,
    atol: float = 1e-12,
) -> MeanFieldTrajectory:
    """Integrate the mean-field equations with an adaptive 8th-order Runge-Kutta (DOP853).

    Raises:
        IntegrationFailure: If the integrator reports failure.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    y0 = init.to_vector()
    if t_grid.size == 1:
        return MeanFieldTrajectory(t=t_grid, m=y0[None, :3], beta=np.array([init.beta]))

    sol = solve_ivp(
        _rhs_vector, (t_grid[0], t_grid[-1]), y0,
        method="DOP853", t_eval=t_grid, rtol=rtol, atol=atol, args=(params,),
    )
    if not sol.success:
        raise IntegrationFailure(f"mean-field integration failed: {sol.message}")

    m = sol.y[:3].T
    drift = float(np.max(np.abs(np.linalg.norm(m, axis=1) - np.linalg.norm(init.m))))
    if drift > 1e-7:
        logger.warning("Spin length drifted by %.2e over t=%.1f", drift, t_grid[-1])
    return MeanFieldTrajectory(t=sol.t, m=m, beta=sol.y[3] + 1j * sol.y[4])


def critical_coupling(params: ModelParams) -> float:
    """g_c = sqrt(ω_a(ω_c² + κ²)/ω_c), the balanced threshold for 2ḡ."""
    if params.omega_c <= 0:
        raise ModelDomainError(f"critical coupling needs omega_c > 0, got {params.omega_c}")
    value = params.omega_a * (params.omega_c**2 + params.kappa**2) / params.omega_c
    if value < 0:
        raise ModelDomainError(f"critical coupling undefined for omega_a={params.omega_a}")
    return float(np.sqrt(value))


# --- fixed points ---------------------------------------------------------

def _sphere_to_vector(x: np.ndarray) -> np.ndarray:
    theta, phi, re_beta, im_beta = x
    return np.array([
        0.5 * np.sin(theta) * np.cos(phi),
        0.5 * np.sin(theta) * np.sin(phi),
        0.5 * np.cos(theta),
        re_beta,
        im_beta,
    ])


def _adiabatic_beta(m: np.ndarray, params: ModelParams) -> complex:
    drive = -2j * params.g_bar * m[0] - 2.0 * params.delta_g * m[1]
    return drive / (1j * params.omega_c + params.kappa)


def _start_grid(params: ModelParams) -> list[np.ndarray]:
    starts = []
    for theta, phi in itertools.product(np.linspace(0.15, np.pi - 0.15, 7),
                                        np.linspace(0.0, 2 * np.pi, 8, endpoint=False)):
        m = _sphere_to_vector(np.array([theta, phi, 0.0, 0.0]))[:3]
        beta = _adiabatic_beta(m, params)
        starts.append(np.array([theta, phi, beta.real, beta.imag]))
    return starts


def _tangent_projector(m: np.ndarray) -> np.ndarray:
    """5×4 matrix whose orthonormal columns span the tangent space at (m, β)."""
    n = m / np.linalg.norm(m)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = helper - np.dot(helper, n) * n
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    P = np.zeros((5, 4))
    P[:3, 0] = t1
    P[:3, 1] = t2
    P[3, 2] = 1.0
    P[4, 3] = 1.0
    return P


def _jacobian(y: np.ndarray, params: ModelParams) -> np.ndarray:
    J = np.empty((5, 5))
    for k in range(5):
        step = np.zeros(5)
        step[k] = JACOBIAN_STEP
        J[:, k] = (_rhs_vector(0.0, y + step, params) - _rhs_vector(0.0, y - step, params)) / (2 * JACOBIAN_STEP)
    return J


def stability_eigenvalues(state: MeanFieldState, params: ModelParams) -> np.ndarray:
    """Eigenvalues of the linearisation restricted to the sphere tangent space."""
    y = state.to_vector()
    P = _tangent_projector(state.m)
    return np.linalg.eigvals(P.T @ _jacobian(y, params) @ P)


def _make_fixed_point(y: np.ndarray, params: ModelParams) -> FixedPoint:
    state = MeanFieldState.from_vector(y)
    eigenvalues = stability_eigenvalues(state, params)
    stable = bool(np.all(eigenvalues.real < STABILITY_THRESHOLD))
    return FixedPoint(
        state=state,
        stability=Stability.STABLE if stable else Stability.UNSTABLE,
        eigenvalues=eigenvalues,
        residual=float(np.max(np.abs(_rhs_vector(0.0, y, params)))),
    )


def find_fixed_points(params: ModelParams) -> list[FixedPoint]:
    """All fixed points reachable from a deterministic multi-start grid.

    Each start is polished by Levenberg-Marquardt on the spherical
    parameters (θ, φ, Re β, Im β); roots whose residual exceeds 1e-10 are
    dropped and duplicates merged. The normal state is always included.
    """
    roots: list[np.ndarray] = [MeanFieldState.normal().to_vector()]

    def residual(x: np.ndarray) -> np.ndarray:
        return _rhs_vector(0.0, _sphere_to_vector(x), params)

    for x0 in _start_grid(params):
        fit = least_squares(residual, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=4000)
        y = _sphere_to_vector(fit.x)
        if np.max(np.abs(_rhs_vector(0.0, y, params))) > ROOT_RESIDUAL_MAX:
            continue
        if all(np.linalg.norm(y - known) > DUPLICATE_DISTANCE for known in roots):
            roots.append(y)

    points = [_make_fixed_point(y, params) for y in roots]
    logger.debug("Found %d fixed points (%d stable) at g+=%.4f g-=%.4f",
                 len(points), sum(p.stable for p in points), params.g_plus, params.g_minus)
    return points


def classify_phase(params: ModelParams, fixed_points: list[FixedPoint] | None = None) -> PhaseLabel:
    """Normal / Superradiant / Bistable from which fixed points are stable; NonStationary if none is."""
    points = fixed_points if fixed_points is not None else find_fixed_points(params)
    normal_stable = any(p.stable and p.is_normal for p in points)
    sr_stable = any(p.stable and p.is_superradiant for p in points)
    if normal_stable and sr_stable:
        return PhaseLabel.BISTABLE
    if normal_stable:
        return PhaseLabel.NORMAL
    if sr_stable:
        return PhaseLabel.SUPERRADIANT
    return PhaseLabel.NON_STATIONARY


def _has_stable_superradiant(params: ModelParams) -> bool:
    return any(p.stable and p.is_superradiant for p in find_fixed_points(params))


def detect_critical_coupling(
    params: ModelParams,
    lo: float = 0.0,
    hi: float | None = None,
    rtol: float = 1e-4,
) -> float:
    """Bisect the balanced coupling 2ḡ for the onset of a stable superradiant root.

    Only ω_a, ω_c, κ and N of ``params`` are used.

    Raises:
        NumericalError: If no superradiant root appears up to 2ḡ = 64.
    """
    def at(coupling: float) -> ModelParams:
        return ModelParams.balanced(params.N, params.omega_a, params.omega_c, params.kappa, coupling)

    if hi is None:
        hi = 1.0
        while not _has_stable_superradiant(at(hi)):
            hi *= 2.0
            if hi > 64.0:
                raise NumericalError("no stable superradiant root found below 2g = 64")
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if _has_stable_superradiant(at(mid)):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def phase_diagram(
    params: ModelParams,
    g_minus_values: np.ndarray,
    g_plus_values: np.ndarray,
) -> list[PhaseRow]:
    """Classify every (g₋, g₊) grid point, row-major in g₋."""
    rows = []
    for g_minus, g_plus in itertools.product(g_minus_values, g_plus_values):
        point = params.replace(g_minus=float(g_minus), g_plus=float(g_plus))
        fixed = find_fixed_points(point)
        rows.append(PhaseRow(
            g_minus=float(g_minus),
            g_plus=float(g_plus),
            label=classify_phase(point, fixed),
            stable_points=[p.state for p in fixed if p.stable],
        ))
    logger.info("Phase diagram: %d points classified", len(rows))
    return rows


def superradiant_seed(params: ModelParams) -> MeanFieldState:
    """The superradiant fixed point with m_x > 0 (stable ones preferred).

    Raises:
        ModelDomainError: If the parameters have no superradiant fixed point.
    """
    candidates = [p for p in find_fixed_points(params) if p.is_superradiant and p.state.m[0] > 0]
    if not candidates:
        raise ModelDomainError(
            f"no superradiant fixed point at g+={params.g_plus}, g-={params.g_minus}"
        )
    candidates.sort(key=lambda p: (not p.stable, -p.state.m[0]))
    return candidates[0].state
