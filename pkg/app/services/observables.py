"""Derived observables: spin-Q function, atom-field covariance, squeezing and negativity."""

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import trapezoid

from app.services.errors import ModelDomainError, NumericalError
from app.services.exact_solver import JointDensityMatrix, SpinDensityMatrix, joint_observables
from app.services.spin_algebra import SpinState, spin_coherent_state, spin_moments

logger = logging.getLogger(__name__)

MEAN_SPIN_MIN = 1e-9
Q_NORM_TOL = 1e-8


class DegenerateMeanSpin(NumericalError):
    """Raised when <S> vanishes and the squeezing direction is undefined."""


@dataclass(frozen=True, eq=False)
class QFunctionGrid:
    """Q(θ, φ) on a product grid.

    ``cos_weights`` holds Gauss-Legendre weights in cos θ for quadrature
    grids and is None for plotting grids.
    """

    theta: np.ndarray
    phi: np.ndarray
    values: np.ndarray | None = None
    cos_weights: np.ndarray | None = None

    def with_values(self, values: np.ndarray) -> "QFunctionGrid":
        return QFunctionGrid(theta=self.theta, phi=self.phi, values=values, cos_weights=self.cos_weights)

    def normalization(self, N: int) -> float:
        """((N+1)/4π)∫Q dΩ; exact on quadrature grids, trapezoidal otherwise."""
        if self.values is None:
            raise ModelDomainError("grid carries no values")
        if self.cos_weights is not None:
            phi_weight = 2 * np.pi / self.phi.size
            integral = phi_weight * np.sum(self.cos_weights[:, None] * self.values)
        else:
            phi_mean = self.values.mean(axis=1) * 2 * np.pi
            integral = trapezoid(phi_mean * np.sin(self.theta), self.theta)
        return float((N + 1) / (4 * np.pi) * integral)


def uniform_grid(n_theta: int = 181, n_phi: int = 360) -> QFunctionGrid:
    """Plotting grid: θ from 0 to π inclusive, φ uniform on [0, 2π)."""
    return QFunctionGrid(
        theta=np.linspace(0.0, np.pi, n_theta),
        phi=np.linspace(0.0, 2 * np.pi, n_phi, endpoint=False),
    )


def quadrature_grid(N: int) -> QFunctionGrid:
    """Grid on which the normalisation integral is exact for spin N/2.

    Q is a polynomial of degree N in cos θ times harmonics up to e^{±iNφ},
    so N+2 Gauss-Legendre nodes and 2N+2 uniform φ nodes suffice.
    """
    x, w = np.polynomial.legendre.leggauss(N + 2)
    order = np.argsort(-x)
    return QFunctionGrid(
        theta=np.arccos(x[order]),
        phi=np.linspace(0.0, 2 * np.pi, 2 * N + 2, endpoint=False),
        cos_weights=w[order],
    )


def _as_matrix(rho: SpinDensityMatrix | SpinState | np.ndarray) -> np.ndarray:
    if isinstance(rho, SpinDensityMatrix):
        return rho.rho
    if isinstance(rho, SpinState):
        return rho.projector()
    rho = np.asarray(rho, dtype=complex)
    return np.outer(rho, rho.conj()) if rho.ndim == 1 else rho


def spin_q_function(rho: SpinDensityMatrix | np.ndarray, grid: QFunctionGrid | None = None) -> QFunctionGrid:
    """Q(θ, φ) = <θ, φ|ρ|θ, φ> on ``grid`` (the exact quadrature grid by default)."""
    matrix = _as_matrix(rho)
    N = matrix.shape[0] - 1
    if grid is None:
        grid = quadrature_grid(N)

    k = np.arange(N + 1)
    phases = np.exp(1j * np.outer(grid.phi, k))
    values = np.empty((grid.theta.size, grid.phi.size))
    for row, theta in enumerate(grid.theta):
        coherent = spin_coherent_state(N, float(theta), 0.0).amplitudes[None, :] * phases
        values[row] = np.sum((coherent.conj() @ matrix) * coherent, axis=1).real

    result = grid.with_values(values)
    if grid.cos_weights is not None:
        norm = result.normalization(N)
        if abs(norm - 1.0) > Q_NORM_TOL:
            logger.warning("Q-function normalisation %.12f deviates from 1", norm)
    return result


def atom_field_covariance(rho_tot: JointDensityMatrix) -> complex:
    """C_af = <Sx a> − <Sx><a>; divide by N^{3/2} for the scaled value."""
    return complex(joint_observables(rho_tot)["c_af"])


def scaled_covariance(c_af: complex | np.ndarray, N: int):
    return c_af / N**1.5


@dataclass(frozen=True, eq=False)
class SqueezingResult:
    xi2: float
    e_perp: np.ndarray
    mean_spin: np.ndarray


def _tangent_basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if abs(n[2]) < 1.0 - 1e-12:
        e1 = np.cross([0.0, 0.0, 1.0], n)
    else:
        e1 = np.array([1.0, 0.0, 0.0]) - n[0] * n
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(n, e1)


def spin_squeezing(rho: SpinDensityMatrix | SpinState | np.ndarray) -> SqueezingResult:
    """ξ² = N λ_min / |<S>|², λ_min the smallest variance perpendicular to <S>.

    Raises:
        DegenerateMeanSpin: If |<S>| ≤ 1e-9.
    """
    matrix = _as_matrix(rho)
    N = matrix.shape[0] - 1
    mean, second = spin_moments(matrix)
    length = float(np.linalg.norm(mean))
    if length <= MEAN_SPIN_MIN:
        raise DegenerateMeanSpin(f"mean spin length {length:.3e} too small for a squeezing direction")

    cov = second - np.outer(mean, mean)
    e1, e2 = _tangent_basis(mean / length)
    basis = np.stack([e1, e2], axis=1)
    tangent_cov = basis.T @ cov @ basis
    eigenvalues, vectors = np.linalg.eigh(tangent_cov)
    if eigenvalues[1] - eigenvalues[0] < 1e-12 * max(1.0, abs(eigenvalues[1])):
        direction = e1
    else:
        direction = basis @ vectors[:, 0]
        pivot = np.flatnonzero(np.abs(direction) > 1e-12)[0]
        direction = direction * np.sign(direction[pivot])
    return SqueezingResult(xi2=float(N * eigenvalues[0] / length**2), e_perp=direction, mean_spin=mean)


# --- Clebsch-Gordan and negativity ---------------------------------------

def _doubled(value, name: str) -> int:
    twice = 2 * float(value)
    doubled = int(round(twice))
    if abs(twice - doubled) > 1e-9:
        raise ModelDomainError(f"{name}={value!r} is not a multiple of 1/2")
    return doubled


def _raise_amp(tj: int, tm: int) -> float:
    """<j, m+1|J+|j, m> from doubled quantum numbers."""
    return 0.5 * np.sqrt(max((tj - tm) * (tj + tm + 2), 0))


def _lower_amp(tj: int, tm: int) -> float:
    """<j, m-1|J-|j, m> from doubled quantum numbers."""
    return 0.5 * np.sqrt(max((tj + tm) * (tj - tm + 2), 0))


@lru_cache(maxsize=128)
def _coupled_columns(tj1: int, tj2: int, tJ: int) -> np.ndarray:
    """Coefficients <j1 m1; j2 M−m1|J M> for every M (rows, M = J … −J) and m1 (columns, m1 = j1 … −j1).

    The top row |J, J> solves J+|J, J> = 0 with the m1 = j1 coefficient
    positive; each lower row is one application of J- = j1- + j2- to the
    row above, divided by the J- matrix element.
    """
    d1 = tj1 + 1
    table = np.zeros((tJ + 1, d1))
    tm1 = tj1 - 2 * np.arange(d1)  # doubled m1 per column

    top = np.zeros(d1)
    top[0] = 1.0
    for col in range(1, d1):
        tm = int(tm1[col])
        if tJ - tm > tj2:  # m2 = J − m1 out of range
            break
        # c(m1) = −c(m1+1) a+(j2, J−m1−1) / a+(j1, m1)
        top[col] = -top[col - 1] * _raise_amp(tj2, tJ - tm - 2) / _raise_amp(tj1, tm)
    top /= np.linalg.norm(top)
    table[0] = top

    for row in range(1, tJ + 1):
        tM = tJ - 2 * (row - 1)  # doubled M of the previous row
        prev = table[row - 1]
        new = np.zeros(d1)
        for col in range(d1):
            tm = int(tm1[col])
            tm2 = tM - 2 - tm
            if abs(tm2) > tj2:
                continue
            value = prev[col] * _lower_amp(tj2, tm2 + 2)
            if col > 0:
                value += prev[col - 1] * _lower_amp(tj1, tm + 2)
            new[col] = value
        table[row] = new / _lower_amp(tJ, tM)
    return table


def clebsch_gordan(j1, j2, m1, m2, J, M) -> float:
    """<j1 m1; j2 m2|J M> in the Condon-Shortley convention; 0 when a selection rule fails.

    Raises:
        ModelDomainError: For negative spins, |m| > j or m not congruent to j.
    """
    tj1, tj2, tJ = _doubled(j1, "j1"), _doubled(j2, "j2"), _doubled(J, "J")
    tm1, tm2, tM = _doubled(m1, "m1"), _doubled(m2, "m2"), _doubled(M, "M")
    for tj, tm, name in ((tj1, tm1, "m1"), (tj2, tm2, "m2"), (tJ, tM, "M")):
        if tj < 0:
            raise ModelDomainError("angular momenta must be nonnegative")
        if abs(tm) > tj or (tj - tm) % 2:
            raise ModelDomainError(f"{name} is not a projection of its angular momentum")
    if tM != tm1 + tm2:
        return 0.0
    if tJ < abs(tj1 - tj2) or tJ > tj1 + tj2 or (tj1 + tj2 - tJ) % 2:
        return 0.0
    table = _coupled_columns(tj1, tj2, tJ)
    return float(table[(tJ - tM) // 2, (tj1 - tm1) // 2])


def _embedding(tj1: int, tj2: int) -> np.ndarray:
    """Isometry from the stretched multiplet J = j1 + j2 into the product space."""
    tJ = tj1 + tj2
    d1, d2 = tj1 + 1, tj2 + 1
    table = _coupled_columns(tj1, tj2, tJ)
    V = np.zeros((d1 * d2, tJ + 1))
    for row in range(tJ + 1):
        tM = tJ - 2 * row
        for col in range(d1):
            tm2 = tM - (tj1 - 2 * col)
            if abs(tm2) <= tj2:
                V[col * d2 + (tj2 - tm2) // 2, row] = table[row, col]
    return V


def split_negativity(rho: SpinDensityMatrix | np.ndarray, j1, j2, transpose_first: bool = False) -> float:
    """Negativity of the j1 ⊗ j2 split of a state on the spin j1 + j2 multiplet.

    The state is embedded with Clebsch-Gordan coefficients, one factor is
    partially transposed, and the absolute sum of negative eigenvalues is returned.
    """
    matrix = _as_matrix(rho)
    tj1, tj2 = _doubled(j1, "j1"), _doubled(j2, "j2")
    if matrix.shape[0] != tj1 + tj2 + 1:
        raise ModelDomainError(
            f"state dimension {matrix.shape[0]} does not match j1 + j2 = {(tj1 + tj2) / 2}"
        )
    d1, d2 = tj1 + 1, tj2 + 1
    V = _embedding(tj1, tj2)
    big = (V @ matrix @ V.T).reshape(d1, d2, d1, d2)
    axes = (2, 1, 0, 3) if transpose_first else (0, 3, 2, 1)
    pt = big.transpose(axes).reshape(d1 * d2, d1 * d2)
    eigenvalues = np.linalg.eigvalsh(0.5 * (pt + pt.conj().T))
    return float(-eigenvalues[eigenvalues < 0].sum())


def bipartite_negativity(rho: SpinDensityMatrix | np.ndarray, N: int) -> float:
    """Negativity between two equal groups of N/2 atoms (spins N/4 each).

    Raises:
        ModelDomainError: If N is not divisible by 4.
    """
    if N % 4:
        raise ModelDomainError(f"equal split into spins N/4 needs N divisible by 4, got {N}")
    return split_negativity(rho, N / 4, N / 4)
