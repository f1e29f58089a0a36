"""Collective spin algebra on the symmetric Dicke ladder.

Every vector and matrix uses the Dicke basis |j, m>, j = N/2, ordered by
descending m: index k = j - m runs from 0 (m = j) to N (m = -j).
Half-integer m never appears as a float key; the index k is used instead.
"""

import dataclasses
import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.linalg import expm
from scipy.special import gammaln

from app.services.errors import ModelDomainError

logger = logging.getLogger(__name__)

# Dense matrix exponential is only used as a cross-check below this size
DENSE_EXPM_MAX_N = 64


@dataclass(frozen=True)
class ModelParams:
    """Constants of the (un)balanced open Dicke model, in units of a reference frequency (ħ = 1).

    H = ω_a Sz + (1/√N)(g₋ S⁻a† + g₊ S⁺a† + h.c.) + ω_c a†a, cavity decay κ.
    """

    N: int
    omega_a: float = 1.0
    omega_c: float = 1.0
    kappa: float = 0.0
    g_plus: float = 0.0
    g_minus: float = 0.0

    def __post_init__(self):
        if isinstance(self.N, bool) or int(self.N) != self.N or self.N < 1:
            raise ModelDomainError(f"N must be a positive integer, got {self.N!r}")
        object.__setattr__(self, "N", int(self.N))
        if self.kappa < 0:
            raise ModelDomainError(f"kappa must be nonnegative, got {self.kappa}")
        if self.g_plus < 0 or self.g_minus < 0:
            raise ModelDomainError(
                f"couplings must be nonnegative, got g_plus={self.g_plus}, g_minus={self.g_minus}"
            )

    @classmethod
    def balanced(cls, N: int, omega_a: float, omega_c: float, kappa: float, coupling: float) -> "ModelParams":
        """Balanced model with total coupling ``coupling`` = 2ḡ (so g₊ = g₋ = coupling/2)."""
        return cls(N=N, omega_a=omega_a, omega_c=omega_c, kappa=kappa,
                   g_plus=coupling / 2, g_minus=coupling / 2)

    @property
    def g_bar(self) -> float:
        return 0.5 * (self.g_plus + self.g_minus)

    @property
    def delta_g(self) -> float:
        return 0.5 * (self.g_minus - self.g_plus)

    @property
    def j(self) -> float:
        return 0.5 * self.N

    @property
    def dimension(self) -> int:
        return self.N + 1

    @property
    def is_balanced(self) -> bool:
        return self.delta_g == 0

    @property
    def is_tavis_cummings(self) -> bool:
        return self.g_plus == 0

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class SpinOperatorSet:
    """Sparse collective spin operators for one atom number."""

    dimension: int
    Sx: sp.csr_matrix
    Sy: sp.csr_matrix
    Sz: sp.csr_matrix
    Sp: sp.csr_matrix
    Sm: sp.csr_matrix
    L: sp.csr_matrix

    @property
    def N(self) -> int:
        return self.dimension - 1


@dataclass(frozen=True, eq=False)
class SpinState:
    """Pure state of the collective spin, amplitudes ordered m = j ... -j."""

    amplitudes: np.ndarray

    @property
    def N(self) -> int:
        return self.amplitudes.shape[0] - 1

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def projector(self) -> np.ndarray:
        return np.outer(self.amplitudes, self.amplitudes.conj())


def _check_atom_number(N) -> int:
    if isinstance(N, bool) or int(N) != N or N < 1:
        raise ModelDomainError(f"N must be a positive integer, got {N!r}")
    return int(N)


@lru_cache(maxsize=32)
def _ladder(N: int) -> tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix]:
    """Sz, S+, S- for spin N/2 (cached, read-only)."""
    k = np.arange(N + 1)
    # m = N/2 - k; S-|j,m> = sqrt((j+m)(j-m+1)) |j,m-1> = sqrt((N-k)(k+1)) |index k+1>
    lower = np.sqrt((N - k[:-1]) * (k[:-1] + 1.0))
    Sm = sp.diags(lower.astype(complex), offsets=-1, shape=(N + 1, N + 1), format="csr")
    Sp = Sm.T.tocsr()
    Sz = sp.diags((0.5 * N - k).astype(complex), offsets=0, format="csr")
    return Sz, Sp, Sm


def build_spin_operators(params: ModelParams | int) -> SpinOperatorSet:
    """Build the collective spin operators and the coupling operator L = Sx - i(Δg/ḡ)Sy.

    Args:
        params: Model parameters, or a bare atom number (then L = Sx).

    Raises:
        ModelDomainError: If the atom number is not a positive integer.
    """
    if isinstance(params, ModelParams):
        N = params.N
        # ḡ = 0 forces g₊ = g₋ = 0, hence Δg = 0 and L reduces to Sx
        ratio = params.delta_g / params.g_bar if params.g_bar > 0 else 0.0
    else:
        N = _check_atom_number(params)
        ratio = 0.0

    Sz, Sp, Sm = _ladder(N)
    Sx = ((Sp + Sm) * 0.5).tocsr()
    Sy = ((Sp - Sm) * (-0.5j)).tocsr()
    L = (Sx - 1j * ratio * Sy).tocsr()
    return SpinOperatorSet(dimension=N + 1, Sx=Sx, Sy=Sy, Sz=Sz, Sp=Sp, Sm=Sm, L=L)


def spin_coherent_state(N: int, theta: float, phi: float) -> SpinState:
    """|θ, φ> = exp((θe^{iφ}S⁻ − θe^{−iφ}S⁺)/2)|j, j> from the closed-form binomial amplitudes.

    The generator is a rotation by θ about (−sin φ, cos φ, 0), so
    <S> = (N/2)(sin θ cos φ, sin θ sin φ, cos θ).
    """
    N = _check_atom_number(N)
    k = np.arange(N + 1)
    c, s = np.cos(0.5 * theta), np.sin(0.5 * theta)

    log_binom = 0.5 * (gammaln(N + 1) - gammaln(k + 1) - gammaln(N - k + 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        log_c = np.log(abs(c))
        log_s = np.log(abs(s))
        # 0 * log(0) must vanish: the pole states have exactly one nonzero amplitude
        pow_c = np.where(N - k == 0, 0.0, (N - k) * log_c)
        pow_s = np.where(k == 0, 0.0, k * log_s)
    magnitude = np.exp(log_binom + pow_c + pow_s)
    sign = np.sign(c) ** (N - k) * np.sign(s) ** k
    amplitudes = magnitude * sign * np.exp(1j * phi * k)

    norm = np.linalg.norm(amplitudes)
    return SpinState(amplitudes=amplitudes / norm)


def spin_coherent_state_dense(N: int, theta: float, phi: float) -> SpinState:
    """Same state through a dense matrix exponential (cross-check for N ≤ 64)."""
    N = _check_atom_number(N)
    if N > DENSE_EXPM_MAX_N:
        raise ModelDomainError(f"dense construction limited to N <= {DENSE_EXPM_MAX_N}, got {N}")
    _, Sp, Sm = _ladder(N)
    generator = 0.5 * theta * (np.exp(1j * phi) * Sm.toarray() - np.exp(-1j * phi) * Sp.toarray())
    top = np.zeros(N + 1, dtype=complex)
    top[0] = 1.0
    return SpinState(amplitudes=expm(generator) @ top)


def dicke_index(N: int, m) -> int:
    """Index k = j - m of |j, m>; ``m`` may be an int, float or Fraction."""
    N = _check_atom_number(N)
    two_m = int(round(2 * float(m)))
    if abs(2 * float(m) - two_m) > 1e-9:
        raise ModelDomainError(f"m must be a multiple of 1/2, got {m!r}")
    if abs(two_m) > N or (N - two_m) % 2:
        raise ModelDomainError(f"m={m} is not in {{-j, ..., j}} for N={N}")
    return (N - two_m) // 2


def dicke_state(N: int, m) -> SpinState:
    """Basis state |j, m> as a unit vector at index j - m."""
    index = dicke_index(N, m)
    amplitudes = np.zeros(N + 1, dtype=complex)
    amplitudes[index] = 1.0
    return SpinState(amplitudes=amplitudes)


def coherent_angles(m: np.ndarray) -> tuple[float, float]:
    """Polar and azimuthal angle of a magnetisation vector."""
    m = np.asarray(m, dtype=float)
    length = np.linalg.norm(m)
    if length == 0:
        raise ModelDomainError("direction of a zero magnetisation is undefined")
    theta = float(np.arccos(np.clip(m[2] / length, -1.0, 1.0)))
    phi = float(np.arctan2(m[1], m[0]))
    return theta, phi


def expectation(op: sp.spmatrix | np.ndarray, state: SpinState | np.ndarray) -> complex:
    """<op> in a pure state (vector) or a density matrix."""
    data = state.amplitudes if isinstance(state, SpinState) else np.asarray(state)
    if data.ndim == 1:
        return complex(np.vdot(data, op @ data))
    return complex(np.trace(op @ data))


def spin_moments(state: SpinState | np.ndarray, ops: SpinOperatorSet | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean spin vector and symmetrised second moments <{S_i, S_j}>/2.

    Returns:
        Tuple of (3-vector of <S_i>, 3x3 real symmetric matrix).
    """
    data = state.amplitudes if isinstance(state, SpinState) else np.asarray(state)
    if ops is None:
        ops = build_spin_operators(data.shape[0] - 1)
    comps = (ops.Sx, ops.Sy, ops.Sz)
    mean = np.array([expectation(op, data).real for op in comps])
    second = np.empty((3, 3))
    for i in range(3):
        for k in range(i, 3):
            sym = 0.5 * (comps[i] @ comps[k] + comps[k] @ comps[i])
            second[i, k] = second[k, i] = expectation(sym, data).real
    return mean, second
