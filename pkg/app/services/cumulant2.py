"""Second-order cumulant (Gaussian) closure of the open Dicke master equation.

Tracked moments (20 reals): s_i = <S_i>, α = <a>, A = <a²>, n = <a†a>,
c_j = <a S_j> and Σ_ij = <{S_i, S_j}>/2.

Derivation. With q = a + a†, p = i(a† − a), G = 2ḡ/√N and D = 2Δg/√N the
Hamiltonian reads H = ω_a Sz + G Sx q − D Sy p + ω_c a†a, so the spin sees
the operator-valued field B = (G q, −D p, ω_a) and dS/dt = B × S
(B commutes with S). The adjoint dissipator gives −κ per annihilator.

    ds_i/dt  = ε_ikl b_kl,   b_xl = 2G Re c_l,  b_yl = −2D Im c_l,  b_zl = ω_a s_l
    dα/dt    = −(iω_c + κ)α − iG s_x − D s_y
    dn/dt    = −2G Im c_x − 2D Re c_y − 2κ n
    dA/dt    = −2(iω_c + κ)A − 2iG c_x − 2D c_y
    dc_j/dt  = −(iω_c + κ)c_j − iG <Sx S_j> − D <Sy S_j> + ε_jkl <a B_k S_l>
    dΣ_ij/dt = ε_ikl <B_k Σ_lj> + ε_jkl <B_k Σ_il>

with <S_a S_b> = Σ_ab + (i/2)ε_abk s_k, <a q S> = <a²S> + <a†a S> + s,
<a p S> = i(<a†a S> + s − <a²S>), <q X> = 2 Re <a X>, <p X> = 2 Im <a X>.
Third moments are closed by <XYZ> ≈ <XY><Z> + <XZ><Y> + <YZ><X> − 2<X><Y><Z>:

    <a² S_l>    ≈ A s_l + 2α c_l − 2α² s_l
    <a†a S_l>   ≈ n s_l + α c_l* + α* c_l − 2|α|² s_l
    <a Σ_lj>    ≈ α Σ_lj + c_l s_j + c_j s_l − 2α s_l s_j

The closure is exact for product states, and with all second cumulants
set to zero the first moments obey the mean-field equations.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from app.services.exact_solver import JointDensityMatrix, JointOperators
from app.services.meanfield import IntegrationFailure, MeanFieldState
from app.services.spin_algebra import ModelParams, SpinState, spin_moments

logger = logging.getLogger(__name__)

BLOWUP_FACTOR = 1e6

_EPS = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    _EPS[_i, _j, _k] = 1.0
    _EPS[_i, _k, _j] = -1.0

_UPPER = np.triu_indices(3)


@dataclass(frozen=True, eq=False)
class MomentVector:
    s: np.ndarray
    alpha: complex
    a2: complex
    n: float
    c: np.ndarray
    sigma: np.ndarray

    @property
    def c_af(self) -> complex:
        """Atom-field covariance <Sx a> − <Sx><a>."""
        return complex(self.c[0] - self.alpha * self.s[0])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([
            self.s,
            [self.alpha.real, self.alpha.imag, self.a2.real, self.a2.imag, self.n],
            self.c.real, self.c.imag,
            self.sigma[_UPPER],
        ])

    @classmethod
    def from_vector(cls, y: np.ndarray) -> "MomentVector":
        sigma = np.zeros((3, 3))
        sigma[_UPPER] = y[14:20]
        sigma = sigma + np.triu(sigma, 1).T
        return cls(
            s=np.array(y[0:3], dtype=float),
            alpha=complex(y[3], y[4]),
            a2=complex(y[5], y[6]),
            n=float(y[7]),
            c=y[8:11] + 1j * y[11:14],
            sigma=sigma,
        )

    @classmethod
    def factorised(cls, state: MeanFieldState, N: int) -> "MomentVector":
        """Moments with every second cumulant zero, scaled from a mean-field state."""
        s = N * state.m
        alpha = np.sqrt(N) * state.beta
        return cls(s=s, alpha=alpha, a2=alpha**2, n=abs(alpha) ** 2, c=alpha * s, sigma=np.outer(s, s))

    def to_meanfield(self, N: int) -> MeanFieldState:
        return MeanFieldState(m=self.s / N, beta=self.alpha / np.sqrt(N))


@dataclass(frozen=True, eq=False)
class CumulantSeries:
    """Moment time series; truncated at the blow-up time when ``blown_up`` is set."""

    t: np.ndarray
    values: np.ndarray
    blown_up: bool

    def moment(self, index: int) -> MomentVector:
        return MomentVector.from_vector(self.values[index])

    @property
    def c_af(self) -> np.ndarray:
        alpha = self.values[:, 3] + 1j * self.values[:, 4]
        c_x = self.values[:, 8] + 1j * self.values[:, 11]
        return c_x - alpha * self.values[:, 0]


def moments_from_product_state(spin: SpinState, cavity_amplitude: complex = 0j) -> MomentVector:
    """Exact moments of spin ⊗ coherent cavity state (vacuum by default)."""
    s, sigma = spin_moments(spin)
    alpha = complex(cavity_amplitude)
    return MomentVector(s=s, alpha=alpha, a2=alpha**2, n=abs(alpha) ** 2, c=alpha * s, sigma=sigma)


def moments_from_joint(rho_tot: JointDensityMatrix) -> MomentVector:
    """Exact moments Tr(X ρ) of a joint matrix.

    Linear in ``rho``, so applied to dρ/dt it yields the exact moment derivatives.
    """
    ops = JointOperators(rho_tot.N, rho_tot.n_fock)
    a = ops.a
    S = [ops.Sx, ops.Sy, ops.Sz]
    rho = rho_tot.rho

    def tr(op) -> complex:
        return complex(np.trace(op @ rho))

    sigma = np.empty((3, 3))
    for i in range(3):
        for j in range(i, 3):
            sigma[i, j] = sigma[j, i] = tr(0.5 * (S[i] @ S[j] + S[j] @ S[i])).real
    return MomentVector(
        s=np.array([tr(op).real for op in S]),
        alpha=tr(a),
        a2=tr(a @ a),
        n=tr(ops.n).real,
        c=np.array([tr(a @ op) for op in S]),
        sigma=sigma,
    )


def cumulant_rhs(mv: MomentVector, params: ModelParams) -> MomentVector:
    """Closed equations of motion for the tracked moments (see module docstring)."""
    G = 2.0 * params.g_bar / np.sqrt(params.N)
    D = 2.0 * params.delta_g / np.sqrt(params.N)
    wa, wc, kappa = params.omega_a, params.omega_c, params.kappa
    damp = 1j * wc + kappa
    s, alpha, A, n, c, sigma = mv.s, mv.alpha, mv.a2, mv.n, mv.c, mv.sigma

    b = np.vstack([2 * G * c.real, -2 * D * c.imag, wa * s])
    s_dot = np.einsum("ikl,kl->i", _EPS, b)

    alpha_dot = -damp * alpha - 1j * G * s[0] - D * s[1]
    n_dot = -2 * G * c[0].imag - 2 * D * c[1].real - 2 * kappa * n
    a2_dot = -2 * damp * A - 2j * G * c[0] - 2 * D * c[1]

    # <S_a S_b> without symmetrisation
    ss = sigma + 0.5j * np.einsum("abk,k->ab", _EPS, s)
    aa_s = A * s + 2 * alpha * c - 2 * alpha**2 * s
    ada_s = n * s + alpha * c.conj() + np.conj(alpha) * c - 2 * abs(alpha) ** 2 * s
    a_q_s = aa_s + ada_s + s
    a_p_s = 1j * (ada_s + s - aa_s)
    a_b_s = np.vstack([G * a_q_s, -D * a_p_s, wa * c])
    c_dot = -damp * c - 1j * G * ss[0] - D * ss[1] + np.einsum("jkl,kl->j", _EPS, a_b_s)

    a_sigma = alpha * sigma + np.outer(c, s) + np.outer(s, c) - 2 * alpha * np.outer(s, s)
    b_sigma = np.stack([2 * G * a_sigma.real, -2 * D * a_sigma.imag, wa * sigma])
    half = np.einsum("ikl,klj->ij", _EPS, b_sigma)
    sigma_dot = half + half.T

    return MomentVector(s=s_dot, alpha=complex(alpha_dot), a2=complex(a2_dot), n=float(n_dot),
                        c=c_dot, sigma=sigma_dot)


def _rhs_vector(_t: float, y: np.ndarray, params: ModelParams) -> np.ndarray:
    return cumulant_rhs(MomentVector.from_vector(y), params).to_vector()


def evolve_cumulant(
    mv0: MomentVector,
    params: ModelParams,
    t_grid: np.ndarray,
    rtol: float = 1e-10,
    atol: float = 1e-12,
) -> CumulantSeries:
    """Integrate the closed moment equations on ``t_grid``.

    Integration stops early, with ``blown_up`` set, once any moment exceeds
    1e6·N in magnitude; the series then ends at the last grid time reached.

    Raises:
        IntegrationFailure: If the integrator itself fails.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    y0 = mv0.to_vector()
    if t_grid.size == 1:
        return CumulantSeries(t=t_grid, values=y0[None, :], blown_up=False)

    limit = BLOWUP_FACTOR * params.N

    def blowup(_t, y, _params):
        return limit - np.max(np.abs(y))

    blowup.terminal = True
    blowup.direction = -1

    sol = solve_ivp(
        _rhs_vector, (t_grid[0], t_grid[-1]), y0,
        method="DOP853", t_eval=t_grid, rtol=rtol, atol=atol,
        events=blowup, args=(params,),
    )
    if sol.status == -1:
        raise IntegrationFailure(f"cumulant integration failed: {sol.message}")
    blown_up = sol.status == 1
    if blown_up:
        logger.warning("Cumulant closure diverged at t=%.3f (N=%d); series truncated",
                       float(sol.t_events[0][0]), params.N)
    return CumulantSeries(t=sol.t, values=sol.y.T, blown_up=blown_up)
