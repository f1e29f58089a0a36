"""Orchestration of the command-line subcommands.

Each pipeline writes columnar text files into the output directory and a
``manifest.json`` holding the resolved configuration, the seed, the code
version, the configuration hash and the wall time. Data files depend
only on (configuration, seed); the worker count never changes them.
"""

import dataclasses
import logging
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from app import __version__
from app.config import get_config
from app.services.cumulant2 import MomentVector, evolve_cumulant, moments_from_product_state
from app.services.ensemble import run_ensemble
from app.services.errors import ModelDomainError
from app.services.exact_solver import (
    SpinDensityMatrix,
    evolve_exact,
    evolve_exact_adaptive,
    joint_observables,
    joint_product_state,
    reduce_to_spin,
)
from app.services.meanfield import (
    MeanFieldState,
    MeanFieldTrajectory,
    PhaseLabel,
    evolve_meanfield,
    find_fixed_points,
    phase_diagram,
    superradiant_seed,
)
from app.services.nuhops import TrajectoryRecord, ensemble_cavity_moments
from app.services.observables import (
    DegenerateMeanSpin,
    bipartite_negativity,
    quadrature_grid,
    scaled_covariance,
    spin_q_function,
    spin_squeezing,
    uniform_grid,
)
from app.services.run_config import ConfigError, RunConfig
from app.services.spin_algebra import (
    ModelParams,
    SpinState,
    coherent_angles,
    dicke_state,
    spin_coherent_state,
)
from app.services.tunneling import (
    NonIdentifiable,
    OccupationCurves,
    RateFit,
    classify_state,
    cut_from_meanfield,
    extrapolated_normal_population,
    finite_time_occupation,
    fit_exponents,
    fit_rates,
    occupation_curves,
)
from app.utils.output import manifest_hash, write_json, write_table

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "phase-diagram", "rates", "validate", "q-function")

PHASE_CODES = {
    PhaseLabel.NORMAL: 0,
    PhaseLabel.SUPERRADIANT: 1,
    PhaseLabel.BISTABLE: 2,
    PhaseLabel.NON_STATIONARY: 3,
}


@dataclass
class RunResult:
    command: str
    out_dir: Path
    files: list[Path] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)


@dataclass
class _Context:
    cfg: RunConfig
    params: ModelParams
    out_dir: Path
    workers: int
    hash_value: str
    files: list[Path] = field(default_factory=list)

    def table(self, name: str, columns: dict, comments: list[str] | None = None) -> None:
        self.files.append(write_table(self.out_dir / name, columns, self.hash_value, comments))


def resolve_workers(cfg: RunConfig, explicit: int | None = None) -> int:
    """Worker count: explicit flag, then the run config, then the service default."""
    if explicit is not None:
        return explicit
    if cfg.workers is not None:
        return cfg.workers
    return get_config().default_workers


def config_hash(cfg: RunConfig, command: str) -> str:
    """Hash of everything that determines the data; execution-only keys are excluded."""
    canonical = dataclasses.replace(cfg, workers=None, output_dir=RunConfig.output_dir)
    return manifest_hash(f"command = {command}\n{canonical.to_text()}")


# --- initial states ---------------------------------------------------------------

def initial_spin_state(cfg: RunConfig, params: ModelParams) -> SpinState:
    N = params.N
    if cfg.initial_state == "coherent":
        return spin_coherent_state(N, cfg.initial_theta, cfg.initial_phi)
    if cfg.initial_state == "dicke":
        return dicke_state(N, cfg.initial_m)
    if cfg.initial_state == "normal":
        return dicke_state(N, -N / 2)
    theta, phi = coherent_angles(superradiant_seed(params).m)
    return spin_coherent_state(N, theta, phi)


def initial_meanfield_state(cfg: RunConfig, params: ModelParams) -> MeanFieldState:
    if cfg.initial_state == "coherent":
        return MeanFieldState.from_angles(cfg.initial_theta, cfg.initial_phi)
    if cfg.initial_state == "dicke":
        return MeanFieldState(m=np.array([0.0, 0.0, cfg.initial_m / params.N]), beta=0j)
    if cfg.initial_state == "normal":
        return MeanFieldState.normal()
    return superradiant_seed(params)


def initial_moments(cfg: RunConfig, params: ModelParams) -> MomentVector:
    if cfg.initial_state == "superradiant":
        seed = superradiant_seed(params)
        theta, phi = coherent_angles(seed.m)
        spin = spin_coherent_state(params.N, theta, phi)
        return moments_from_product_state(spin, np.sqrt(params.N) * seed.beta)
    return moments_from_product_state(initial_spin_state(cfg, params))


def meanfield_deviation(
    t: np.ndarray,
    spin_means: np.ndarray,
    N: int,
    trajectory: MeanFieldTrajectory,
) -> float:
    """Time average of |<S>/N − m_MF| over ``t``.

    Args:
        t: Sample times shared with ``trajectory``.
        spin_means: Array (len(t), 3) of <S>.
        N: Atom number.
        trajectory: Mean-field solution on the same times.
    """
    t = np.asarray(t, dtype=float)
    if trajectory.t.shape != t.shape or not np.allclose(trajectory.t, t):
        raise ModelDomainError("mean-field trajectory must share the sample times")
    distance = np.linalg.norm(np.asarray(spin_means) / N - trajectory.m, axis=1)
    if t.size == 1:
        return float(distance[0])
    return float(trapezoid(distance, t) / (t[-1] - t[0]))


# --- snapshot observables -------------------------------------------------------------

def _squeezing_or_nan(rho: SpinDensityMatrix) -> float:
    try:
        return spin_squeezing(rho).xi2
    except DegenerateMeanSpin:
        return float("nan")


def _negativity_or_nan(rho: SpinDensityMatrix, N: int) -> float:
    return bipartite_negativity(rho, N) if N % 4 == 0 else float("nan")


def _snapshot_columns(times: np.ndarray, states: list[SpinDensityMatrix], N: int) -> dict:
    grid = quadrature_grid(N)
    return {
        "t": np.asarray(times, dtype=float),
        "xi2": np.array([_squeezing_or_nan(rho) for rho in states]),
        "negativity": np.array([_negativity_or_nan(rho, N) for rho in states]),
        "q_norm": np.array([spin_q_function(rho, grid).normalization(N) for rho in states]),
    }


def _with_scaled_covariance(columns: dict, N: int) -> dict:
    """Append C_af/N^{3/2} right after C_af when it is requested."""
    if "c_af" not in columns:
        return columns
    out = {}
    for name, values in columns.items():
        out[name] = values
        if name == "c_af":
            out["c_af_scaled"] = scaled_covariance(values, N)
    return out


def _nearest_indices(t_grid: np.ndarray, times) -> list[int]:
    return [int(np.argmin(np.abs(t_grid - ts))) for ts in times]


# --- simulate ------------------------------------------------------------------------

def _simulate_meanfield(ctx: _Context) -> dict:
    cfg, params = ctx.cfg, ctx.params
    N = params.N
    trajectory = evolve_meanfield(initial_meanfield_state(cfg, params), params, cfg.time_grid())
    available = {
        "sx": N * trajectory.m[:, 0],
        "sy": N * trajectory.m[:, 1],
        "sz": N * trajectory.m[:, 2],
        "a": np.sqrt(N) * trajectory.beta,
        "n": N * np.abs(trajectory.beta) ** 2,
    }
    ctx.table("timeseries.txt", {"t": trajectory.t, **{k: available[k] for k in cfg.observables}})
    final = trajectory.state_at(-1)
    return {"final_m": final.m.tolist(), "final_beta": [final.beta.real, final.beta.imag]}


def _simulate_cumulant(ctx: _Context) -> dict:
    cfg, params = ctx.cfg, ctx.params
    series = evolve_cumulant(initial_moments(cfg, params), params, cfg.time_grid())
    v = series.values
    available = {
        "sx": v[:, 0],
        "sy": v[:, 1],
        "sz": v[:, 2],
        "a": v[:, 3] + 1j * v[:, 4],
        "n": v[:, 7],
        "c_af": series.c_af,
    }
    columns = {"t": series.t, **{k: available[k] for k in cfg.observables}}
    ctx.table("timeseries.txt", _with_scaled_covariance(columns, params.N))
    return {"blown_up": series.blown_up, "t_last": float(series.t[-1]), "final_s": v[-1, :3].tolist()}


def _evolve_exact(cfg: RunConfig, params: ModelParams, t_grid: np.ndarray):
    spin = initial_spin_state(cfg, params)
    integrator = cfg.integrator_config()
    if cfg.exact_n_fock > 0:
        return evolve_exact(joint_product_state(spin, cfg.exact_n_fock), params, t_grid, integrator)
    return evolve_exact_adaptive(spin, params, t_grid, integrator)


def _simulate_exact(ctx: _Context) -> dict:
    cfg, params = ctx.cfg, ctx.params
    N = params.N
    if "negativity" in cfg.observables and N % 4:
        raise ConfigError([f"observables: negativity needs model.N divisible by 4, got {N}"])
    t_grid = cfg.time_grid()
    states = _evolve_exact(cfg, params, t_grid)
    rows = [joint_observables(rho) for rho in states]
    columns = {"t": t_grid}
    for name in cfg.observables:
        if name == "xi2":
            columns[name] = np.array([_squeezing_or_nan(reduce_to_spin(rho)) for rho in states])
        elif name == "negativity":
            columns[name] = np.array([bipartite_negativity(reduce_to_spin(rho), N) for rho in states])
        else:
            columns[name] = np.array([row[name] for row in rows])
    ctx.table("timeseries.txt", _with_scaled_covariance(columns, N))

    if cfg.snapshots_times:
        picks = _nearest_indices(t_grid, cfg.snapshots_times)
        ctx.table("snapshots.txt", _snapshot_columns(
            t_grid[picks], [reduce_to_spin(states[i]) for i in picks], N))
    return {"n_fock": states[0].n_fock, "final": {k: [complex(v).real, complex(v).imag] for k, v in rows[-1].items()}}


def _trajectory_writer(ctx: _Context) -> Callable[[TrajectoryRecord], None]:
    def write(record: TrajectoryRecord) -> None:
        ctx.table(f"trajectories/traj_{record.traj_index:06d}.txt", {
            "t": record.t,
            "sx": record.sx,
            "sy": record.sy,
            "sz": record.sz,
            "L": record.L,
            "mu": record.mu,
            "vacuum_norm2": record.vacuum_norm2,
            "window_lo": record.window_lo,
            "window_hi": record.window_hi,
            "fock_levels": record.fock_levels,
        })
    return write


def _simulate_hops(ctx: _Context) -> dict:
    cfg, params = ctx.cfg, ctx.params
    on_record = _trajectory_writer(ctx) if cfg.hops_stream_trajectories else None
    ensemble = run_ensemble(initial_spin_state(cfg, params), params, cfg.hops_config(),
                            workers=ctx.workers, on_record=on_record)
    average = ensemble.average
    cavity = ensemble_cavity_moments(ensemble.records, params)

    columns = {"t": average.t}
    for name in cfg.observables:
        if name == "a":
            columns["a"] = cavity.a
            columns["a_se"] = cavity.a_se
        elif name == "c_af":
            columns["c_af"] = cavity.c_af
        else:
            columns[name] = average.mean[name]
            columns[f"{name}_se"] = average.se[name]
    comments = [f"n_traj={average.n_traj} n_failed={average.n_failed}"]
    if "c_af" in cfg.observables:
        comments.append("c_af: heuristic trajectory-level estimate")
    ctx.table("ensemble.txt", _with_scaled_covariance(columns, params.N), comments=comments)

    if average.snapshot_times.size:
        ctx.table("snapshots.txt", _snapshot_columns(average.snapshot_times, average.rho, params.N))
    return {
        "n_traj": average.n_traj,
        "n_failed": average.n_failed,
        "final_mean": {k: float(v[-1]) for k, v in average.mean.items()},
        "final_se": {k: float(v[-1]) for k, v in average.se.items()},
    }


_SIMULATORS = {
    "meanfield": _simulate_meanfield,
    "cumulant": _simulate_cumulant,
    "exact": _simulate_exact,
    "hops": _simulate_hops,
}


def _simulate(ctx: _Context) -> dict:
    return _SIMULATORS[ctx.cfg.solver](ctx)


# --- phase diagram -------------------------------------------------------------------------

def _phase_diagram(ctx: _Context) -> dict:
    cfg, params = ctx.cfg, ctx.params
    if not cfg.phase_g_minus or not cfg.phase_g_plus:
        raise ConfigError(["phase-diagram needs phase.g_minus and phase.g_plus"])
    rows = phase_diagram(params, np.array(cfg.phase_g_minus), np.array(cfg.phase_g_plus))
    columns = {
        "g_minus": np.array([r.g_minus for r in rows]),
        "g_plus": np.array([r.g_plus for r in rows]),
        "label": np.array([PHASE_CODES[r.label] for r in rows]),
        "n_stable": np.array([len(r.stable_points) for r in rows]),
    }
    if cfg.phase_hops_time > 0:
        hops_cfg = cfg.hops_config(t_end=cfg.phase_hops_time)
        normal = dicke_state(params.N, -params.N / 2)
        occupation = [
            finite_time_occupation(normal, params.replace(g_minus=r.g_minus, g_plus=r.g_plus), hops_cfg,
                                   cfg.phase_hops_time, cfg.rates_window_time, ctx.workers)
            for r in rows
        ]
        columns["p_s"] = np.array([p for p, _ in occupation])
        columns["p_s_se"] = np.array([se for _, se in occupation])
    legend = ", ".join(f"{code}={label.value}" for label, code in PHASE_CODES.items())
    ctx.table("phase_diagram.txt", columns, comments=[f"label: {legend}"])
    counts = {label.value: sum(r.label is label for r in rows) for label in PHASE_CODES}
    return {"points": len(rows), "labels": counts}


# --- rates -----------------------------------------------------------------------------------

def _cell_seed(base_seed: int, *keys: int) -> int:
    seq = np.random.SeedSequence(base_seed, spawn_key=keys)
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def _occupation(ctx: _Context, psi0: SpinState, params: ModelParams, seed: int, fixed) -> OccupationCurves:
    hops_cfg = dataclasses.replace(ctx.cfg.hops_config(), base_seed=seed, snapshot_times=())
    run = run_ensemble(psi0, params, hops_cfg, workers=ctx.workers)
    labels = np.stack([classify_state(r, fixed, ctx.cfg.rates_window_time) for r in run.records])
    return occupation_curves(labels, run.records[0].t)


def _rates(ctx: _Context) -> dict:
    cfg = ctx.cfg
    problems = []
    if len(set(cfg.rates_n)) < 3:
        problems.append("rates needs at least three distinct values in rates.N")
    if not cfg.rates_s:
        problems.append("rates needs at least one cut position in rates.s")
    if problems:
        raise ConfigError(problems)

    cut = cut_from_meanfield(cfg.rates_g_minus, ctx.params)
    entries = []
    table = {k: [] for k in ("s", "N", "gamma_ns", "gamma_ns_se", "gamma_sn", "gamma_sn_se",
                             "residual_norm", "identifiable")}
    for i, s in enumerate(cfg.rates_s):
        for k, N in enumerate(cfg.rates_n):
            params = cut.params_at(s, N)
            fixed = find_fixed_points(params)
            theta, phi = coherent_angles(superradiant_seed(params).m)
            logger.info("Rates cell s=%.3f N=%d (g+=%.4f)", s, N, params.g_plus)
            normal = _occupation(ctx, dicke_state(N, -N / 2), params, _cell_seed(cfg.seed, i, k, 0), fixed)
            sr = _occupation(ctx, spin_coherent_state(N, theta, phi), params, _cell_seed(cfg.seed, i, k, 1), fixed)
            ctx.table(f"occupation_s{i:02d}_N{N}.txt", {
                "t": normal.t, "p_s_from_normal": normal.p_s, "se_from_normal": normal.se,
                "p_n_from_superradiant": sr.p_n, "se_from_superradiant": sr.se,
            }, comments=[f"s={s!r} N={N}"])

            try:
                fit = fit_rates(normal, sr)
            except NonIdentifiable as e:
                logger.warning("Rates at s=%.3f N=%d not identifiable: %s", s, N, e)
                fit = e
            entries.append((s, N, fit))

            table["s"].append(s)
            table["N"].append(N)
            if isinstance(fit, RateFit):
                values = (fit.gamma_ns, fit.sigma_ns, fit.gamma_sn, fit.sigma_sn, fit.residual_norm, 1)
            else:
                bounds = fit.upper_bounds
                values = (bounds.get("gamma_ns", np.nan), np.nan, bounds.get("gamma_sn", np.nan),
                          np.nan, np.nan, 0)
            for key, value in zip(list(table)[2:], values):
                table[key].append(value)

    ctx.table("rates.txt", {k: np.array(v, dtype=float) for k, v in table.items()},
              comments=["non-identifiable rows carry one-event upper bounds"])
    exponents = fit_exponents(entries)
    p_n_limit = np.array([
        extrapolated_normal_population(a_ns, r_ns, a_sn, r_sn, np.inf)
        for a_ns, r_ns, a_sn, r_sn in zip(exponents.A_ns, exponents.r_ns, exponents.A_sn, exponents.r_sn)
    ])
    ctx.table("exponents.txt", {
        "s": exponents.s,
        "A_ns": exponents.A_ns, "r_ns": exponents.r_ns, "r_ns_se": exponents.r_ns_se,
        "A_sn": exponents.A_sn, "r_sn": exponents.r_sn, "r_sn_se": exponents.r_sn_se,
        "p_n_limit": p_n_limit,
    }, comments=[f"s_c={exponents.s_c!r}"])
    return {
        "s_c": exponents.s_c,
        "cut": {"g_minus": cut.g_minus, "g_plus_sr": cut.g_plus_sr, "g_plus_np": cut.g_plus_np},
        "non_identifiable": sum(not isinstance(fit, RateFit) for _, _, fit in entries),
    }


# --- validate / q-function ----------------------------------------------------------------------

def _validate(ctx: _Context) -> dict:
    from app.services.validation import ValidationFailure, run_suite

    results = run_suite(ctx.cfg, workers=ctx.workers)
    ctx.table("validation.txt", {
        "check": np.arange(len(results)),
        "passed": np.array([r.passed for r in results], dtype=float),
        "value": np.array([r.value for r in results]),
        "tolerance": np.array([r.tolerance for r in results]),
    }, comments=[f"{i}: {r.name}" for i, r in enumerate(results)])
    failed = [r.name for r in results if not r.passed]
    summary = {"checks": len(results), "failed": failed}
    if failed:
        raise ValidationFailure(failed, summary)
    return summary


def _q_function(ctx: _Context) -> dict:
    cfg, params = ctx.cfg, ctx.params
    problems = []
    if not cfg.snapshots_times:
        problems.append("q-function needs snapshots.times")
    if cfg.solver not in ("exact", "hops"):
        problems.append(f"q-function needs solver exact or hops, got {cfg.solver}")
    if problems:
        raise ConfigError(problems)

    if cfg.solver == "exact":
        t_grid = cfg.time_grid()
        states = _evolve_exact(cfg, params, t_grid)
        picks = _nearest_indices(t_grid, cfg.snapshots_times)
        times, rhos = t_grid[picks], [reduce_to_spin(states[i]) for i in picks]
    else:
        average = run_ensemble(initial_spin_state(cfg, params), params, cfg.hops_config(),
                               workers=ctx.workers).average
        times, rhos = average.snapshot_times, average.rho

    if cfg.qfunction_grid == "quadrature":
        grid = quadrature_grid(params.N)
    else:
        grid = uniform_grid(cfg.qfunction_n_theta, cfg.qfunction_n_phi)
    norms = []
    for k, (t, rho) in enumerate(zip(times, rhos)):
        q = spin_q_function(rho, grid)
        theta, phi = np.meshgrid(q.theta, q.phi, indexing="ij")
        norm = q.normalization(params.N)
        norms.append(norm)
        ctx.table(f"qfunction_{k:03d}.txt", {"theta": theta.ravel(), "phi": phi.ravel(), "q": q.values.ravel()},
                  comments=[f"t={float(t)!r} normalization={norm!r}"])
    return {"snapshots": len(norms), "normalization": norms}


_PIPELINES = {
    "simulate": _simulate,
    "phase-diagram": _phase_diagram,
    "rates": _rates,
    "validate": _validate,
    "q-function": _q_function,
}


def run(
    cfg: RunConfig,
    command: str = "simulate",
    workers: int | None = None,
    out_dir: Path | None = None,
) -> RunResult:
    """Execute one subcommand and write its artifacts plus ``manifest.json``.

    Raises:
        ConfigError: For configurations the subcommand cannot use.
        NumericalError: When a solver fails.
        ValidationFailure: When ``validate`` finds failing checks (artifacts are still written).
    """
    if command not in _PIPELINES:
        raise ConfigError([f"unknown command {command!r} (choose from {', '.join(COMMANDS)})"])
    out_dir = Path(out_dir if out_dir is not None else cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = _Context(cfg=cfg, params=cfg.model_params(), out_dir=out_dir,
                   workers=resolve_workers(cfg, workers), hash_value=config_hash(cfg, command))

    logger.info("Running %s (solver=%s, N=%d, seed=%d, workers=%d) into %s",
                command, cfg.solver, cfg.model_n, cfg.seed, ctx.workers, out_dir)
    started = time.perf_counter()
    summary: dict = {}
    try:
        summary = _PIPELINES[command](ctx)
    finally:
        wall = time.perf_counter() - started
        manifest = {
            "command": command,
            "config": cfg.to_text(),
            "resolved_params": ctx.params.to_dict(),
            "base_seed": cfg.seed,
            "version": __version__,
            "manifest_hash": ctx.hash_value,
            "wall_time": wall,
            "files": sorted(str(p.relative_to(out_dir)) for p in ctx.files),
        }
        write_json(out_dir / "manifest.json", manifest)
    logger.info("%s finished in %.1fs, %d file(s) written", command, wall, len(ctx.files))
    return RunResult(command=command, out_dir=out_dir, files=ctx.files, summary=summary, manifest=manifest)
