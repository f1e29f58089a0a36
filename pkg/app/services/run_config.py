"""Run configuration: a flat ``key = value`` file with dotted section keys.

Example:

    # balanced quench above threshold
    solver = meanfield
    model.N = 100
    model.omega_c = 2.5
    model.kappa = 0.5
    model.coupling_gc = 1.4
    initial.state = coherent
    initial.theta = pi/4
    initial.phi = pi

Every problem in a file is collected and reported together in one
``ConfigError``. Overrides (``key=value``) replace file entries.
"""

import logging
import math
import re
from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np

from app.services.errors import DickeError
from app.services.exact_solver import IntegratorConfig
from app.services.meanfield import critical_coupling
from app.services.nuhops import HopsConfig
from app.services.spin_algebra import ModelParams

logger = logging.getLogger(__name__)

SOLVERS = ("exact", "meanfield", "cumulant", "hops")
INITIAL_STATES = ("coherent", "dicke", "normal", "superradiant")
GRIDS = ("quadrature", "uniform")

# Time-series observables each solver can emit
SOLVER_OBSERVABLES = {
    "exact": ("sx", "sy", "sz", "a", "n", "c_af", "xi2", "negativity"),
    "meanfield": ("sx", "sy", "sz", "a", "n"),
    "cumulant": ("sx", "sy", "sz", "a", "n", "c_af"),
    "hops": ("sx", "sy", "sz", "a", "c_af", "vacuum_norm2"),
}

_PI_RE = re.compile(r"^([-+]?(?:\d+(?:\.\d*)?|\.\d+)?)\s*\*?\s*pi\s*(?:/\s*(\d+(?:\.\d*)?))?$")


class ConfigError(DickeError):
    """Invalid run configuration; ``errors`` lists every problem found."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class RunConfig:
    solver: str
    model_n: int

    seed: int = 0
    workers: int | None = None
    output_dir: str = "output"
    observables: tuple[str, ...] = ("sx", "sy", "sz")

    # [model]
    model_omega_a: float = 1.0
    model_omega_c: float = 1.0
    model_kappa: float = 0.0
    model_g_plus: float = 0.0
    model_g_minus: float = 0.0
    model_coupling: float | None = None
    model_coupling_gc: float | None = None

    # [initial]
    initial_state: str = "normal"
    initial_theta: float = 0.0
    initial_phi: float = 0.0
    initial_m: float | None = None

    # [time]
    time_t_end: float = 10.0
    time_dt: float = 0.05

    # [exact]
    exact_dt: float = 0.01
    exact_n_fock: int = 0
    exact_max_fock: int = 128
    exact_verify_step: bool = True

    # [hops]
    hops_fock_levels: int = 8
    hops_fock_tol: float = 1e-8
    hops_window_tol: float = 1e-10
    hops_dt: float = 0.01
    hops_noise_dt: float | None = None
    hops_n_traj: int = 100
    hops_max_fock_levels: int = 512
    hops_max_dimension: int = 262144
    hops_stream_trajectories: bool = False

    # [snapshots] / [qfunction]
    snapshots_times: tuple[float, ...] = ()
    qfunction_grid: str = "quadrature"
    qfunction_n_theta: int = 181
    qfunction_n_phi: int = 360

    # [phase]
    phase_g_minus: tuple[float, ...] = ()
    phase_g_plus: tuple[float, ...] = ()
    phase_hops_time: float = 0.0

    # [rates]
    rates_n: tuple[int, ...] = ()
    rates_s: tuple[float, ...] = ()
    rates_g_minus: float = 1.8
    rates_window_time: float | None = None

    # [validate]
    validate_full: bool = False
    validate_n_traj: int = 2000

    def model_params(self) -> ModelParams:
        """Model constants, resolving ``coupling`` / ``coupling_gc`` into balanced couplings."""
        base = ModelParams(N=self.model_n, omega_a=self.model_omega_a, omega_c=self.model_omega_c,
                           kappa=self.model_kappa, g_plus=self.model_g_plus, g_minus=self.model_g_minus)
        if self.model_coupling is not None:
            return base.replace(g_plus=self.model_coupling / 2, g_minus=self.model_coupling / 2)
        if self.model_coupling_gc is not None:
            coupling = self.model_coupling_gc * critical_coupling(base)
            return base.replace(g_plus=coupling / 2, g_minus=coupling / 2)
        return base

    def hops_config(self, n_traj: int | None = None, t_end: float | None = None) -> HopsConfig:
        return HopsConfig(
            fock_levels=self.hops_fock_levels,
            fock_tol=self.hops_fock_tol,
            window_tol=self.hops_window_tol,
            dt=self.hops_dt,
            noise_dt=self.hops_noise_dt,
            t_end=t_end if t_end is not None else self.time_t_end,
            record_dt=self.time_dt,
            n_traj=n_traj if n_traj is not None else self.hops_n_traj,
            base_seed=self.seed,
            max_fock_levels=self.hops_max_fock_levels,
            max_dimension=self.hops_max_dimension,
            snapshot_times=self.snapshots_times,
        )

    def integrator_config(self) -> IntegratorConfig:
        initial = self.exact_n_fock if self.exact_n_fock > 0 else IntegratorConfig.initial_fock
        return IntegratorConfig(dt=self.exact_dt, verify_step=self.exact_verify_step,
                                initial_fock=initial, max_fock=max(self.exact_max_fock, initial))

    def time_grid(self) -> np.ndarray:
        n = int(round(self.time_t_end / self.time_dt))
        return np.linspace(0.0, n * self.time_dt, n + 1)

    def to_text(self) -> str:
        """Canonical ``key = value`` rendering; parsing it reproduces this config exactly."""
        lines = []
        for spec in _SCHEMA:
            value = getattr(self, spec.attr)
            if value is None:
                continue
            lines.append(f"{spec.key} = {_render(value)}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        return parse_config(self.to_text(), overrides)


# --- schema -------------------------------------------------------------------

@dataclass(frozen=True)
class _Key:
    key: str
    kind: str
    check: Callable[[object], str | None] | None = None
    choices: tuple[str, ...] | None = None

    @property
    def attr(self) -> str:
        return self.key.replace(".", "_").lower()


def _positive(value) -> str | None:
    return None if value > 0 else "must be positive"


def _nonnegative(value) -> str | None:
    return None if value >= 0 else "must be nonnegative"


def _all_positive(values) -> str | None:
    return None if all(v > 0 for v in values) else "all entries must be positive"


def _all_nonnegative(values) -> str | None:
    return None if all(v >= 0 for v in values) else "all entries must be nonnegative"


def _unit_interval(value) -> str | None:
    return None if 0 < value < 1 else "must lie in (0, 1)"


def _seed(value) -> str | None:
    return None if 0 <= value < 2**64 else "must be an unsigned 64-bit integer"


_SCHEMA = (
    _Key("solver", "str", choices=SOLVERS),
    _Key("seed", "int", _seed),
    _Key("workers", "int", _positive),
    _Key("output.dir", "str"),
    _Key("observables", "names"),
    _Key("model.N", "int", _positive),
    _Key("model.omega_a", "float"),
    _Key("model.omega_c", "float"),
    _Key("model.kappa", "float", _nonnegative),
    _Key("model.g_plus", "float", _nonnegative),
    _Key("model.g_minus", "float", _nonnegative),
    _Key("model.coupling", "float", _nonnegative),
    _Key("model.coupling_gc", "float", _nonnegative),
    _Key("initial.state", "str", choices=INITIAL_STATES),
    _Key("initial.theta", "float"),
    _Key("initial.phi", "float"),
    _Key("initial.m", "float"),
    _Key("time.t_end", "float", _positive),
    _Key("time.dt", "float", _positive),
    _Key("exact.dt", "float", _positive),
    _Key("exact.n_fock", "int", _nonnegative),
    _Key("exact.max_fock", "int", _positive),
    _Key("exact.verify_step", "bool"),
    _Key("hops.fock_levels", "int", lambda v: None if v >= 2 else "must be >= 2"),
    _Key("hops.fock_tol", "float", _unit_interval),
    _Key("hops.window_tol", "float", _unit_interval),
    _Key("hops.dt", "float", _positive),
    _Key("hops.noise_dt", "float", _positive),
    _Key("hops.n_traj", "int", _positive),
    _Key("hops.max_fock_levels", "int", _positive),
    _Key("hops.max_dimension", "int", _positive),
    _Key("hops.stream_trajectories", "bool"),
    _Key("snapshots.times", "floats", _all_nonnegative),
    _Key("qfunction.grid", "str", choices=GRIDS),
    _Key("qfunction.n_theta", "int", lambda v: None if v >= 2 else "must be >= 2"),
    _Key("qfunction.n_phi", "int", lambda v: None if v >= 2 else "must be >= 2"),
    _Key("phase.g_minus", "floats", _all_nonnegative),
    _Key("phase.g_plus", "floats", _all_nonnegative),
    _Key("phase.hops_time", "float", _nonnegative),
    _Key("rates.N", "ints", _all_positive),
    _Key("rates.s", "floats"),
    _Key("rates.g_minus", "float", _nonnegative),
    _Key("rates.window_time", "float", _positive),
    _Key("validate.full", "bool"),
    _Key("validate.n_traj", "int", _positive),
)
_BY_KEY = {spec.key: spec for spec in _SCHEMA}
_REQUIRED = ("solver", "model.N")


# --- value parsing ----------------------------------------------------------------

def _parse_float(raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        pass
    match = _PI_RE.match(raw.replace(" ", ""))
    if not match:
        raise ValueError(f"not a number: {raw!r}")
    factor, divisor = match.groups()
    if factor in ("", "+", "-"):
        factor = factor + "1"
    return float(factor) * math.pi / float(divisor or 1)


def _parse_int(raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"not an integer: {raw!r}") from None


def _parse_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_range(raw: str) -> list[float] | None:
    """``start:stop:num`` shorthand for an evenly spaced list."""
    parts = raw.split(":")
    if len(parts) != 3:
        return None
    start, stop = _parse_float(parts[0].strip()), _parse_float(parts[1].strip())
    return [float(v) for v in np.linspace(start, stop, _parse_int(parts[2].strip()))]


def _split(raw: str) -> list[str]:
    return [item.strip() for item in raw.split(",") if item.strip()]


def _convert(spec: _Key, raw: str):
    if spec.kind == "str":
        if spec.choices is not None and raw not in spec.choices:
            raise ValueError(f"expected one of {', '.join(spec.choices)}, got {raw!r}")
        return raw
    if spec.kind == "int":
        return _parse_int(raw)
    if spec.kind == "float":
        return _parse_float(raw)
    if spec.kind == "bool":
        return _parse_bool(raw)
    if spec.kind == "names":
        return tuple(_split(raw))
    if spec.kind == "ints":
        return tuple(_parse_int(item) for item in _split(raw))
    if spec.kind == "floats":
        ranged = _parse_range(raw)
        return tuple(ranged if ranged is not None else (_parse_float(item) for item in _split(raw)))
    raise AssertionError(spec.kind)


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# --- parsing --------------------------------------------------------------------------

def _read_entries(text: str, errors: list[str]) -> dict[str, tuple[str, int]]:
    entries: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected 'key = value', got {stripped!r}")
            continue
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in entries:
            errors.append(f"duplicate key '{key}' on lines {entries[key][1]} and {lineno}")
            continue
        entries[key] = (raw, lineno)
    return entries


def _cross_checks(values: dict, errors: list[str]) -> None:
    if values.get("model.coupling") is not None and values.get("model.coupling_gc") is not None:
        errors.append("model.coupling and model.coupling_gc are mutually exclusive")
    if values.get("model.coupling") is not None or values.get("model.coupling_gc") is not None:
        for key in ("model.g_plus", "model.g_minus"):
            if values.get(key, 0.0) != 0.0:
                errors.append(f"{key} cannot be combined with a balanced coupling")
    if values.get("initial.state") == "dicke" and values.get("initial.m") is None:
        errors.append("initial.m is required for initial.state = dicke")
    solver = values.get("solver")
    if solver in SOLVER_OBSERVABLES:
        allowed = SOLVER_OBSERVABLES[solver]
        for name in values.get("observables", ()):
            if name not in allowed:
                errors.append(f"observables: '{name}' is not available for solver {solver} "
                              f"(choose from {', '.join(allowed)})")
    t_end = values.get("time.t_end", RunConfig.time_t_end)
    if any(t > t_end for t in values.get("snapshots.times", ())):
        errors.append("snapshots.times: all times must lie inside [0, time.t_end]")


def parse_config(text: str, overrides: Iterable[str] = ()) -> RunConfig:
    """Parse and validate a run configuration.

    Args:
        text: File contents.
        overrides: ``key=value`` strings that supersede file entries.

    Raises:
        ConfigError: With every syntax, key, type and domain problem found.
    """
    errors: list[str] = []
    entries = _read_entries(text, errors)
    for item in overrides:
        if "=" not in item:
            errors.append(f"override {item!r}: expected key=value")
            continue
        key, raw = (part.strip() for part in item.split("=", 1))
        entries[key] = (raw, 0)

    values: dict[str, object] = {}
    for key, (raw, lineno) in entries.items():
        where = f"line {lineno}: " if lineno else "override: "
        spec = _BY_KEY.get(key)
        if spec is None:
            errors.append(f"{where}unknown key '{key}'")
            continue
        try:
            value = _convert(spec, raw)
        except ValueError as e:
            errors.append(f"{where}{key}: {e}")
            continue
        problem = spec.check(value) if spec.check is not None else None
        if problem:
            errors.append(f"{where}{key}: {problem}, got {raw}")
            continue
        values[key] = value

    for key in _REQUIRED:
        if key not in entries:
            errors.append(f"missing required key '{key}'")
    _cross_checks(values, errors)

    if errors:
        raise ConfigError(errors)
    return RunConfig(**{_BY_KEY[key].attr: value for key, value in values.items()})
