from pathlib import Path

import numpy as np
import pytest

from app.services.meanfield import critical_coupling
from app.services.run_config import ConfigError, RunConfig, parse_config
from app.services.spin_algebra import ModelParams

CONFIGS = Path(__file__).parent.parent / "configs"

MINIMAL = "solver = meanfield\nmodel.N = 4\n"


def _errors(text: str, overrides=()) -> list[str]:
    with pytest.raises(ConfigError) as excinfo:
        parse_config(text, overrides)
    return excinfo.value.errors


def test_minimal_config_uses_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.solver == "meanfield"
    assert cfg.model_n == 4
    assert cfg.seed == 0
    assert cfg.observables == ("sx", "sy", "sz")
    assert cfg.model_params() == ModelParams(N=4)


def test_comments_blank_lines_and_expressions():
    cfg = parse_config(
        "# quench\n\nsolver = meanfield   # inline\nmodel.N = 6\n"
        "initial.state = coherent\ninitial.theta = pi/4\ninitial.phi = 3*pi/4\n"
        "exact.verify_step = off\n"
    )
    assert cfg.initial_theta == pytest.approx(np.pi / 4)
    assert cfg.initial_phi == pytest.approx(3 * np.pi / 4)
    assert cfg.exact_verify_step is False


def test_list_and_range_values():
    cfg = parse_config(MINIMAL + "phase.g_minus = 0:1:5\nphase.g_plus = 0.5, 1.5\nrates.N = 20, 40, 60\n")
    assert cfg.phase_g_minus == (0.0, 0.25, 0.5, 0.75, 1.0)
    assert cfg.phase_g_plus == (0.5, 1.5)
    assert cfg.rates_n == (20, 40, 60)


def test_domain_error_names_line_and_key():
    errors = _errors("solver = meanfield\nmodel.N = -3\n")
    assert len(errors) == 1
    assert errors[0].startswith("line 2: model.N: must be positive")


def test_duplicate_keys_report_both_lines():
    errors = _errors("solver = exact\nmodel.N = 4\nmodel.N = 5\n")
    assert errors == ["duplicate key 'model.N' on lines 2 and 3"]


def test_every_problem_is_reported():
    errors = _errors("solver = quantum\nmodel.kappa = fast\nbogus.key = 1\nnot a pair\n")
    joined = "\n".join(errors)
    assert "line 1: solver: expected one of" in joined
    assert "line 2: model.kappa: not a number" in joined
    assert "line 3: unknown key 'bogus.key'" in joined
    assert "line 4: expected 'key = value'" in joined
    assert "missing required key 'model.N'" in joined


def test_cross_checks():
    joined = "\n".join(_errors(
        "solver = meanfield\nmodel.N = 4\nmodel.coupling = 1\nmodel.coupling_gc = 1.2\n"
        "model.g_plus = 0.3\ninitial.state = dicke\nobservables = sx, c_af\n"
        "time.t_end = 2\nsnapshots.times = 1, 3\n"
    ))
    assert "mutually exclusive" in joined
    assert "model.g_plus cannot be combined" in joined
    assert "initial.m is required" in joined
    assert "'c_af' is not available for solver meanfield" in joined
    assert "snapshots.times" in joined


def test_overrides_supersede_file_entries():
    cfg = parse_config(MINIMAL + "seed = 3\n", ["seed=9", "hops.n_traj = 50"])
    assert cfg.seed == 9
    assert cfg.hops_n_traj == 50
    errors = _errors(MINIMAL, ["model.N=0"])
    assert errors == ["override: model.N: must be positive, got 0"]
    assert _errors(MINIMAL, ["nonsense"]) == ["override 'nonsense': expected key=value"]


def test_balanced_coupling_in_units_of_threshold():
    cfg = parse_config("solver = meanfield\nmodel.N = 8\nmodel.omega_c = 2.5\nmodel.kappa = 0.5\n"
                       "model.coupling_gc = 1.4\n")
    params = cfg.model_params()
    g_c = critical_coupling(params)
    assert params.is_balanced
    assert 2 * params.g_bar == pytest.approx(1.4 * g_c)
    assert parse_config(MINIMAL + "model.coupling = 2\n").model_params().g_minus == 1.0


def test_canonical_text_reproduces_config():
    cfg = parse_config((CONFIGS / "oracle_hops.conf").read_text())
    assert parse_config(cfg.to_text()) == cfg
    assert cfg.with_overrides(["seed=4"]) == RunConfig(**{**cfg.__dict__, "seed": 4})


@pytest.mark.parametrize("name", ["quench_meanfield", "oracle_hops", "oracle_exact", "phase_diagram",
                                  "rates", "validate"])
def test_shipped_configs_parse(name):
    parse_config((CONFIGS / f"{name}.conf").read_text())


def test_derived_solver_settings():
    cfg = parse_config(MINIMAL + "time.t_end = 1\ntime.dt = 0.25\nhops.n_traj = 7\nexact.n_fock = 12\n"
                       "snapshots.times = 0.5\n")
    np.testing.assert_allclose(cfg.time_grid(), [0.0, 0.25, 0.5, 0.75, 1.0])
    hops = cfg.hops_config()
    assert hops.n_traj == 7 and hops.t_end == 1.0 and hops.record_dt == 0.25
    assert hops.snapshot_times == (0.5,)
    assert cfg.hops_config(n_traj=3, t_end=2.0).n_traj == 3
    integrator = cfg.integrator_config()
    assert integrator.initial_fock == 12
    assert integrator.max_fock == 128
