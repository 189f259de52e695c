import numpy as np
import pytest

from conftest import small_config, small_scenario
from hardynash.errors import ParseError, ValidationError
from hardynash.pde import Field, inner_m, write_field_binary, write_field_csv
from hardynash.scenario import (
    Expression,
    bundled_scenario_path,
    load_bundled,
    load_scenario,
    parse_config_text,
    scenario_from_config,
)


@pytest.mark.parametrize("name", ["linear_shared", "linear_distinct", "tensor_heat", "semilinear_tanh"])
def test_bundled_scenarios_load(name):
    s = load_bundled(name)
    assert s.name == name
    assert len(s.config_hash) == 64
    n = s.grid.n_cells
    assert s.y0.shape == (n,)
    assert all(t.shape == (s.scheme.n_steps, n) for t in s.target_values())


def test_unknown_bundled_name():
    with pytest.raises(FileNotFoundError):
        bundled_scenario_path("nope")


def test_expression_whitelist():
    env = {"r": np.array([1.0, 2.0]), "t": 0.0, "pi": np.pi}
    assert np.allclose(Expression("r**2 + sin(pi*t)").evaluate(env), [1, 4])
    assert np.allclose(Expression("max(r, 1.5)").evaluate(env), [1.5, 2])
    for bad in ("__import__('os')", "r.sum()", "[r]", "lambda: 1", "'a'", "r if t else 1",
                "sin(x=r)", "open('f')"):
        with pytest.raises(ParseError):
            Expression(bad)
    with pytest.raises(ParseError):
        Expression("q + 1").evaluate(env)
    with pytest.raises(ParseError):
        Expression("1/(r - 1)").evaluate(env)
    with pytest.raises(ParseError):
        Expression("r +")


def test_mode_vectors_are_mass_orthonormal():
    s = small_scenario(data={"y0": "mode(1)", "ybar0": "mode(2)"})
    m = s.op.mass
    assert inner_m(s.y0, s.y0, m) == pytest.approx(1.0)
    assert inner_m(s.ybar0, s.ybar0, m) == pytest.approx(1.0)
    assert abs(inner_m(s.y0, s.ybar0, m)) < 1e-12
    assert np.all(s.y0 > 0)  # ground state has one sign


def test_duplicate_key_reports_line():
    text = "name = 'a'\n[grid]\ncells = 16\ncells = 32\n"
    with pytest.raises(ParseError) as info:
        parse_config_text(text)
    assert info.value.line == 4


def test_validation_collects_every_violation():
    cfg = small_config(model={"mu": 0.3, "alpha": [1.0, -1.0], "theta": 0.7},
                       leader={"penalty": "cubic"})
    cfg["regions"]["O1"] = [2.5, 3.0]
    with pytest.raises(ValidationError) as info:
        scenario_from_config(cfg)
    text = " ".join(info.value.violations)
    for part in ("mu", "O1", "alpha", "theta", "penalty"):
        assert part in text
    assert len(info.value.violations) >= 5


def test_shared_case_needs_equal_targets():
    with pytest.raises(ValidationError):
        small_scenario(data={"y2d": "ybar"})


def test_bad_grid_is_validation_error():
    with pytest.raises(ValidationError):
        small_scenario(grid={"cells": 3})


def test_unknown_nonlinearity():
    with pytest.raises(ValidationError):
        small_scenario(model={"nonlinearity": "cubic"})


def test_bad_expression_in_data():
    with pytest.raises(ValidationError):
        small_scenario(data={"y0": "ybar*2"})  # ybar is not defined at t = 0


def test_load_file_and_field_data(tmp_path):
    s = small_scenario()
    n, nt = s.grid.n_cells, s.scheme.n_steps
    write_field_binary(Field(np.linspace(0, 1, n)[None, :]), tmp_path / "y0.field")
    write_field_csv(Field(np.full((nt, n), 0.5), "intervals", s.T), tmp_path / "target.csv")
    text = (
        "name = 'files'\nseed = 3\n"
        "[grid]\nmode = 'radial3d'\ncells = 24\nextent = 2.0\n"
        "[regions]\ncase = 'shared'\nO = [1.2, 1.6]\nO1 = [1.0, 1.2]\nO2 = [1.6, 1.8]\n"
        "O1d = [1.3, 1.7]\nO2d = [1.3, 1.7]\n"
        "[model]\nmu = 0.1\nT_seconds = 0.5\nsteps = 16\n"
        "[data]\ny0 = 'file:y0.field'\ny1d = 'file:target.csv'\ny2d = 'file:target.csv'\n"
    )
    (tmp_path / "s.toml").write_text(text)
    sc = load_scenario(tmp_path / "s.toml")
    assert np.allclose(sc.y0, np.linspace(0, 1, n))
    assert np.allclose(sc.target_values()[0], 0.5)
    write_field_binary(Field(np.zeros((1, n + 1))), tmp_path / "y0.field")
    with pytest.raises(ValidationError):
        load_scenario(tmp_path / "s.toml")


def test_missing_file_is_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_scenario(tmp_path / "absent.toml")


def test_targets_use_ybar(semi):
    yb = semi.theta_hat(semi.trajectory())
    t = semi.target_values()[0]
    assert np.allclose(t[-1], yb[-1])  # the bump vanishes for t >= T/2
    z0, zd, ybar = semi.reduced_data(nonlinear=True)
    assert np.allclose(z0, semi.y0 - semi.ybar0)
    assert np.allclose(zd[0], t - yb)


def test_with_alpha_shares_operator(shared):
    other = shared.with_alpha((5.0, 6.0))
    assert other.alpha == (5.0, 6.0)
    assert other.op is shared.op
    assert shared.alpha != other.alpha


def test_rng_streams_are_reproducible(shared):
    a = shared.rng(1).standard_normal(3)
    assert np.array_equal(a, shared.rng(1).standard_normal(3))
    assert not np.array_equal(a, shared.rng(2).standard_normal(3))
