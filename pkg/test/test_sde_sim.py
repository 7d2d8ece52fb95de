import asyncio
import logging
import math

import numpy as np
import pytest

from multiscale_soc import csvio
from multiscale_soc.hjb import (
    PolicyField,
    ValueField1D,
    slow_nodes,
    solve_effective_hjb,
    solve_multiscale_hjb,
)
from multiscale_soc.homogenize import effective_tables
from multiscale_soc.model import ControlBox, ScenarioConfig, build_example, shift_running_cost
from multiscale_soc.response import ScenarioError
from multiscale_soc.sde_sim import (
    call,
    horizon_for,
    policy_function,
    reflect_paths,
    simulate_effective_cost,
    simulate_multiscale_cost,
    step_reflected_slow,
)
from multiscale_soc.torus_fp import TorusGrid, density_sweep

UNIT_BOX = ControlBox.interval(0.0, 1.0)


def _tables(cfg: ScenarioConfig, slow, fast, n_slow: int, n_torus: int):
    x = slow_nodes(cfg.alpha, n_slow)
    return effective_tables(slow, density_sweep(fast, x, TorusGrid(cfg.d_y, n_torus)), x)


@pytest.fixture(scope="module")
def constant_case():
    cfg = ScenarioConfig(theta_a=0.0, theta_b=0.0, theta_d=0.0, theta_e=0.0)
    slow, fast = build_example(cfg)
    slow = shift_running_cost(slow, 0.7)
    return cfg, slow, fast, _tables(cfg, slow, fast, 9, 8)


def test_reflect_paths_projects_and_records_overshoot():
    """
    Proposals outside [-alpha, alpha] land on the boundary; the overshoot is the local-time increment.
    """
    proposal = np.array([1.25, -1.5, 0.3])
    x_out, dl_out = np.empty(3), np.empty(3)
    reflect_paths(proposal, 1.0, x_out, dl_out)
    assert x_out.tolist() == [1.0, -1.0, 0.3]
    assert dl_out.tolist() == [0.25, 0.5, 0.0]


def test_single_reflected_step():
    """
    A step past the right boundary is reflected; an interior step is not.
    """
    step = step_reflected_slow(0.95, 0.0, 1.0, 0.01, 0.1, 1.0)
    assert step.reflected and step.x_new == 1.0
    assert math.isclose(step.dl, 0.05, rel_tol=1e-9), f"dl={step.dl}"
    inside = step_reflected_slow(0.0, 1.0, 0.0, 0.1, 0.0, 1.0)
    assert not inside.reflected and math.isclose(inside.x_new, 0.1) and inside.dl == 0.0


def test_reflected_step_rejects_bad_arguments():
    """
    Steps need dt > 0 and a starting point in X.
    """
    with pytest.raises(ScenarioError):
        step_reflected_slow(0.0, 0.0, 1.0, 0.0, 0.1, 1.0)
    with pytest.raises(ScenarioError):
        step_reflected_slow(1.5, 0.0, 1.0, 0.01, 0.1, 1.0)


def test_horizon_from_discount(example1):
    """
    With sup |L| / beta <= 1 the horizon is 2 ln(1/tol) / beta.
    """
    T = horizon_for(example1[0], UNIT_BOX, 1.0, 1e-3)
    assert math.isclose(T, 2.0 * math.log(1e3), rel_tol=1e-12), f"T={T}"
    assert math.isclose(horizon_for(example1[0], UNIT_BOX, 2.0, 1e-3), T / 2.0, rel_tol=1e-12)
    with pytest.raises(ScenarioError):
        horizon_for(example1[0], UNIT_BOX, 1.0, 0.0)


def test_policy_function_variants():
    """
    Constants and callables are clamped to the box; a value field is interpolated in x.
    """
    x = np.array([-1.0, 0.0, 0.5])
    assert policy_function(2.0, UNIT_BOX)(x, None).tolist() == [1.0, 1.0, 1.0]
    assert policy_function(lambda x, y: x, UNIT_BOX)(x, None).tolist() == [0.0, 0.0, 0.5]
    field_ = ValueField1D(
        x_nodes=np.array([-1.0, 0.0, 1.0]), v=np.zeros(3),
        policy=PolicyField(np.array([0.0, 0.2, 1.0]), UNIT_BOX), beta=1.0, residual=0.0,
    )
    assert np.allclose(policy_function(field_, UNIT_BOX)(x, None), [0.0, 0.2, 0.6])


def test_effective_constant_cost_is_exact(constant_case):
    """
    A constant running cost with zero boundary cost integrates to c (1 - e^{-beta T}) / beta.
    """
    cfg, slow, _, tables = constant_case
    est = simulate_effective_cost(tables, slow, 0.0, 0.3, cfg.beta, 5.0, 0.01, 64, seed=1, control=UNIT_BOX)
    expected = 0.7 * (1.0 - math.exp(-cfg.beta * est.horizon)) / cfg.beta
    assert math.isclose(est.horizon, 5.0, rel_tol=1e-12)
    assert abs(est.mean - expected) <= 1e-10, f"mean {est.mean!r} vs {expected!r}"
    assert est.stderr <= 1e-12


def test_multiscale_constant_cost_is_exact(constant_case):
    """
    The multiscale simulator integrates the same constant cost exactly.
    """
    cfg, slow, fast, _ = constant_case
    est = simulate_multiscale_cost(
        slow, fast, 0.0, 0.2, -0.4, (0.25, 0.75), cfg.beta, 2.0, 0.01, 32, seed=2, control=UNIT_BOX
    )
    expected = 0.7 * (1.0 - math.exp(-cfg.beta * est.horizon)) / cfg.beta
    assert abs(est.mean - expected) <= 1e-10, f"mean {est.mean!r} vs {expected!r}"


def test_multiscale_step_is_clamped_to_epsilon(example1, caplog):
    """
    dt above epsilon / 10 is reduced with a warning.
    """
    slow, fast = example1
    with caplog.at_level(logging.WARNING, logger="multiscale_soc.sde_sim"):
        est = simulate_multiscale_cost(
            slow, fast, 0.5, 0.2, 0.0, (0.25, 0.75), 1.0, 0.1, 0.05, 10, seed=0, control=UNIT_BOX
        )
    assert math.isclose(est.dt, 0.02, rel_tol=1e-12), f"dt={est.dt}"
    assert "exceeds epsilon/10" in caplog.text


def test_recorded_paths_stay_in_domain(example1):
    """
    Recorded trajectories start at x0 and never leave X.
    """
    slow, fast = example1
    est = simulate_multiscale_cost(
        slow, fast, 1.0, 0.2, 0.9, (0.1, 0.2), 1.0, 1.0, 0.01, 20, seed=4, control=UNIT_BOX, record_paths=5
    )
    assert est.trajectories.shape == (5, 101)
    assert np.all(est.trajectories[:, 0] == 0.9)
    assert np.abs(est.trajectories).max() <= slow.alpha
    assert est.costs.shape == (20,)


def test_simulation_rejects_bad_arguments(example1):
    """
    x0 outside X and non-positive path counts are refused.
    """
    slow, fast = example1
    with pytest.raises(ScenarioError):
        simulate_multiscale_cost(slow, fast, 0.5, 0.2, 1.5, (0.0, 0.0), 1.0, 1.0, 0.01, 10, seed=0)
    with pytest.raises(ScenarioError):
        simulate_multiscale_cost(slow, fast, 0.5, 0.2, 0.0, (0.0, 0.0), 1.0, 1.0, 0.01, 0, seed=0)


def test_effective_cost_matches_pde_value(default_config):
    """
    The path cost under the effective optimal policy reproduces the effective value.
    """
    cfg = default_config
    slow, fast = build_example(cfg)
    tables = _tables(cfg, slow, fast, 65, 8)
    field_ = solve_effective_hjb(tables, slow, cfg.control_box, cfg.beta)
    T = horizon_for(slow, cfg.control_box, cfg.beta, 1e-3)
    for x0 in (-0.5, 0.0, 0.5):
        est = simulate_effective_cost(tables, slow, field_, x0, cfg.beta, T, 5e-3, 1000, seed=9, control=cfg.control_box)
        pde = float(np.interp(x0, field_.x_nodes, field_.v))
        assert abs(est.mean - pde) <= 3 * est.stderr + 0.02, f"x0={x0}: MC {est.mean:.4f} vs PDE {pde:.4f}"


@pytest.mark.slow
def test_multiscale_cost_matches_pde_value(default_config):
    """
    At epsilon = 0.2 the multiscale path cost reproduces v_eps(x0, y0).
    """
    cfg = default_config
    slow, fast = build_example(cfg)
    field_ = solve_multiscale_hjb(slow, fast, cfg.control_box, 0.2, cfg.beta, None, cfg.n_slow, cfg.n_torus)
    T = horizon_for(slow, cfg.control_box, cfg.beta, 1e-3)
    y0 = (0.25, 0.75)
    for x0 in (-0.5, 0.0, 0.5):
        est = simulate_multiscale_cost(
            slow, fast, field_, 0.2, x0, y0, cfg.beta, T, 1e-3, 10_000, seed=cfg.seed, control=cfg.control_box
        )
        pde = field_.at(x0, y0)
        assert abs(est.mean - pde) <= 3 * est.stderr + 0.02, f"x0={x0}: MC {est.mean:.4f} vs PDE {pde:.4f}"


def test_simulate_stage_writes_summary(small_config, tmp_path):
    """
    The simulate stage estimates both systems and writes the summary and per-path files.
    """
    cfg = small_config.replace(mc_horizon=1.0)
    slow, fast = build_example(cfg)
    tables = _tables(cfg, slow, fast, cfg.n_slow, cfg.n_torus)
    effective = solve_effective_hjb(tables, slow, cfg.control_box, cfg.beta)
    multiscale = solve_multiscale_hjb(slow, fast, cfg.control_box, 0.2, cfg.beta, None, cfg.n_slow, cfg.n_torus)
    response = asyncio.run(
        call(cfg, str(tmp_path), "h", effective, tables, multiscale, x0_list=(0.0,), n_paths=50, dt=0.01, per_path=True)
    )
    estimates = response["data"]["estimates"]
    assert [e["which"] for e in estimates] == ["effective", "multiscale"]
    columns, data = csvio.read_csv(str(tmp_path / "simulate" / "simulate.csv"))
    assert columns == ["multiscale", "epsilon", "x0", "mean", "stderr", "pde_value", "horizon", "dt"]
    assert data["multiscale"].tolist() == [0.0, 1.0]
    assert (tmp_path / "simulate" / "costs_effective_0.csv").exists()


def test_simulate_stage_needs_solved_fields(small_config, tmp_path):
    """
    Requesting a system without its solved field is an argument error.
    """
    with pytest.raises(ScenarioError):
        asyncio.run(call(small_config, str(tmp_path), "h", which=("multiscale",)))
