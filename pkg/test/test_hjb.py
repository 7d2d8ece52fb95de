import asyncio
import math

import numpy as np
import pytest

from multiscale_soc import csvio
from multiscale_soc.hjb import (
    PolicyField,
    ValueField1D,
    ValueField3D,
    call,
    call_converge,
    call_multiscale,
    check_neumann,
    convergence_study,
    discrete_hamiltonian_1d,
    envelope_errors,
    markov_policy_from_value,
    minimize_hamiltonian_grid,
    minimize_quadratic_control,
    minimize_sc,
    read_value_1d,
    slow_nodes,
    solve_effective_hjb,
    solve_multiscale_hjb,
    value_bound,
)
from multiscale_soc.homogenize import effective_tables
from multiscale_soc.model import ControlBox, ScenarioConfig, build_example, shift_running_cost
from multiscale_soc.response import NumericalError, ScenarioError
from multiscale_soc.torus_fp import TorusGrid, density_sweep

UNIT_BOX = ControlBox.interval(0.0, 1.0)


def _tables(cfg: ScenarioConfig, slow, fast, n_slow: int, n_torus: int):
    x = slow_nodes(cfg.alpha, n_slow)
    return effective_tables(slow, density_sweep(fast, x, TorusGrid(cfg.d_y, n_torus)), x)


@pytest.fixture(scope="module")
def constant_case():
    cfg = ScenarioConfig(theta_a=0.0, theta_b=0.0, theta_d=0.0, theta_e=0.0)
    slow, fast = build_example(cfg)
    return cfg, shift_running_cost(slow, 0.7), fast


@pytest.fixture(scope="module")
def small_effective(small_config):
    slow, fast = build_example(small_config)
    tables = _tables(small_config, slow, fast, small_config.n_slow, small_config.n_torus)
    field_ = solve_effective_hjb(tables, slow, small_config.control_box, small_config.beta)
    return slow, tables, field_


@pytest.mark.parametrize(
    "f, expected",
    [(0.6, (0.3, -0.09)), (4.0, (1.0, -3.0)), (-2.0, (0.0, 0.0))],
)
def test_quadratic_minimiser_on_unit_box(f, expected):
    """
    Interior, upper and lower minimisers of u^2 - f u over [0, 1].
    """
    u, value = minimize_quadratic_control(f, UNIT_BOX)
    assert math.isclose(u, expected[0], abs_tol=1e-15), f"u*={u} for f={f}"
    assert math.isclose(value, expected[1], abs_tol=1e-15), f"min={value} for f={f}"


@pytest.mark.parametrize("example_id", [1, 2])
def test_closed_form_matches_grid_minimiser(default_config, example_id):
    """
    The closed-form minimum and a fine control grid agree to (du)^2.
    """
    slow, _ = build_example(default_config.replace(example_id=example_id))
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, 200)
    g, H = rng.normal(0, 2, 200), rng.normal(0, 2, 200)
    n_u = 1001
    _, closed = minimize_sc(slow, UNIT_BOX, x, g, H)
    _, brute = minimize_hamiltonian_grid(x, g, H, slow, UNIT_BOX, None, n_u)
    gap = np.abs(closed - brute).max()
    assert gap <= (1.0 / (n_u - 1)) ** 2, f"Largest gap {gap:.3g}"
    assert np.all(brute >= closed - 1e-14), "Grid minimum below the exact minimum"


def test_grid_minimiser_rejects_tiny_grid(example1):
    """
    A control grid needs at least two points.
    """
    with pytest.raises(ScenarioError):
        minimize_hamiltonian_grid(0.0, 0.0, 0.0, example1[0], UNIT_BOX, None, 1)


def test_discrete_hamiltonian_exact_on_quadratic():
    """
    For v = x^2 with matching Neumann data the stencil is exact at every node, boundaries included.
    """
    alpha = 1.0
    x = slow_nodes(alpha, 11)
    h = x[1] - x[0]
    v = x * x
    running = np.linspace(0.0, 1.0, 11)
    diffusion_only = discrete_hamiltonian_1d(v, h, np.zeros(11), np.full(11, 2.0), running, 2 * alpha, 2 * alpha)
    assert np.allclose(diffusion_only, 2.0 + running, atol=1e-12), f"{diffusion_only - running}"
    drift_only = discrete_hamiltonian_1d(v, h, np.ones(11), np.zeros(11), running, 2 * alpha, 2 * alpha)
    assert np.allclose(drift_only, 2 * x + h + running, atol=1e-12)


def test_effective_constant_cost(constant_case):
    """
    A constant running cost with no boundary cost gives v = c / beta exactly.
    """
    cfg, slow, fast = constant_case
    tables = _tables(cfg, slow, fast, 17, 8)
    field_ = solve_effective_hjb(tables, slow, cfg.control_box, cfg.beta)
    worst = np.abs(field_.v - 0.7 / cfg.beta).max()
    assert worst <= 1e-8, f"max |v - c/beta| = {worst:.3g}"
    assert np.all(field_.policy.values == 0.0)


def test_multiscale_constant_cost(constant_case):
    """
    The multiscale solver reproduces c / beta at every product node.
    """
    cfg, slow, fast = constant_case
    field_ = solve_multiscale_hjb(slow, fast, cfg.control_box, 0.2, cfg.beta, None, 9, 8)
    assert field_.v.shape == (9, 64)
    worst = np.abs(field_.v - 0.7 / cfg.beta).max()
    assert worst <= 1e-8, f"max |v - c/beta| = {worst:.3g}"


def test_value_bound_example_1(example1):
    """
    sup |L| / beta = max (0.5 - u)^2 = 0.25 over [0, 1].
    """
    bound = value_bound(example1[0], UNIT_BOX, 1.0)
    assert math.isclose(bound, 0.25, rel_tol=1e-12), f"Bound {bound}"


@pytest.mark.parametrize("epsilon", ScenarioConfig().epsilon_list)
def test_values_bounded_without_boundary_cost(small_config, epsilon):
    """
    With theta_e = 0 both value functions stay within sup |L| / beta for every epsilon.
    """
    cfg = small_config
    slow, fast = build_example(cfg)
    bound = value_bound(slow, cfg.control_box, cfg.beta)
    tables = _tables(cfg, slow, fast, cfg.n_slow, cfg.n_torus)
    effective = solve_effective_hjb(tables, slow, cfg.control_box, cfg.beta, theta_e=0.0)
    multiscale = solve_multiscale_hjb(slow, fast, cfg.control_box, epsilon, cfg.beta, 0.0, cfg.n_slow, cfg.n_torus)
    for name, v in (("effective", effective.v), ("multiscale", multiscale.v)):
        assert np.abs(v).max() <= bound + 1e-8, f"{name} value {np.abs(v).max():.4g} exceeds {bound:.4g}"
        assert v.min() >= -1e-10, f"{name} value negative for a nonnegative cost"


def test_effective_solution_is_consistent(small_effective, small_config):
    """
    Policy iteration converges with a small residual and a policy inside the box.
    """
    _, _, field_ = small_effective
    assert field_.residual <= 1e-6, f"Residual {field_.residual:.3g}"
    assert field_.iterations >= 1
    u = field_.policy.values
    assert u.min() >= small_config.u_lo and u.max() <= small_config.u_hi


def test_neumann_residual_decreases_under_refinement():
    """
    The one-sided boundary derivative approaches the Neumann data faster than first order.
    """
    cfg = ScenarioConfig()
    slow, fast = build_example(cfg)
    residuals = []
    for n_slow in (33, 65):
        tables = _tables(cfg, slow, fast, n_slow, 16)
        residuals.append(check_neumann(solve_effective_hjb(tables, slow, cfg.control_box, cfg.beta)))
    assert residuals[1] <= 0.6 * residuals[0], f"Residuals {residuals}"


@pytest.mark.slow
def test_neumann_residual_on_fine_grids():
    """
    Same refinement check between 65 and 129 slow nodes.
    """
    cfg = ScenarioConfig()
    slow, fast = build_example(cfg)
    residuals = []
    for n_slow in (65, 129):
        tables = _tables(cfg, slow, fast, n_slow, 16)
        residuals.append(check_neumann(solve_effective_hjb(tables, slow, cfg.control_box, cfg.beta)))
    assert residuals[1] <= 0.6 * residuals[0], f"Residuals {residuals}"


def test_markov_policy_stays_in_box(small_effective, small_config):
    """
    The feedback control recovered from the value function lies in U.
    """
    slow, _, field_ = small_effective
    policy = markov_policy_from_value(field_, slow, small_config.control_box)
    assert policy.values.shape == field_.v.shape
    assert policy.values.min() >= 0.0 and policy.values.max() <= 1.0


def test_markov_policy_matches_solver_policy(default_config):
    """
    Away from the boundary the feedback control from the value agrees with the policy-iteration control.
    """
    cfg = default_config
    slow, fast = build_example(cfg)
    tables = _tables(cfg, slow, fast, 129, 8)
    field_ = solve_effective_hjb(tables, slow, cfg.control_box, cfg.beta)
    recovered = markov_policy_from_value(field_, slow, cfg.control_box)
    gap = np.abs(recovered.values - field_.policy.values)[2:-2].max()
    assert gap <= 0.05, f"Largest interior policy gap {gap:.3g}"


def test_multiscale_value_flat_in_y_without_fast_coupling(small_config):
    """
    With theta_a = 0 nothing in the slow dynamics sees y, so v_eps is constant in y and equals the effective value.
    """
    cfg = small_config.replace(theta_a=0.0)
    slow, fast = build_example(cfg)
    multiscale = solve_multiscale_hjb(slow, fast, cfg.control_box, 0.2, cfg.beta, None, cfg.n_slow, cfg.n_torus)
    spread = np.ptp(multiscale.v, axis=1).max()
    assert spread <= 1e-8, f"Spread in y {spread:.3g}"
    effective = solve_effective_hjb(_tables(cfg, slow, fast, cfg.n_slow, cfg.n_torus), slow, cfg.control_box, cfg.beta)
    gap = np.abs(multiscale.v[:, 0] - effective.v).max()
    assert gap <= 1e-6, f"Gap to the effective value {gap:.3g}"


def test_policy_field_rejects_controls_outside_box():
    """
    Policies must take values in the control box.
    """
    with pytest.raises(NumericalError):
        PolicyField(np.array([0.2, 1.5]), UNIT_BOX)


def _field_1d(n: int, v) -> ValueField1D:
    return ValueField1D(
        x_nodes=np.linspace(-1, 1, n), v=np.asarray(v, dtype=float),
        policy=PolicyField(np.zeros(n), UNIT_BOX), beta=1.0, residual=0.0,
    )


def _field_3d(n: int, v) -> ValueField3D:
    grid = TorusGrid(2, 4)
    return ValueField3D(
        x_nodes=np.linspace(-1, 1, n), grid=grid, v=np.asarray(v, dtype=float),
        policy=PolicyField(np.zeros((n, grid.size)), UNIT_BOX), epsilon=0.1, beta=1.0, residual=0.0,
    )


def test_envelope_errors():
    """
    err_inf and err_sup measure the lower and upper envelopes in y against v_bar.
    """
    v_bar = np.array([0.0, 1.0, 2.0])
    offsets = np.linspace(-0.1, 0.2, 16)
    effective = _field_1d(3, v_bar)
    multiscale = _field_3d(3, v_bar[:, None] + offsets[None, :])
    err_inf, err_sup = envelope_errors(effective, multiscale)
    assert math.isclose(err_inf, 0.1, rel_tol=1e-12) and math.isclose(err_sup, 0.2, rel_tol=1e-12)
    with pytest.raises(ScenarioError):
        envelope_errors(_field_1d(5, np.zeros(5)), multiscale)


def test_value_field_3d_lookup():
    """
    Lookup is linear in x and picks the nearest torus node in y.
    """
    v = np.zeros((3, 16))
    v[:, 5] = [0.0, 1.0, 3.0]
    field_ = _field_3d(3, v)
    assert math.isclose(field_.at(0.5, (0.26, 0.24)), 2.0, rel_tol=1e-14)
    assert field_.at(0.5, (0.0, 0.0)) == 0.0


def test_reduced_convergence_study(small_config):
    """
    The largest envelope error shrinks from the largest to the smallest epsilon.
    """
    study = convergence_study(small_config)
    assert [r.epsilon for r in study.rows] == [0.4, 0.2]
    assert study.err_sup[-1] < study.err_sup[0], f"err_sup {study.err_sup}"
    assert all(r.err_inf >= 0.0 and r.runtime_s >= 0.0 for r in study.rows)
    assert set(study.fields) == {0.4, 0.2}


@pytest.mark.slow
def test_full_convergence_study(default_config):
    """
    On the default grids err_sup decreases strictly and halves from 0.4 to 0.05.
    """
    study = convergence_study(default_config)
    sup = study.err_sup
    assert np.all(np.diff(sup) < 0), f"err_sup not strictly decreasing: {sup}"
    assert sup[-1] <= 0.5 * sup[0], f"err_sup did not halve: {sup}"


def test_stage_calls_write_csv(small_config, small_effective, tmp_path):
    """
    The effective, multiscale and converge stages write their files and envelopes.
    """
    cfg = small_config
    slow, tables, _ = small_effective
    out = str(tmp_path)
    response, effective = asyncio.run(call(cfg, tables, out, "h"))
    assert response["status"] == "SUCCESS"
    again = read_value_1d(response["data"]["value"], cfg.control_box, cfg.beta, slow.h_minus, slow.h_plus)
    assert np.array_equal(again.v, effective.v)
    assert response["data"]["value_bound"] > 0

    response, fields = asyncio.run(call_multiscale(cfg, out, "h"))
    entries = response["data"]["fields"]
    assert [e["epsilon"] for e in entries] == [0.4, 0.2]
    columns, data = csvio.read_csv(entries[0]["value"])
    assert columns[:5] == ["x", "y1", "y2", "v", "policy"]
    assert len(data["v"]) == cfg.n_slow * cfg.n_torus**2

    response, rows = asyncio.run(call_converge(cfg, effective, fields, out, "h"))
    assert [r.epsilon for r in rows] == [0.4, 0.2]
    assert response["data"]["convergence"].endswith("converge/convergence.csv")
    columns, data = csvio.read_csv(response["data"]["convergence"])
    assert columns == ["epsilon", "err_inf", "err_sup", "runtime_s"]
    assert np.all(data["runtime_s"] >= 0.0)
    assert isinstance(response["data"]["strictly_decreasing"], bool)
