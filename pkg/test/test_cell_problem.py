import asyncio
import logging

import numpy as np
import pytest

from multiscale_soc import csvio
from multiscale_soc.cell_problem import (
    DEFAULT_POINTS,
    CellSolution,
    call,
    check_spread_decay,
    effective_hamiltonian_longtime,
    feynman_kac_mc,
    frozen_running_hamiltonian,
    march_cell,
    rewritten_running_hamiltonian,
    solve_cell_t,
)
from multiscale_soc.homogenize import HamiltonianPoint, effective_hamiltonian_quadrature
from multiscale_soc.model import ScenarioConfig, build_example
from multiscale_soc.response import NumericalError, ScenarioError
from multiscale_soc.torus_fp import TorusGrid, assemble_generator, solve_invariant_density


def test_march_with_constant_source_grows_linearly(example1):
    """
    L 1 = 0, so a constant source c gives w(t, y) = c t at every node.
    """
    _, fast = example1
    generator = assemble_generator(fast, 0.5, TorusGrid(2, 8))
    times, w = march_cell(generator, np.full(64, 0.3), 1.0, 0.1)
    assert times.size == 11 and w.shape == (11, 64)
    assert np.allclose(w, 0.3 * times[:, None], atol=1e-12), f"Max gap {np.abs(w - 0.3 * times[:, None]).max()}"


def test_march_rejects_bad_steps(example1):
    """
    Negative horizons and non-positive steps are argument errors.
    """
    generator = assemble_generator(example1[1], 0.0, TorusGrid(2, 4))
    with pytest.raises(ScenarioError):
        march_cell(generator, np.zeros(16), -1.0, 0.1)
    with pytest.raises(ScenarioError):
        march_cell(generator, np.zeros(16), 1.0, 0.0)


@pytest.mark.parametrize("example_id", [1, 2])
def test_frozen_and_rewritten_hamiltonians_agree(default_config, example_id):
    """
    Minimising the full bracket equals the fast bracket plus the minimised control bracket.
    """
    cfg = default_config.replace(example_id=example_id)
    slow, _ = build_example(cfg)
    y = TorusGrid(2, 8).points()
    for point in DEFAULT_POINTS:
        p = HamiltonianPoint(*point)
        frozen = frozen_running_hamiltonian(p, slow, cfg.control_box, y)
        rewritten = rewritten_running_hamiltonian(p, slow, cfg.control_box, y)
        assert np.allclose(frozen, rewritten, atol=1e-12), f"Gap {np.abs(frozen - rewritten).max()} at {point}"


@pytest.mark.parametrize("point", DEFAULT_POINTS)
def test_long_time_growth_matches_quadrature(default_config, example1, point):
    """
    w(T, y)/T approaches the density-weighted Hamiltonian and flattens in y.
    """
    slow, fast = example1
    grid = TorusGrid(2, 8)
    p = HamiltonianPoint(*point)
    estimate, spread = effective_hamiltonian_longtime(p, fast, slow, default_config.control_box, grid, 40.0, 0.05)
    density = solve_invariant_density(fast, p.x_bar, grid)
    quadrature = effective_hamiltonian_quadrature(p, slow, density, default_config.control_box)
    assert abs(estimate - quadrature) <= 1e-2, f"cell {estimate:.5f} vs quadrature {quadrature:.5f}"
    assert spread <= 1e-2, f"Spread {spread:.3g} at {point}"


def test_cell_solution_growth_history(default_config, example1):
    """
    The growth history drops t = 0 and reports one mean per time step.
    """
    slow, fast = example1
    solution = solve_cell_t(
        HamiltonianPoint(0.5, 1.0, 0.0), fast, slow, default_config.control_box, TorusGrid(2, 8), 2.0, 0.1
    )
    t, mean, spread = solution.growth()
    assert t.size == 20 and t[0] > 0.0
    assert mean.shape == spread.shape == t.shape
    assert np.all(spread >= 0.0)


def test_cell_rejects_points_outside_domain(default_config, example1):
    """
    Frozen slow states outside X are refused.
    """
    slow, fast = example1
    with pytest.raises(ScenarioError):
        solve_cell_t(
            HamiltonianPoint(1.2, 0.0, 0.0), fast, slow, default_config.control_box, TorusGrid(2, 4), 1.0, 0.1
        )


def test_feynman_kac_matches_cell_solution(default_config, example1):
    """
    The path average of int h_p(Y) ds from y0 agrees with w(1, y0) on the grid.
    """
    slow, fast = example1
    grid = TorusGrid(2, 16)
    p = HamiltonianPoint(0.5, 1.0, 0.0)
    solution = solve_cell_t(p, fast, slow, default_config.control_box, grid, 1.0, 0.01)
    node = 4 * 16 + 4
    assert grid.points()[node].tolist() == [0.25, 0.25]
    mean, stderr = feynman_kac_mc(
        p, fast, slow, default_config.control_box, (0.25, 0.25), 1.0, 0.01, 2000, seed=3
    )
    pde = solution.w[-1, node]
    assert abs(mean - pde) <= 4 * stderr + 0.02, f"MC {mean:.4f} +- {stderr:.4f} vs PDE {pde:.4f}"


def test_feynman_kac_rejects_bad_arguments(default_config, example1):
    """
    At least one path and a positive step are required.
    """
    slow, fast = example1
    p = HamiltonianPoint(0.0, 0.0, 0.0)
    with pytest.raises(ScenarioError):
        feynman_kac_mc(p, fast, slow, default_config.control_box, (0.0, 0.0), 1.0, 0.01, 0, seed=0)


def test_cell_stage_writes_history(tmp_path):
    """
    The cell stage writes the growth history of each requested point.
    """
    cfg = ScenarioConfig(n_torus=8, cell_horizon=2.0, cell_dt=0.1)
    response = asyncio.run(
        call(cfg, str(tmp_path), "h", points=[(0.5, 1.0, 0.0), (-0.3, 0.5, 0.2)], max_doublings=0)
    )
    assert response["status"] == "SUCCESS"
    points = response["data"]["points"]
    assert [pt["x_bar"] for pt in points] == [0.5, -0.3]
    columns, data = csvio.read_csv(response["data"]["history"])
    assert columns[:6] == ["x_bar", "g", "H", "t", "mean_w_over_t", "spread"]
    assert len(data["t"]) == 2 * 20


def test_cell_solution_is_linear_in_the_source(default_config, example1):
    """
    Scaling the running Hamiltonian by lambda scales w by lambda.
    """
    slow, fast = example1
    grid = TorusGrid(2, 8)
    p = HamiltonianPoint(0.5, 1.0, 0.0)
    source = frozen_running_hamiltonian(p, slow, default_config.control_box, grid.points())
    generator = assemble_generator(fast, p.x_bar, grid)
    _, w = march_cell(generator, source, 5.0, 0.05)
    _, w_scaled = march_cell(generator, 3.5 * source, 5.0, 0.05)
    gap = np.abs(w_scaled - 3.5 * w).max()
    assert gap <= 1e-10, f"Linearity gap {gap:.3g}"


def test_doubling_horizon_shrinks_spread(default_config, example1):
    """
    Going from T = 10 to T = 20 cuts the spread of w/T by at least 1.5.
    """
    slow, fast = example1
    p = HamiltonianPoint(0.5, 1.0, 0.0)
    grid = TorusGrid(2, 8)
    _, spread_10 = effective_hamiltonian_longtime(p, fast, slow, default_config.control_box, grid, 10.0, 0.05)
    _, spread_20 = effective_hamiltonian_longtime(p, fast, slow, default_config.control_box, grid, 20.0, 0.05)
    assert spread_20 > 0.0
    assert spread_10 / spread_20 >= 1.5, f"Spread {spread_10:.3g} -> {spread_20:.3g}"


def test_spread_does_not_grow_late(default_config, example1):
    """
    The spread of w/t is nonincreasing over the second half of the run.
    """
    slow, fast = example1
    solution = solve_cell_t(
        HamiltonianPoint(-0.3, 0.5, 0.2), fast, slow, default_config.control_box, TorusGrid(2, 8), 10.0, 0.05
    )
    t, _, spread = solution.growth()
    tail = spread[t >= 5.0]
    assert np.diff(tail).max() <= 1e-12, f"Spread grows by {np.diff(tail).max():.3g}"


def test_growing_spread_is_a_numerical_error():
    """
    A history whose spread rises after the midpoint is rejected.
    """
    grid = TorusGrid(2, 4)
    pattern = np.zeros(grid.size)
    pattern[0] = 1.0
    times = np.arange(5.0)
    spreads = [0.0, 1.0, 0.5, 0.25, 0.5]
    w = np.array([t * s * pattern for t, s in zip(times, spreads)])
    with pytest.raises(NumericalError):
        check_spread_decay(CellSolution(grid=grid, times=times, w=w, p=HamiltonianPoint(0.0, 0.0, 0.0)))
    w[4] = 4.0 * 0.2 * pattern
    check_spread_decay(CellSolution(grid=grid, times=times, w=w, p=HamiltonianPoint(0.0, 0.0, 0.0)))


def test_feynman_kac_constant_source_is_exact(default_config):
    """
    With theta_a = 0 the running Hamiltonian is constant, so every path integrates to c T.
    """
    cfg = default_config.replace(theta_a=0.0)
    slow, fast = build_example(cfg)
    p = HamiltonianPoint(0.5, 1.0, 0.0)
    c = float(frozen_running_hamiltonian(p, slow, cfg.control_box, np.array([[0.25, 0.25]]))[0])
    mean, stderr = feynman_kac_mc(p, fast, slow, cfg.control_box, (0.25, 0.25), 2.0, 0.02, 50, seed=5)
    assert abs(mean - 2.0 * c) <= 1e-12, f"mean {mean!r} vs {2.0 * c!r}"
    assert stderr <= 1e-12


def test_feynman_kac_seeds_agree(default_config, example1):
    """
    Two seeds give estimates within three combined standard errors.
    """
    slow, fast = example1
    p = HamiltonianPoint(0.5, 1.0, 0.0)
    runs = [
        feynman_kac_mc(p, fast, slow, default_config.control_box, (0.25, 0.25), 1.0, 0.02, 500, seed=s)
        for s in (7, 8)
    ]
    (m1, s1), (m2, s2) = runs
    assert abs(m1 - m2) <= 3.0 * np.hypot(s1, s2), f"{m1:.4f} +- {s1:.4f} vs {m2:.4f} +- {s2:.4f}"


def test_cell_stage_doubles_horizon_until_flat(tmp_path, caplog):
    """
    While the spread stays above the tolerance the stage retries with twice the horizon.
    """
    cfg = ScenarioConfig(n_torus=8, cell_horizon=1.0, cell_dt=0.1)
    with caplog.at_level(logging.WARNING, logger="multiscale_soc.cell_problem"):
        response = asyncio.run(
            call(cfg, str(tmp_path), "h", points=[(0.5, 1.0, 0.0)], spread_tol=0.0, max_doublings=2)
        )
    point = response["data"]["points"][0]
    assert point["horizon"] == pytest.approx(4.0), f"Horizon {point['horizon']}"
    assert "retrying with T=2" in caplog.text and "still above" in caplog.text
    _, data = csvio.read_csv(response["data"]["history"])
    assert len(data["t"]) == 40
