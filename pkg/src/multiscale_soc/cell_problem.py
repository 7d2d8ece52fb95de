"""
Cell-t-problem on the torus: dw/dt = L_Y w + h_p(y), w(0, .) = 0, and the
effective Hamiltonian as the long-time growth rate of w.
"""

import asyncio
import logging
import math
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from multiscale_soc import csvio
from multiscale_soc.homogenize import HamiltonianPoint, effective_hamiltonian_quadrature
from multiscale_soc.hjb import minimize_hamiltonian_grid, minimize_quadratic_control, minimize_sc
from multiscale_soc.model import ControlBox, FastSpec, ScenarioConfig, SlowSpec, build_example
from multiscale_soc.response import NumericalError, ScenarioError, StageType, make_success_response
from multiscale_soc.torus_fp import (
    GeneratorMatrix,
    TorusGrid,
    assemble_generator,
    fast_increment,
    solve_invariant_density,
)

logger = logging.getLogger(__name__)

# (x_bar, g, H) evaluated by the cell stage when none is given.
DEFAULT_POINTS = ((0.5, 1.0, 0.0), (-0.3, 0.5, 0.2), (0.8, -1.0, 0.5))

# The cell stage doubles T until the final spread is below this.
SPREAD_TOL = 1e-2
MAX_DOUBLINGS = 3


@dataclass(frozen=True)
class CellSolution:
    grid: TorusGrid
    times: np.ndarray
    w: np.ndarray
    p: HamiltonianPoint

    def growth(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(t, mean of w/t over y, spread of w/t over y) for t > 0."""
        t = self.times[1:]
        ratio = self.w[1:] / t[:, None]
        return t, ratio.mean(axis=1), ratio.max(axis=1) - ratio.min(axis=1)


def frozen_running_hamiltonian(
    p: HamiltonianPoint, slow: SlowSpec, control: ControlBox, y, n_control: int = 201
) -> np.ndarray:
    """
    h_p(y) = min_u [mu_X g + sigma_X**2 H / 2 + L] at (x_bar, y), the full
    bracket with sigma_X = sigma_sf + sigma_sc.
    """
    y = np.asarray(y, dtype=float)
    if slow.quadratic_f is None:
        return minimize_hamiltonian_grid(p.x_bar, p.g, p.H, slow, control, y, n_control)[1]
    u, _ = minimize_quadratic_control(slow.quadratic_f(p.x_bar, p.g, p.H), control)
    sig = slow.sigma_sf(p.x_bar, y) + slow.sigma_sc(p.x_bar, u)
    value = (
        (slow.mu_sf(p.x_bar, y) + slow.mu_sc(p.x_bar, u)) * p.g
        + 0.5 * sig * sig * p.H
        + slow.l_sf(p.x_bar, y)
        + slow.l_sc(p.x_bar, u)
    )
    return np.broadcast_to(np.asarray(value, dtype=float), y.shape[:-1]).copy()


def rewritten_running_hamiltonian(
    p: HamiltonianPoint, slow: SlowSpec, control: ControlBox, y, n_control: int = 201
) -> np.ndarray:
    """Fast-dependent bracket plus the minimum of the control bracket."""
    y = np.asarray(y, dtype=float)
    _, sc_min = minimize_sc(slow, control, p.x_bar, p.g, p.H, n_control)
    value = slow.sf_bracket(p.x_bar, y, p.g, p.H) + sc_min
    return np.broadcast_to(np.asarray(value, dtype=float), y.shape[:-1]).copy()


def march_cell(
    generator: GeneratorMatrix, source: np.ndarray, T: float, dt: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Implicit Euler (I - dt L) w_{n+1} = w_n + dt source from w_0 = 0."""
    if T < 0 or dt <= 0:
        raise ScenarioError(f"invalid cell horizon T={T}, dt={dt}", StageType.CELL)
    steps = int(round(T / dt))
    size = generator.grid.size
    times = dt * np.arange(steps + 1)
    w = np.zeros((steps + 1, size))
    if steps == 0:
        return times, w
    try:
        lu = spla.splu((sp.identity(size, format="csr") - dt * generator.matrix).tocsc())
    except RuntimeError as e:
        raise NumericalError(f"cell system is singular: {e}", StageType.CELL) from e
    increment = dt * source
    for n in range(steps):
        w[n + 1] = lu.solve(w[n] + increment)
    return times, w


def solve_cell_t(
    p: HamiltonianPoint,
    fast: FastSpec,
    slow: SlowSpec,
    control: ControlBox,
    grid: TorusGrid,
    T: float,
    dt: float,
    n_control: int = 201,
) -> CellSolution:
    p.check(slow.alpha)
    generator = assemble_generator(fast, p.x_bar, grid)
    if not generator.monotone:
        logger.warning("Cell problem at x_bar=%.4g uses a non-monotone generator", p.x_bar)
    source = frozen_running_hamiltonian(p, slow, control, grid.points(), n_control)
    times, w = march_cell(generator, source, T, dt)
    bound = float(np.abs(source).max())
    if len(times) > 1:
        worst = float(np.abs(w[1:] / times[1:, None]).max())
        if worst > bound * (1.0 + 1e-9) + 1e-12:
            raise NumericalError(
                f"cell solution violates the maximum principle: {worst:.6g} > {bound:.6g}",
                StageType.CELL,
            )
    solution = CellSolution(grid=grid, times=times, w=w, p=p)
    check_spread_decay(solution, slack=1e-9 * bound + 1e-12)
    return solution


def check_spread_decay(solution: CellSolution, slack: float = 1e-12) -> None:
    """Spread of w/t must not grow over the second half of the recorded times."""
    t, _, spread = solution.growth()
    if t.size < 2:
        return
    tail = spread[t >= 0.5 * t[-1]]
    jumps = np.diff(tail)
    if jumps.size and jumps.max() > slack:
        k = int(np.argmax(jumps))
        raise NumericalError(
            f"cell spread grows late in the run: {tail[k]:.6g} -> {tail[k + 1]:.6g}",
            StageType.CELL,
        )


def solve_cell_until_flat(
    p: HamiltonianPoint,
    fast: FastSpec,
    slow: SlowSpec,
    control: ControlBox,
    grid: TorusGrid,
    T: float,
    dt: float,
    n_control: int = 201,
    spread_tol: float = SPREAD_TOL,
    max_doublings: int = MAX_DOUBLINGS,
) -> CellSolution:
    """
    solve_cell_t, doubling T while the final spread exceeds `spread_tol`.
    Gives up after `max_doublings` and returns the last solution.
    """
    solution = solve_cell_t(p, fast, slow, control, grid, T, dt, n_control)
    for _ in range(max_doublings):
        _, _, spread = solution.growth()
        if not spread.size or spread[-1] <= spread_tol:
            return solution
        T *= 2.0
        logger.warning(
            "Cell spread %.3g at x_bar=%.4g exceeds %.3g, retrying with T=%g",
            spread[-1], p.x_bar, spread_tol, T,
        )
        solution = solve_cell_t(p, fast, slow, control, grid, T, dt, n_control)
    _, _, spread = solution.growth()
    if spread.size and spread[-1] > spread_tol:
        logger.warning("Cell spread %.3g at x_bar=%.4g still above %.3g", spread[-1], p.x_bar, spread_tol)
    return solution


def effective_hamiltonian_longtime(
    p: HamiltonianPoint,
    fast: FastSpec,
    slow: SlowSpec,
    control: ControlBox,
    grid: TorusGrid,
    T: float,
    dt: float,
    n_control: int = 201,
) -> Tuple[float, float]:
    """(mean over y of w(T, y)/T, max - min over y of w(T, y)/T)."""
    solution = solve_cell_t(p, fast, slow, control, grid, T, dt, n_control)
    if T <= 0:
        return 0.0, 0.0
    ratio = solution.w[-1] / solution.times[-1]
    return float(ratio.mean()), float(ratio.max() - ratio.min())


def feynman_kac_mc(
    p: HamiltonianPoint,
    fast: FastSpec,
    slow: SlowSpec,
    control: ControlBox,
    y0: Sequence[float],
    T: float,
    dt: float,
    n_paths: int,
    seed: int,
    n_control: int = 201,
) -> Tuple[float, float]:
    """
    Mean and standard error of int_0^T h_p(Y(s)) ds along Euler-Maruyama
    paths of the fast dynamics frozen at p.x_bar, started at y0.
    """
    if n_paths < 1 or dt <= 0 or T < 0:
        raise ScenarioError(f"invalid Monte Carlo run: paths={n_paths}, T={T}, dt={dt}", StageType.CELL)
    rng = np.random.default_rng(seed)
    y = np.tile(np.asarray(y0, dtype=float), (n_paths, 1))
    total = np.zeros(n_paths)
    for _ in range(int(round(T / dt))):
        total += frozen_running_hamiltonian(p, slow, control, y, n_control) * dt
        y = np.mod(y + fast_increment(fast, p.x_bar, y, dt, rng), 1.0)
    stderr = float(total.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    return float(total.mean()), stderr


async def call(
    cfg: ScenarioConfig,
    out_dir: str,
    scenario_hash: str,
    points: Optional[Sequence[Tuple[float, float, float]]] = None,
    T: Optional[float] = None,
    out: Optional[str] = None,
    spread_tol: float = SPREAD_TOL,
    max_doublings: int = MAX_DOUBLINGS,
) -> Dict[str, Any]:
    """
    cell stage: long-time estimates at each point next to the quadrature
    value. T is doubled per point while the spread stays above `spread_tol`.
    Writes the growth history (x_bar, g, H, t, mean_w_over_t, spread)
    to <out_dir>/cell/cell.csv and

    {
      "points": [ { "x_bar": ..., "g": ..., "H": ..., "h_cell": ...,
                    "spread": ..., "horizon": ..., "h_quadrature": ... }, ... ]
    }
    """
    slow, fast = build_example(cfg)
    control = cfg.control_box
    grid = TorusGrid(cfg.d_y, cfg.n_torus)
    horizon = cfg.cell_horizon if T is None else T
    selected = [HamiltonianPoint(*map(float, pt)).check(cfg.alpha) for pt in (points or DEFAULT_POINTS)]

    def one(p: HamiltonianPoint):
        solution = solve_cell_until_flat(
            p, fast, slow, control, grid, horizon, cfg.cell_dt, cfg.n_control, spread_tol, max_doublings
        )
        density = solve_invariant_density(fast, p.x_bar, grid, cfg.tol_density)
        quad = effective_hamiltonian_quadrature(p, slow, density, control, cfg.n_control)
        return solution, quad

    results = await asyncio.gather(*(asyncio.to_thread(one, p) for p in selected))
    columns: List[List[np.ndarray]] = [[] for _ in range(6)]
    summary = []
    for p, (solution, quad) in zip(selected, results):
        t, mean, spread = solution.growth()
        for k, col in enumerate((np.full(t.size, p.x_bar), np.full(t.size, p.g), np.full(t.size, p.H), t, mean, spread)):
            columns[k].append(col)
        summary.append(
            {
                "x_bar": p.x_bar,
                "g": p.g,
                "H": p.H,
                "h_cell": float(mean[-1]) if mean.size else 0.0,
                "spread": float(spread[-1]) if spread.size else 0.0,
                "horizon": float(solution.times[-1]),
                "h_quadrature": quad,
            }
        )
    path = out or os.path.join(out_dir, StageType.CELL.value, "cell.csv")
    csvio.write_csv(
        path,
        ("x_bar", "g", "H", "t", "mean_w_over_t", "spread"),
        [np.concatenate(c) if c else np.empty(0) for c in columns],
        scenario_hash,
    )
    return make_success_response(StageType.CELL, {"history": path, "points": summary})
