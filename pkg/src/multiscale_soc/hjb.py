"""
Monotone finite-difference solvers for the effective HJB equation on
X = [-alpha, alpha] and the multiscale HJB equation on X x T^d.

Both use Howard policy iteration: for a fixed policy the discounted linear
system (beta I - L^u) v = l^u is solved exactly by sparse LU, then the
policy is improved node by node against the discrete Hamiltonian. Drift is
upwinded, slow diffusion uses the 3-point central stencil, and the Neumann
condition dv/dx = -h_minus at -alpha, dv/dx = h_plus at +alpha is imposed
through ghost nodes

    v_{-1} = v_1 + 2 h h_minus,    v_{N} = v_{N-2} + 2 h h_plus.

The multiscale product grid is flattened as node = i * n_torus + j with i
the slow index and j the flat torus index.
"""

import asyncio
import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from multiscale_soc import csvio
from multiscale_soc.model import ControlBox, FastSpec, ScenarioConfig, SlowSpec, build_example
from multiscale_soc.response import (
    NumericalError,
    ScenarioError,
    StageType,
    make_success_response,
)
from multiscale_soc.torus_fp import TorusGrid, assemble_generator, density_sweep

if TYPE_CHECKING:
    from multiscale_soc.homogenize import EffectiveTables

logger = logging.getLogger(__name__)

# Relative margin a candidate control must beat the current one by.
IMPROVEMENT_MARGIN = 1e-12
# Negative off-diagonal mass (relative to the diagonal) tolerated before warning.
CROSS_TERM_TOLERANCE = 1e-8
# Scalar evaluations per chunk of the brute-force minimiser.
GRID_CHUNK = 2_000_000


# ---------------------------------------------------------------------------
# Pointwise minimisers
# ---------------------------------------------------------------------------


def minimize_quadratic_control(f, control: ControlBox):
    """argmin over the box of u**2 - f u; returns (u_star, min_value)."""
    f_arr = np.asarray(f, dtype=float)
    u = control.clamp(0.5 * f_arr)
    value = u * u - f_arr * u
    if f_arr.ndim == 0:
        return float(u), float(value)
    return u, value


def minimize_hamiltonian_grid(
    x,
    g,
    H,
    slow: SlowSpec,
    control: ControlBox,
    y: Optional[np.ndarray] = None,
    n_u: int = 201,
):
    """
    Exhaustive minimum over a uniform control grid of

        (mu_sf + mu_sc) g + (sigma_sf + sigma_sc)**2 H / 2 + l_sf + l_sc

    at frozen (x, y). Without `y` only the control-dependent part is
    minimised. Returns (u_star, min_value) broadcast over x, g, H (and the
    leading axes of y).
    """
    if n_u < 2:
        raise ScenarioError(f"control grid needs n_u >= 2, got {n_u}")
    u_grid = control.grid(n_u)
    if y is None:
        x_b, g_b, H_b = np.broadcast_arrays(
            np.asarray(x, dtype=float), np.asarray(g, dtype=float), np.asarray(H, dtype=float)
        )
        y_flat = None
    else:
        y = np.asarray(y, dtype=float)
        lead = np.broadcast(np.asarray(x), np.asarray(g), np.asarray(H), y[..., 0]).shape
        x_b, g_b, H_b = (np.broadcast_to(np.asarray(a, dtype=float), lead) for a in (x, g, H))
        y_flat = np.broadcast_to(y, lead + (y.shape[-1],)).reshape(-1, y.shape[-1])
    shape = x_b.shape
    xs, gs, Hs = (a.reshape(-1) for a in (x_b, g_b, H_b))
    u_star = np.empty(xs.size)
    best = np.empty(xs.size)
    chunk = max(1, GRID_CHUNK // len(u_grid))
    for start in range(0, xs.size, chunk):
        sl = slice(start, start + chunk)
        xc, gc, Hc = xs[sl, None], gs[sl, None], Hs[sl, None]
        u = u_grid[None, :]
        values = np.asarray(slow.sc_bracket(xc, u, gc, Hc), dtype=float)
        if y_flat is not None:
            yc = y_flat[sl]
            sf = np.asarray(slow.sf_bracket(xs[sl], yc, gs[sl], Hs[sl]), dtype=float)
            cross = np.asarray(slow.sigma_sf(xs[sl], yc), dtype=float)[:, None] * slow.sigma_sc(xc, u) * Hc
            values = values + sf[:, None] + cross
        values = np.broadcast_to(values, (xc.shape[0], len(u_grid)))
        k = np.argmin(values, axis=1)
        u_star[sl] = u_grid[k]
        best[sl] = values[np.arange(len(k)), k]
    if len(shape) == 0:
        return float(u_star[0]), float(best[0])
    return u_star.reshape(shape), best.reshape(shape)


def minimize_sc(slow: SlowSpec, control: ControlBox, x, g, H, n_u: int = 201):
    """Minimum of the control-dependent bracket; closed form when the model has one."""
    if slow.quadratic_f is not None:
        u, value = minimize_quadratic_control(slow.quadratic_f(x, g, H), control)
        return u, value + slow.quadratic_offset
    return minimize_hamiltonian_grid(x, g, H, slow, control, None, n_u)


# ---------------------------------------------------------------------------
# Value fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyField:
    values: np.ndarray
    control: ControlBox

    def __post_init__(self):
        slack = 1e-12 * max(1.0, abs(self.control.lower), abs(self.control.upper))
        if np.any(self.values < self.control.lower - slack) or np.any(
            self.values > self.control.upper + slack
        ):
            raise NumericalError(
                f"policy leaves the control box [{self.control.lower}, {self.control.upper}]"
            )


@dataclass(frozen=True)
class ValueField1D:
    x_nodes: np.ndarray
    v: np.ndarray
    policy: PolicyField
    beta: float
    residual: float
    iterations: int = 0
    h_minus: float = 0.0
    h_plus: float = 0.0


@dataclass(frozen=True)
class ValueField3D:
    """Value on the product grid; v and policy have shape (n_slow, n_torus**d_y)."""

    x_nodes: np.ndarray
    grid: TorusGrid
    v: np.ndarray
    policy: PolicyField
    epsilon: float
    beta: float
    residual: float
    iterations: int = 0
    h_minus: float = 0.0
    h_plus: float = 0.0
    cross_ratio: float = 0.0

    def at(self, x0: float, y0: Sequence[float]) -> float:
        """Value at (x0, y0): linear in x, nearest torus node in y."""
        j = self.grid.flat(np.rint(np.asarray(y0, dtype=float) * self.grid.n).astype(int)[None, :])[0]
        return float(np.interp(x0, self.x_nodes, self.v[:, j]))


ValueField = Union[ValueField1D, ValueField3D]


# ---------------------------------------------------------------------------
# Discrete operators
# ---------------------------------------------------------------------------


def _slow_differences(v: np.ndarray, h: float, h_minus: float, h_plus: float):
    """One-sided, central and second differences along axis 0, ghost nodes included."""
    left = np.expand_dims(np.asarray(v[1] + 2.0 * h * h_minus), 0)
    right = np.expand_dims(np.asarray(v[-2] + 2.0 * h * h_plus), 0)
    ext = np.concatenate([left, v, right], axis=0)
    v_left, v_right = ext[:-2], ext[2:]
    forward = (v_right - v) / h
    backward = (v - v_left) / h
    central = (v_right - v_left) / (2.0 * h)
    second = (v_right - 2.0 * v + v_left) / (h * h)
    return forward, backward, central, second


def discrete_hamiltonian_1d(
    v: np.ndarray,
    h: float,
    drift: np.ndarray,
    variance: np.ndarray,
    running: np.ndarray,
    h_minus: float = 0.0,
    h_plus: float = 0.0,
) -> np.ndarray:
    """
    Upwind discrete operator b+ D+v + b- D-v + (variance / 2) D2v + running at
    every slow node, Neumann ghosts included.
    """
    forward, backward, _, second = _slow_differences(v, h, h_minus, h_plus)
    return (
        np.maximum(drift, 0.0) * forward
        + np.minimum(drift, 0.0) * backward
        + 0.5 * variance * second
        + running
    )


def _slow_stencil(
    drift: np.ndarray,
    half_variance: np.ndarray,
    slow_index: np.ndarray,
    n_x: int,
    stride: int,
    h: float,
    h_minus: float,
    h_plus: float,
):
    """COO triplets of the slow operator and the constants the ghost nodes contribute."""
    if np.any(half_variance < -1e-14):
        raise NumericalError(
            f"negative slow diffusion {half_variance.min():.3g}; ellipticity violated",
            StageType.SOLVE_EFFECTIVE,
        )
    to_left = half_variance / (h * h) + np.maximum(-drift, 0.0) / h
    to_right = half_variance / (h * h) + np.maximum(drift, 0.0) / h
    nodes = np.arange(drift.size)
    left = nodes - stride
    right = nodes + stride
    first = slow_index == 0
    last = slow_index == n_x - 1
    const = np.where(first, to_left * 2.0 * h * h_minus, 0.0) + np.where(
        last, to_right * 2.0 * h * h_plus, 0.0
    )
    left = np.where(first, nodes + stride, left)
    right = np.where(last, nodes - stride, right)
    rows = np.concatenate([nodes, nodes, nodes])
    cols = np.concatenate([left, right, nodes])
    vals = np.concatenate([to_left, to_right, -(to_left + to_right)])
    return rows, cols, vals, const


def _control_candidates(
    slow: SlowSpec,
    control: ControlBox,
    x: np.ndarray,
    sf_drift: np.ndarray,
    differences,
    n_control: int,
    include_grid: bool,
) -> List[np.ndarray]:
    forward, backward, central, second = differences
    shape = x.shape
    candidates: List[np.ndarray] = []
    if slow.quadratic_f is not None:
        # Central first so that ties keep it.
        for g in (central, forward, backward):
            candidates.append(control.clamp(0.5 * np.asarray(slow.quadratic_f(x, g, second))))
        # Upwind switch point of a control-affine drift.
        c0 = np.broadcast_to(np.asarray(slow.mu_sc(x, 0.0), dtype=float), shape)
        slope = np.broadcast_to(np.asarray(slow.mu_sc(x, 1.0), dtype=float), shape) - c0
        safe = np.where(slope == 0.0, 1.0, slope)
        kink = np.where(slope != 0.0, -(sf_drift + c0) / safe, control.lower)
        candidates.append(control.clamp(kink))
        candidates.append(np.full(shape, control.lower))
        candidates.append(np.full(shape, control.upper))
    if slow.quadratic_f is None or include_grid:
        candidates.extend(np.full(shape, u) for u in control.grid(n_control))
    return candidates


def _improve(q_of: Callable[[np.ndarray], np.ndarray], candidates, u: np.ndarray):
    best_u = u
    best_q = q_of(u)
    for cand in candidates:
        q = q_of(cand)
        better = q < best_q - IMPROVEMENT_MARGIN * (1.0 + np.abs(best_q))
        best_u = np.where(better, cand, best_u)
        best_q = np.where(better, q, best_q)
    return best_u, best_q


def _policy_iteration(
    assemble: Callable[[np.ndarray], Tuple[sp.csr_matrix, np.ndarray, np.ndarray]],
    evaluate: Callable[[np.ndarray], Tuple[Callable, List[np.ndarray]]],
    u0: np.ndarray,
    beta: float,
    tol: float,
    max_iter: int,
    stage: StageType,
    label: str,
):
    """Howard iteration; returns (v, policy, residual, iterations, operator)."""
    u = u0
    v_prev = None
    for iteration in range(1, max_iter + 1):
        operator, const, running = assemble(u)
        system = (beta * sp.identity(operator.shape[0], format="csr") - operator).tocsc()
        try:
            v = spla.splu(system).solve(running + const)
        except RuntimeError as e:
            raise NumericalError(f"{label}: linear solve failed: {e}", stage) from e
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"{label}: non-finite value after linear solve", stage)
        q_of, candidates = evaluate(v)
        u_new, q = _improve(q_of, candidates, u)
        change = math.inf if v_prev is None else float(np.abs(v - v_prev).max())
        logger.debug("%s: iteration %d, value change %.3g", label, iteration, change)
        if np.array_equal(u_new, u) or change <= tol:
            residual = float(np.abs(beta * v - q).max())
            logger.info("%s: converged in %d iterations, residual %.3g", label, iteration, residual)
            return v, u, residual, iteration, operator
        u, v_prev = u_new, v
    raise NumericalError(
        f"{label}: policy iteration did not converge in {max_iter} iterations", stage
    )


def _boundary_data(slow: SlowSpec, theta_e: Optional[float]) -> Tuple[float, float]:
    if theta_e is None:
        return slow.h_minus, slow.h_plus
    return float(theta_e), float(theta_e)


def slow_nodes(alpha: float, n_slow: int) -> np.ndarray:
    if n_slow < 3:
        raise ScenarioError(f"slow grid needs at least 3 nodes, got {n_slow}")
    return np.linspace(-alpha, alpha, n_slow)


# ---------------------------------------------------------------------------
# Effective problem
# ---------------------------------------------------------------------------


def solve_effective_hjb(
    tables: "EffectiveTables",
    slow: SlowSpec,
    control: ControlBox,
    beta: float,
    theta_e: Optional[float] = None,
    n_slow: Optional[int] = None,
    tol: float = 1e-10,
    max_iter: int = 200,
    n_control: int = 201,
) -> ValueField1D:
    """
    Policy iteration for beta v - min_u [(mu_bar + mu_sc) v' + (a_bar + sigma_sc**2) v'' / 2
    + l_bar + l_sc] = 0 with Neumann data. The tables are interpolated
    linearly onto the grid when their nodes differ from it.
    """
    if beta <= 0:
        raise ScenarioError(f"beta must be positive, got {beta}", StageType.SOLVE_EFFECTIVE)
    n = n_slow or len(tables.x_nodes)
    x = slow_nodes(slow.alpha, n)
    h = float(x[1] - x[0])
    h_minus, h_plus = _boundary_data(slow, theta_e)
    coefficients = tables.at(x)
    mu_bar, a_bar, l_bar = coefficients["mu_bar"], coefficients["a_bar"], coefficients["l_bar"]
    index = np.arange(n)

    def parts(u):
        sig = np.asarray(slow.sigma_sc(x, u), dtype=float)
        drift = mu_bar + np.asarray(slow.mu_sc(x, u), dtype=float)
        variance = a_bar + sig * sig
        running = l_bar + np.asarray(slow.l_sc(x, u), dtype=float)
        return drift, variance, running

    def assemble(u):
        drift, variance, running = parts(u)
        rows, cols, vals, const = _slow_stencil(drift, 0.5 * variance, index, n, 1, h, h_minus, h_plus)
        operator = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        return operator, const, running

    def evaluate(v):
        differences = _slow_differences(v, h, h_minus, h_plus)

        def q_of(u):
            drift, variance, running = parts(u)
            return discrete_hamiltonian_1d(v, h, drift, variance, running, h_minus, h_plus)

        return q_of, _control_candidates(slow, control, x, mu_bar, differences, n_control, False)

    u0 = np.full(n, control.lower)
    q0, cands0 = evaluate(np.zeros(n))
    u0, _ = _improve(q0, cands0, u0)
    v, u, residual, iterations, _ = _policy_iteration(
        assemble, evaluate, u0, beta, tol, max_iter, StageType.SOLVE_EFFECTIVE, "effective HJB"
    )
    return ValueField1D(
        x_nodes=x,
        v=v,
        policy=PolicyField(u, control),
        beta=float(beta),
        residual=residual,
        iterations=iterations,
        h_minus=h_minus,
        h_plus=h_plus,
    )


# ---------------------------------------------------------------------------
# Multiscale problem
# ---------------------------------------------------------------------------


def _cross_stencil(coef, slow_index, y_index, n_x, n_torus, grid: TorusGrid, hx):
    """Centred mixed-difference triplets of sum_k coef_k d2/dx dy_k at interior slow rows."""
    nodes = np.flatnonzero((slow_index > 0) & (slow_index < n_x - 1))
    up = (slow_index[nodes] + 1) * n_torus
    down = (slow_index[nodes] - 1) * n_torus
    rows, cols, vals = [], [], []
    for k in range(grid.d_y):
        e = np.zeros(grid.d_y, dtype=int)
        e[k] = 1
        plus = grid.neighbour(e)[y_index[nodes]]
        minus = grid.neighbour(-e)[y_index[nodes]]
        w = coef[nodes, k] / (4.0 * hx * grid.h)
        rows += [nodes] * 4
        cols += [up + plus, up + minus, down + plus, down + minus]
        vals += [w, -w, -w, w]
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def _mixed_differences(v2: np.ndarray, grid: TorusGrid, hx: float) -> np.ndarray:
    """(n_slow * n_torus, d_y) centred d2v/dx dy_k, zero on the boundary rows."""
    out = np.zeros(v2.shape + (grid.d_y,))
    for k in range(grid.d_y):
        e = np.zeros(grid.d_y, dtype=int)
        e[k] = 1
        plus = grid.neighbour(e)
        minus = grid.neighbour(-e)
        out[1:-1, :, k] = (
            v2[2:, plus] - v2[2:, minus] - v2[:-2, plus] + v2[:-2, minus]
        ) / (4.0 * hx * grid.h)
    return out.reshape(-1, grid.d_y)


def _negative_offdiagonal_ratio(operator: sp.csr_matrix) -> float:
    diag = np.abs(operator.diagonal())
    off = (operator - sp.diags(operator.diagonal())).tocsr()
    negative = off.copy()
    negative.data = np.minimum(negative.data, 0.0)
    mass = np.asarray(-negative.sum(axis=1)).ravel()
    safe = np.where(diag > 0.0, diag, 1.0)
    return float(np.max(np.where(diag > 0.0, mass / safe, 0.0)))


def solve_multiscale_hjb(
    slow: SlowSpec,
    fast: FastSpec,
    control: ControlBox,
    epsilon: float,
    beta: float,
    theta_e: Optional[float] = None,
    n_slow: int = 65,
    n_torus: int = 32,
    tol: float = 1e-10,
    max_iter: int = 200,
    n_control: int = 201,
) -> ValueField3D:
    """
    Policy iteration for the multiscale HJB equation on X x T^d. The fast
    generator enters scaled by 1/epsilon, the slow/fast cross diffusion
    (sigma_sf + sigma_sc) b_xy by 1/sqrt(epsilon); every term is implicit.
    """
    if epsilon <= 0:
        raise ScenarioError(f"epsilon must be positive, got {epsilon}", StageType.SOLVE_MULTISCALE)
    if beta <= 0:
        raise ScenarioError(f"beta must be positive, got {beta}", StageType.SOLVE_MULTISCALE)
    stage = StageType.SOLVE_MULTISCALE
    grid = TorusGrid(fast.d_y, n_torus)
    x_nodes = slow_nodes(slow.alpha, n_slow)
    hx = float(x_nodes[1] - x_nodes[0])
    h_minus, h_plus = _boundary_data(slow, theta_e)
    n_t = grid.size
    size = n_slow * n_t
    nodes = np.arange(size)
    slow_index = nodes // n_t
    y_index = nodes % n_t
    X = x_nodes[slow_index]
    Y = grid.points()[y_index]

    sf_drift = np.broadcast_to(np.asarray(slow.mu_sf(X, Y), dtype=float), (size,))
    sf_sigma = np.broadcast_to(np.asarray(slow.sigma_sf(X, Y), dtype=float), (size,))
    sf_cost = np.broadcast_to(np.asarray(slow.l_sf(X, Y), dtype=float), (size,))
    loading = np.broadcast_to(np.asarray(fast.b_xy(X, Y), dtype=float), (size, fast.d_y))
    has_cross = bool(np.any(loading != 0.0))
    fast_block = sp.block_diag(
        [assemble_generator(fast, float(x), grid).matrix for x in x_nodes], format="csr"
    ) / epsilon
    root_eps = math.sqrt(epsilon)
    label = f"multiscale HJB (epsilon={epsilon:g})"

    def parts(u):
        sig = sf_sigma + np.asarray(slow.sigma_sc(X, u), dtype=float)
        drift = sf_drift + np.asarray(slow.mu_sc(X, u), dtype=float)
        running = sf_cost + np.asarray(slow.l_sc(X, u), dtype=float)
        return drift, sig, running

    def assemble(u):
        drift, sig, running = parts(u)
        rows, cols, vals, const = _slow_stencil(
            drift, 0.5 * sig * sig, slow_index, n_slow, n_t, hx, h_minus, h_plus
        )
        if has_cross:
            cr, cc, cv = _cross_stencil(
                sig[:, None] * loading / root_eps, slow_index, y_index, n_slow, n_t, grid, hx
            )
            rows, cols, vals = (np.concatenate(p) for p in ((rows, cr), (cols, cc), (vals, cv)))
        operator = sp.csr_matrix((vals, (rows, cols)), shape=(size, size)) + fast_block
        return operator.tocsr(), const, running

    def evaluate(v):
        v2 = v.reshape(n_slow, n_t)
        differences = tuple(d.reshape(-1) for d in _slow_differences(v2, hx, h_minus, h_plus))
        forward, backward, _, second = differences
        fast_part = fast_block @ v
        mixed = _mixed_differences(v2, grid, hx) if has_cross else None

        def q_of(u):
            drift, sig, running = parts(u)
            q = (
                np.maximum(drift, 0.0) * forward
                + np.minimum(drift, 0.0) * backward
                + 0.5 * sig * sig * second
                + fast_part
                + running
            )
            if mixed is not None:
                q = q + sig * np.sum(loading * mixed, axis=1) / root_eps
            return q

        return q_of, _control_candidates(slow, control, X, sf_drift, differences, n_control, has_cross)

    u0 = np.full(size, control.lower)
    q0, cands0 = evaluate(np.zeros(size))
    u0, _ = _improve(q0, cands0, u0)
    v, u, residual, iterations, operator = _policy_iteration(
        assemble, evaluate, u0, beta, tol, max_iter, stage, label
    )
    cross_ratio = _negative_offdiagonal_ratio(operator) if has_cross else 0.0
    if cross_ratio > CROSS_TERM_TOLERANCE:
        logger.warning(
            "%s: cross term breaks the M-matrix property (negative off-diagonal ratio %.3g)",
            label,
            cross_ratio,
        )
    return ValueField3D(
        x_nodes=x_nodes,
        grid=grid,
        v=v.reshape(n_slow, n_t),
        policy=PolicyField(u.reshape(n_slow, n_t), control),
        epsilon=float(epsilon),
        beta=float(beta),
        residual=residual,
        iterations=iterations,
        h_minus=h_minus,
        h_plus=h_plus,
        cross_ratio=cross_ratio,
    )


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceRow:
    epsilon: float
    err_inf: float
    err_sup: float
    runtime_s: float


@dataclass
class ConvergenceStudy:
    rows: List[ConvergenceRow]
    effective: ValueField1D
    fields: Dict[float, ValueField3D] = field(default_factory=dict)

    @property
    def err_sup(self) -> np.ndarray:
        return np.array([r.err_sup for r in self.rows])


def envelope_errors(effective: ValueField1D, multiscale: ValueField3D) -> Tuple[float, float]:
    """(max_x |min_y v_eps - v_bar|, max_x |max_y v_eps - v_bar|) on shared slow nodes."""
    if len(effective.x_nodes) != len(multiscale.x_nodes) or not np.allclose(
        effective.x_nodes, multiscale.x_nodes, rtol=0.0, atol=1e-12
    ):
        raise ScenarioError("effective and multiscale fields use different slow grids", StageType.CONVERGE)
    err_inf = float(np.abs(multiscale.v.min(axis=1) - effective.v).max())
    err_sup = float(np.abs(multiscale.v.max(axis=1) - effective.v).max())
    return err_inf, err_sup


def convergence_study(cfg: ScenarioConfig) -> ConvergenceStudy:
    """Effective solve plus one multiscale solve per epsilon, rows by decreasing epsilon."""
    # homogenize imports this module.
    from multiscale_soc.homogenize import effective_tables

    slow, fast = build_example(cfg)
    control = cfg.control_box
    x_nodes = slow_nodes(cfg.alpha, cfg.n_slow)
    grid = TorusGrid(cfg.d_y, cfg.n_torus)
    tables = effective_tables(slow, density_sweep(fast, x_nodes, grid, cfg.tol_density), x_nodes)
    effective = solve_effective_hjb(
        tables, slow, control, cfg.beta, None, cfg.n_slow, cfg.tol_policy, cfg.max_policy_iter, cfg.n_control
    )
    study = ConvergenceStudy(rows=[], effective=effective)
    for epsilon in sorted(cfg.epsilon_list, reverse=True):
        started = time.perf_counter()
        field_eps = solve_multiscale_hjb(
            slow, fast, control, epsilon, cfg.beta, None, cfg.n_slow, cfg.n_torus,
            cfg.tol_policy, cfg.max_policy_iter, cfg.n_control,
        )
        err_inf, err_sup = envelope_errors(effective, field_eps)
        study.rows.append(ConvergenceRow(epsilon, err_inf, err_sup, time.perf_counter() - started))
        study.fields[epsilon] = field_eps
        logger.info("epsilon=%g: err_inf=%.4g err_sup=%.4g", epsilon, err_inf, err_sup)
    return study


def check_neumann(field_: ValueField, theta_e: Optional[float] = None) -> float:
    """
    Max mismatch of the second-order one-sided boundary derivatives with the
    Neumann data (-h_minus at -alpha, +h_plus at +alpha).
    """
    if theta_e is None:
        h_minus, h_plus = field_.h_minus, field_.h_plus
    else:
        h_minus = h_plus = float(theta_e)
    v = np.asarray(field_.v, dtype=float)
    h = float(field_.x_nodes[1] - field_.x_nodes[0])
    left = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h)
    right = (3.0 * v[-1] - 4.0 * v[-2] + v[-3]) / (2.0 * h)
    return float(max(np.max(np.abs(left + h_minus)), np.max(np.abs(right - h_plus))))


def markov_policy_from_value(
    field_: ValueField, slow: SlowSpec, control: ControlBox, n_control: int = 201
) -> PolicyField:
    """Feedback control from difference-quotient derivatives of a value field."""
    v = np.asarray(field_.v, dtype=float)
    x = field_.x_nodes
    g = np.gradient(v, x, axis=0, edge_order=2)
    H = np.gradient(g, x, axis=0, edge_order=2)
    X = np.broadcast_to(x.reshape((-1,) + (1,) * (v.ndim - 1)), v.shape)
    u, _ = minimize_sc(slow, control, X, g, H, n_control)
    return PolicyField(np.broadcast_to(np.asarray(u, dtype=float), v.shape).copy(), control)


def value_bound(
    slow: SlowSpec, control: ControlBox, beta: float, d_y: int = 2, n_x: int = 101, n_y: int = 16, n_u: int = 201
) -> float:
    """sup |L| / beta sampled over a grid of X x T^d x U."""
    x = np.linspace(-slow.alpha, slow.alpha, n_x)
    y = TorusGrid(d_y, n_y).points()
    u = control.grid(n_u)
    sf = np.abs(np.asarray(slow.l_sf(x[:, None], y[None, :, :]), dtype=float)).max()
    sc = np.abs(np.asarray(slow.l_sc(x[:, None], u[None, :]), dtype=float)).max()
    return float((sf + sc) / beta)


# ---------------------------------------------------------------------------
# Persistence and stages
# ---------------------------------------------------------------------------


def write_value_1d(field_: ValueField1D, path: str, scenario_hash: str) -> str:
    return csvio.write_csv(
        path, ("x", "v", "policy"), [field_.x_nodes, field_.v, field_.policy.values], scenario_hash
    )


def read_value_1d(path: str, control: ControlBox, beta: float, h_minus: float, h_plus: float) -> ValueField1D:
    columns, data = csvio.read_csv(path)
    if columns[:3] != ["x", "v", "policy"]:
        raise NumericalError(f"{path} is not an effective value file", StageType.SOLVE_EFFECTIVE)
    return ValueField1D(
        x_nodes=data["x"],
        v=data["v"],
        policy=PolicyField(data["policy"], control),
        beta=beta,
        residual=float("nan"),
        h_minus=h_minus,
        h_plus=h_plus,
    )


def write_value_3d(field_: ValueField3D, path: str, scenario_hash: str) -> str:
    n_x, n_t = field_.v.shape
    y = field_.grid.points()
    columns = ["x"] + [f"y{k + 1}" for k in range(field_.grid.d_y)] + ["v", "policy"]
    data = [np.repeat(field_.x_nodes, n_t)]
    data += [np.tile(y[:, k], n_x) for k in range(field_.grid.d_y)]
    data += [field_.v.ravel(), field_.policy.values.ravel()]
    return csvio.write_csv(path, columns, data, scenario_hash)


def _stage_config(cfg: ScenarioConfig):
    slow, fast = build_example(cfg)
    return slow, fast, cfg.control_box


async def call(
    cfg: ScenarioConfig, tables: "EffectiveTables", out_dir: str, scenario_hash: str
) -> Tuple[Dict[str, Any], ValueField1D]:
    """
    solve-effective stage; writes <out_dir>/solve-effective/value.csv.

    {
      "value": "<path>",
      "iterations": <int>,
      "residual": <float>,
      "neumann_residual": <float>,
      "value_bound": <float>
    }
    """
    slow, _, control = _stage_config(cfg)
    result = await asyncio.to_thread(
        solve_effective_hjb, tables, slow, control, cfg.beta, None, cfg.n_slow,
        cfg.tol_policy, cfg.max_policy_iter, cfg.n_control,
    )
    path = os.path.join(out_dir, StageType.SOLVE_EFFECTIVE.value, "value.csv")
    write_value_1d(result, path, scenario_hash)
    data = {
        "value": path,
        "iterations": result.iterations,
        "residual": result.residual,
        "neumann_residual": check_neumann(result),
        "value_bound": value_bound(slow, control, cfg.beta, cfg.d_y),
    }
    return make_success_response(StageType.SOLVE_EFFECTIVE, data), result


async def call_multiscale(
    cfg: ScenarioConfig, out_dir: str, scenario_hash: str
) -> Tuple[Dict[str, Any], Dict[float, ValueField3D]]:
    """
    solve-multiscale stage: one value file per epsilon, solved concurrently.

    {
      "fields": [ { "epsilon": ..., "value": "<path>", "iterations": ...,
                    "residual": ..., "cross_ratio": ... }, ... ]
    }
    """
    slow, fast, control = _stage_config(cfg)
    epsilons = sorted(cfg.epsilon_list, reverse=True)
    results = await asyncio.gather(
        *(
            asyncio.to_thread(
                solve_multiscale_hjb, slow, fast, control, eps, cfg.beta, None, cfg.n_slow,
                cfg.n_torus, cfg.tol_policy, cfg.max_policy_iter, cfg.n_control,
            )
            for eps in epsilons
        )
    )
    entries = []
    for eps, result in zip(epsilons, results):
        path = os.path.join(out_dir, StageType.SOLVE_MULTISCALE.value, f"value_eps_{eps:g}.csv")
        write_value_3d(result, path, scenario_hash)
        entries.append(
            {
                "epsilon": eps,
                "value": path,
                "iterations": result.iterations,
                "residual": result.residual,
                "cross_ratio": result.cross_ratio,
            }
        )
    return make_success_response(StageType.SOLVE_MULTISCALE, {"fields": entries}), dict(
        zip(epsilons, results)
    )


async def call_converge(
    cfg: ScenarioConfig,
    effective: ValueField1D,
    fields: Dict[float, ValueField3D],
    out_dir: str,
    scenario_hash: str,
) -> Tuple[Dict[str, Any], List[ConvergenceRow]]:
    """
    converge stage: error envelopes per epsilon; fields missing from `fields`
    are solved here. Writes <out_dir>/converge/convergence.csv
    (epsilon, err_inf, err_sup, runtime_s).
    """
    slow, fast, control = _stage_config(cfg)

    async def one(eps: float) -> ConvergenceRow:
        started = time.perf_counter()
        field_eps = fields.get(eps)
        if field_eps is None:
            field_eps = await asyncio.to_thread(
                solve_multiscale_hjb, slow, fast, control, eps, cfg.beta, None, cfg.n_slow,
                cfg.n_torus, cfg.tol_policy, cfg.max_policy_iter, cfg.n_control,
            )
            fields[eps] = field_eps
        err_inf, err_sup = envelope_errors(effective, field_eps)
        return ConvergenceRow(eps, err_inf, err_sup, time.perf_counter() - started)

    rows = list(await asyncio.gather(*(one(eps) for eps in sorted(cfg.epsilon_list, reverse=True))))
    path = os.path.join(out_dir, StageType.CONVERGE.value, "convergence.csv")
    csvio.write_csv(
        path,
        ("epsilon", "err_inf", "err_sup", "runtime_s"),
        [
            [r.epsilon for r in rows],
            [r.err_inf for r in rows],
            [r.err_sup for r in rows],
            [r.runtime_s for r in rows],
        ],
        scenario_hash,
    )
    sup = [r.err_sup for r in rows]
    data = {
        "convergence": path,
        "rows": [dataclasses.asdict(r) for r in rows],
        "strictly_decreasing": bool(all(a > b for a, b in zip(sup, sup[1:]))),
        "halved": bool(sup[-1] <= 0.5 * sup[0]),
    }
    return make_success_response(StageType.CONVERGE, data), rows
