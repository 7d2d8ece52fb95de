"""
Monte Carlo for the reflected multiscale and effective dynamics.

Slow states are advanced by Euler-Maruyama and projected back onto
X = [-alpha, alpha]; the overshoot is the local-time increment and is charged
the boundary cost h_minus or h_plus. Running cost is integrated with the
exact discount weight of each step, (e^{-beta t_k} - e^{-beta t_{k+1}}) / beta,
and boundary cost with the pre-step factor e^{-beta t_k}.
"""

import asyncio
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numba as nb
import numpy as np

from multiscale_soc import csvio
from multiscale_soc.hjb import ValueField1D, ValueField3D, value_bound
from multiscale_soc.homogenize import EffectiveTables, effective_slow_spec
from multiscale_soc.model import ControlBox, FastSpec, ScenarioConfig, SlowSpec, build_example
from multiscale_soc.response import ScenarioError, StageType, make_success_response
from multiscale_soc.torus_fp import fast_increment

logger = logging.getLogger(__name__)

PolicyLike = Union[float, ValueField1D, ValueField3D, Callable[[np.ndarray, Optional[np.ndarray]], np.ndarray]]


@dataclass(frozen=True)
class PathEstimate:
    mean: float
    stderr: float
    n_paths: int
    horizon: float
    dt: float
    seed: int
    costs: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    trajectories: Optional[np.ndarray] = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class ReflectedStep:
    x_new: float
    dl: float
    reflected: bool


@nb.njit(cache=True)
def reflect_paths(x_prop, alpha, x_out, dl_out):
    """Project each proposal onto [-alpha, alpha]; dl is the overshoot."""
    for p in range(x_prop.shape[0]):
        x = x_prop[p]
        if x > alpha:
            x_out[p] = alpha
            dl_out[p] = x - alpha
        elif x < -alpha:
            x_out[p] = -alpha
            dl_out[p] = -alpha - x
        else:
            x_out[p] = x
            dl_out[p] = 0.0


def step_reflected_slow(
    x: float, drift: float, dispersion: float, dt: float, dW: float, alpha: float
) -> ReflectedStep:
    if dt <= 0:
        raise ScenarioError(f"dt must be positive, got {dt}", StageType.SIMULATE)
    if not -alpha <= x <= alpha:
        raise ScenarioError(f"x={x} outside X=[-{alpha}, {alpha}]", StageType.SIMULATE)
    proposal = np.array([x + drift * dt + dispersion * dW])
    x_out = np.empty(1)
    dl_out = np.empty(1)
    reflect_paths(proposal, alpha, x_out, dl_out)
    return ReflectedStep(float(x_out[0]), float(dl_out[0]), bool(dl_out[0] > 0.0))


def horizon_for(slow: SlowSpec, control: ControlBox, beta: float, tol: float, d_y: int = 2) -> float:
    """Truncation time after which the discounted tail is below tol, with safety factor 2."""
    if tol <= 0:
        raise ScenarioError(f"tol must be positive, got {tol}", StageType.SIMULATE)
    bound = value_bound(slow, control, beta, d_y)
    return 2.0 * math.log(max(bound, 1.0) / tol) / beta


def policy_function(policy: PolicyLike, control: ControlBox) -> Callable[[np.ndarray, Optional[np.ndarray]], np.ndarray]:
    """Feedback u(x, y) from a constant, a solved value field, or a callable."""
    if callable(policy):
        return lambda x, y: control.clamp(policy(x, y))
    if isinstance(policy, ValueField1D):
        nodes, values = policy.x_nodes, policy.policy.values
        return lambda x, y: np.interp(x, nodes, values)
    if isinstance(policy, ValueField3D):
        nodes, values, grid = policy.x_nodes, policy.policy.values, policy.grid

        def feedback(x, y):
            j = grid.flat(np.rint(y * grid.n).astype(int))
            pos = np.clip((x - nodes[0]) / (nodes[1] - nodes[0]), 0.0, len(nodes) - 1.0)
            i = np.minimum(pos.astype(int), len(nodes) - 2)
            w = pos - i
            return (1.0 - w) * values[i, j] + w * values[i + 1, j]

        return feedback
    constant = float(control.clamp(float(policy)))
    return lambda x, y: np.full(np.shape(x), constant)


def _simulate(
    slow: SlowSpec,
    feedback: Callable,
    fast_step: Optional[Callable],
    dispersion: Callable,
    x0: float,
    y0: Optional[Sequence[float]],
    d_y: int,
    beta: float,
    T: float,
    dt: float,
    n_paths: int,
    seed: int,
    record_paths: int,
) -> PathEstimate:
    alpha = slow.alpha
    if not -alpha <= x0 <= alpha:
        raise ScenarioError(f"x0={x0} outside X=[-{alpha}, {alpha}]", StageType.SIMULATE)
    if n_paths < 1 or T <= 0 or dt <= 0 or beta <= 0:
        raise ScenarioError(
            f"invalid simulation: paths={n_paths}, T={T}, dt={dt}, beta={beta}", StageType.SIMULATE
        )
    rng = np.random.default_rng(seed)
    steps = max(1, int(round(T / dt)))
    x = np.full(n_paths, float(x0))
    y = np.tile(np.asarray(y0 if y0 is not None else np.zeros(d_y), dtype=float), (n_paths, 1))
    cost = np.zeros(n_paths)
    x_next = np.empty(n_paths)
    dl = np.empty(n_paths)
    trajectories = np.empty((min(record_paths, n_paths), steps + 1)) if record_paths else None
    if trajectories is not None:
        trajectories[:, 0] = x[: trajectories.shape[0]]
    sqrt_dt = math.sqrt(dt)

    for k in range(steps):
        discount = math.exp(-beta * k * dt)
        weight = (discount - math.exp(-beta * (k + 1) * dt)) / beta
        u = feedback(x, y)
        running = slow.l_sf(x, y) + slow.l_sc(x, u)
        cost += weight * running
        dw = rng.standard_normal(n_paths) * sqrt_dt
        drift = slow.mu_sf(x, y) + slow.mu_sc(x, u)
        proposal = x + drift * dt + dispersion(x, y, u) * dw
        if fast_step is not None:
            y = np.mod(y + fast_step(x, y, rng, dw), 1.0)
        reflect_paths(proposal, alpha, x_next, dl)
        boundary = np.where(x_next > 0.0, slow.h_plus, slow.h_minus)
        cost += discount * boundary * dl
        x, x_next = x_next, x
        if trajectories is not None:
            trajectories[:, k + 1] = x[: trajectories.shape[0]]

    stderr = float(cost.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    return PathEstimate(
        mean=float(np.mean(cost)),
        stderr=stderr,
        n_paths=n_paths,
        horizon=steps * dt,
        dt=dt,
        seed=seed,
        costs=cost,
        trajectories=trajectories,
    )


def simulate_multiscale_cost(
    slow: SlowSpec,
    fast: FastSpec,
    policy: PolicyLike,
    epsilon: float,
    x0: float,
    y0: Sequence[float],
    beta: float,
    T: float,
    dt: float,
    n_paths: int,
    seed: int,
    control: Optional[ControlBox] = None,
    record_paths: int = 0,
) -> PathEstimate:
    """Discounted path cost of the multiscale system under a feedback policy."""
    if epsilon <= 0:
        raise ScenarioError(f"epsilon must be positive, got {epsilon}", StageType.SIMULATE)
    if dt > epsilon / 10.0:
        logger.warning("dt=%g exceeds epsilon/10 for epsilon=%g; using dt=%g", dt, epsilon, epsilon / 10.0)
        dt = epsilon / 10.0
    control = control or ControlBox.interval(-np.inf, np.inf)
    feedback = policy_function(policy, control)
    drift_scale = 1.0 / epsilon
    noise_scale = 1.0 / math.sqrt(epsilon)

    def fast_step(x, y, rng, dw):
        return fast_increment(fast, x, y, dt, rng, drift_scale, noise_scale, dw_slow=dw)

    def dispersion(x, y, u):
        return slow.sigma_sf(x, y) + slow.sigma_sc(x, u)

    return _simulate(
        slow, feedback, fast_step, dispersion, x0, y0, fast.d_y, beta, T, dt, n_paths, seed, record_paths
    )


def simulate_effective_cost(
    tables: Union[EffectiveTables, SlowSpec],
    slow: SlowSpec,
    policy: PolicyLike,
    x0: float,
    beta: float,
    T: float,
    dt: float,
    n_paths: int,
    seed: int,
    control: Optional[ControlBox] = None,
    record_paths: int = 0,
) -> PathEstimate:
    """
    Discounted path cost of the effective system. `tables` are interpolated
    linearly; a SlowSpec is taken as the effective model directly.
    """
    model = tables if isinstance(tables, SlowSpec) else effective_slow_spec(tables, slow)
    control = control or ControlBox.interval(-np.inf, np.inf)
    feedback = policy_function(policy, control)

    def dispersion(x, y, u):
        sf = model.sigma_sf(x, y)
        sc = model.sigma_sc(x, u)
        return np.sqrt(sf * sf + sc * sc)

    return _simulate(model, feedback, None, dispersion, x0, None, 1, beta, T, dt, n_paths, seed, record_paths)


async def call(
    cfg: ScenarioConfig,
    out_dir: str,
    scenario_hash: str,
    effective: Optional[ValueField1D] = None,
    tables: Optional[EffectiveTables] = None,
    multiscale: Optional[ValueField3D] = None,
    which: Sequence[str] = ("effective", "multiscale"),
    x0_list: Sequence[float] = (-0.5, 0.0, 0.5),
    y0: Sequence[float] = (0.25, 0.75),
    n_paths: Optional[int] = None,
    dt: Optional[float] = None,
    per_path: bool = False,
) -> Dict[str, Any]:
    """
    simulate stage; writes <out_dir>/simulate/simulate.csv with columns
    (multiscale, epsilon, x0, mean, stderr, pde_value, horizon, dt) and,
    with `per_path`, one costs_<which>_<x0>.csv per estimate.

    {
      "estimates": [ { "which": ..., "x0": ..., "mean": ..., "stderr": ...,
                       "pde_value": ..., "agrees": <bool> }, ... ]
    }
    """
    slow, fast = build_example(cfg)
    control = cfg.control_box
    n_paths = n_paths or cfg.mc_paths
    dt = dt or cfg.mc_dt
    horizon = cfg.mc_horizon or horizon_for(slow, control, cfg.beta, 1e-3, cfg.d_y)

    jobs: List[Tuple[str, float, float, Any]] = []
    for x0 in x0_list:
        if "effective" in which:
            if effective is None or tables is None:
                raise ScenarioError("effective simulation needs the solved effective field", StageType.SIMULATE)
            pde = float(np.interp(x0, effective.x_nodes, effective.v))
            jobs.append(("effective", float("nan"), float(x0), pde))
        if "multiscale" in which:
            if multiscale is None:
                raise ScenarioError("multiscale simulation needs a solved multiscale field", StageType.SIMULATE)
            jobs.append(("multiscale", multiscale.epsilon, float(x0), multiscale.at(x0, y0)))

    def run(kind: str, x0: float) -> PathEstimate:
        if kind == "effective":
            return simulate_effective_cost(
                tables, slow, effective, x0, cfg.beta, horizon, dt, n_paths, cfg.seed, control
            )
        return simulate_multiscale_cost(
            slow, fast, multiscale, multiscale.epsilon, x0, y0, cfg.beta, horizon, dt, n_paths, cfg.seed, control
        )

    estimates = await asyncio.gather(*(asyncio.to_thread(run, kind, x0) for kind, _, x0, _ in jobs))
    stage_dir = os.path.join(out_dir, StageType.SIMULATE.value)
    summary = []
    for (kind, eps, x0, pde), est in zip(jobs, estimates):
        agrees = abs(est.mean - pde) <= 3.0 * est.stderr + 0.02
        summary.append(
            {"which": kind, "epsilon": eps, "x0": x0, "mean": est.mean, "stderr": est.stderr,
             "pde_value": pde, "agrees": bool(agrees)}
        )
        if not agrees:
            logger.warning("MC/PDE mismatch for %s at x0=%g: %.5g vs %.5g", kind, x0, est.mean, pde)
        if per_path:
            csvio.write_csv(
                os.path.join(stage_dir, f"costs_{kind}_{x0:g}.csv"), ("cost",), [est.costs], scenario_hash
            )
    csvio.write_csv(
        os.path.join(stage_dir, "simulate.csv"),
        ("multiscale", "epsilon", "x0", "mean", "stderr", "pde_value", "horizon", "dt"),
        [
            [1.0 if s["which"] == "multiscale" else 0.0 for s in summary],
            [s["epsilon"] for s in summary],
            [s["x0"] for s in summary],
            [s["mean"] for s in summary],
            [s["stderr"] for s in summary],
            [s["pde_value"] for s in summary],
            [e.horizon for e in estimates],
            [e.dt for e in estimates],
        ],
        scenario_hash,
    )
    return make_success_response(StageType.SIMULATE, {"estimates": summary})
