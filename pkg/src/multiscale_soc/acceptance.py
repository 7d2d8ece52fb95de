"""
Desk-scale acceptance checks run by `--check`. Grids are reduced so the
suite finishes in a few minutes; the full-size convergence study is the
`converge` stage.
"""

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List

import numpy as np

from multiscale_soc.hjb import (
    check_neumann,
    minimize_hamiltonian_grid,
    minimize_sc,
    slow_nodes,
    solve_effective_hjb,
    solve_multiscale_hjb,
)
from multiscale_soc.homogenize import effective_tables
from multiscale_soc.model import ScenarioConfig, build_example, shift_running_cost
from multiscale_soc.response import SocError
from multiscale_soc.torus_fp import (
    TorusGrid,
    density_sweep,
    fd_parameter_derivative,
    solve_invariant_density,
)

logger = logging.getLogger(__name__)

REDUCED_SLOW = 17
REDUCED_TORUS = 8


@dataclass
class CriterionResult:
    name: str
    passed: bool
    detail: str
    runtime_s: float = 0.0


@dataclass
class AcceptanceReport:
    results: List[CriterionResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> Dict[str, Any]:
        return {"passed": self.passed, "results": [dataclasses.asdict(r) for r in self.results]}

    def summary(self) -> str:
        return "\n".join(
            f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail} ({r.runtime_s:.1f}s)"
            for r in self.results
        )


def _effective(cfg: ScenarioConfig, slow, fast, n_slow: int, n_torus: int):
    x = slow_nodes(cfg.alpha, n_slow)
    tables = effective_tables(slow, density_sweep(fast, x, TorusGrid(cfg.d_y, n_torus), cfg.tol_density), x)
    return tables


def uniform_density(cfg: ScenarioConfig) -> CriterionResult:
    slow, fast = build_example(cfg.replace(theta_c=0.0))
    grid = TorusGrid(cfg.d_y, 32)
    rho = solve_invariant_density(fast, 0.5, grid, cfg.tol_density)
    kappa = effective_tables(slow, [rho], [0.5]).kappa[0]
    err = float(np.abs(rho.values - 1.0).max())
    return CriterionResult(
        "uniform density", err <= 1e-10 and abs(kappa) <= 1e-10, f"max|rho-1|={err:.2e}, kappa={kappa:.2e}"
    )


def constant_cost(cfg: ScenarioConfig, c: float = 0.7) -> CriterionResult:
    scenario = cfg.replace(theta_a=0.0, theta_b=0.0, theta_e=0.0, theta_d=cfg.u_lo)
    slow, fast = build_example(scenario)
    slow = shift_running_cost(slow, c)
    control = scenario.control_box
    target = c / scenario.beta
    tables = _effective(scenario, slow, fast, REDUCED_SLOW, REDUCED_TORUS)
    worst = float(np.abs(solve_effective_hjb(tables, slow, control, scenario.beta).v - target).max())
    for eps in scenario.epsilon_list:
        field_eps = solve_multiscale_hjb(
            slow, fast, control, eps, scenario.beta, None, REDUCED_SLOW, REDUCED_TORUS
        )
        worst = max(worst, float(np.abs(field_eps.v - target).max()))
    return CriterionResult("constant cost", worst <= 1e-8, f"max|v - c/beta|={worst:.2e}")


def minimizer_agreement(cfg: ScenarioConfig, draws: int = 1000, n_grid: int = 100_000) -> CriterionResult:
    rng = np.random.default_rng(cfg.seed)
    worst = 0.0
    bound = 0.0
    for example_id in (1, 2):
        scenario = cfg.replace(example_id=example_id, u_lo=max(cfg.u_lo, 0.0), u_hi=max(cfg.u_hi, 0.0))
        slow, _ = build_example(scenario)
        control = scenario.control_box
        du = (control.upper - control.lower) / (n_grid - 1)
        bound = max(bound, du * du)
        x = rng.uniform(-cfg.alpha, cfg.alpha, draws)
        g = rng.normal(0.0, 2.0, draws)
        H = rng.normal(0.0, 2.0, draws)
        _, closed = minimize_sc(slow, control, x, g, H)
        _, brute = minimize_hamiltonian_grid(x, g, H, slow, control, None, n_grid)
        worst = max(worst, float(np.abs(np.asarray(closed) - brute).max()))
    return CriterionResult(
        "closed form vs grid minimiser", worst <= bound, f"max gap {worst:.2e}, (du)^2={bound:.2e}"
    )


def neumann_order(cfg: ScenarioConfig) -> CriterionResult:
    slow, fast = build_example(cfg)
    residuals = []
    for n_slow in (33, 65):
        tables = _effective(cfg, slow, fast, n_slow, 16)
        result = solve_effective_hjb(tables, slow, cfg.control_box, cfg.beta, None, n_slow, cfg.tol_policy)
        residuals.append(check_neumann(result))
    ratio = residuals[1] / residuals[0] if residuals[0] > 0 else 0.0
    return CriterionResult(
        "Neumann residual order", ratio <= 0.6, f"residuals {residuals[0]:.3g} -> {residuals[1]:.3g}"
    )


def density_derivative(cfg: ScenarioConfig) -> CriterionResult:
    _, fast = build_example(cfg)
    grid = TorusGrid(cfg.d_y, cfg.n_torus)
    coarse = fd_parameter_derivative(fast, 0.25, 1e-2, grid, cfg.alpha, cfg.tol_density)
    fine = fd_parameter_derivative(fast, 0.25, 5e-3, grid, cfg.alpha, cfg.tol_density)
    ok = fine.residual < coarse.residual and abs(fine.integral) <= 1e-8 and abs(coarse.integral) <= 1e-8
    return CriterionResult(
        "density derivative",
        ok,
        f"residual {coarse.residual:.3g} -> {fine.residual:.3g}, integral {fine.integral:.2e}",
    )


def comparison(cfg: ScenarioConfig, delta: float = 0.1) -> CriterionResult:
    control = cfg.control_box
    worst_shift = 0.0
    min_rise = np.inf
    for scenario, exact in ((cfg.replace(theta_b=0.0), True), (cfg, False)):
        slow, fast = build_example(scenario)
        tables = _effective(scenario, slow, fast, REDUCED_SLOW * 2 - 1, 16)
        shifted = shift_running_cost(slow, delta)
        shifted_tables = dataclasses.replace(tables, l_bar=tables.l_bar + delta)
        base = solve_effective_hjb(tables, slow, control, scenario.beta)
        raised = solve_effective_hjb(shifted_tables, shifted, control, scenario.beta)
        rise = raised.v - base.v
        if exact:
            worst_shift = float(np.abs(rise - delta / scenario.beta).max())
        else:
            min_rise = float(rise.min())
    ok = worst_shift <= 1e-8 and min_rise >= -1e-10
    return CriterionResult(
        "comparison surrogate", ok, f"exact-shift error {worst_shift:.2e}, min rise {min_rise:.3g}"
    )


CRITERIA: List[Callable[[ScenarioConfig], CriterionResult]] = [
    uniform_density,
    constant_cost,
    minimizer_agreement,
    neumann_order,
    density_derivative,
    comparison,
]


def run_acceptance(cfg: ScenarioConfig) -> AcceptanceReport:
    report = AcceptanceReport()
    for criterion in CRITERIA:
        started = time.perf_counter()
        try:
            result = criterion(cfg)
        except SocError as e:
            result = CriterionResult(criterion.__name__.replace("_", " "), False, f"error: {e.message}")
        result.runtime_s = time.perf_counter() - started
        logger.info("%s: %s", result.name, "pass" if result.passed else "FAIL")
        report.results.append(result)
    return report
