"""
Effective coefficients of the homogenised problem: quadratures of the
slow-fast fields against the invariant densities, and the effective
Hamiltonian in its closed quadrature form.
"""

import asyncio
import logging
import math
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from multiscale_soc import csvio
from multiscale_soc.hjb import minimize_sc
from multiscale_soc.model import ControlBox, SlowSpec
from multiscale_soc.response import (
    NumericalError,
    ScenarioError,
    StageType,
    make_success_response,
)
from multiscale_soc.torus_fp import DensityField, TorusGrid

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ("x", "mu_bar", "a_bar", "l_bar", "kappa")


@dataclass(frozen=True)
class EffectiveTables:
    x_nodes: np.ndarray
    mu_bar: np.ndarray
    a_bar: np.ndarray
    l_bar: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        n = len(self.x_nodes)
        for name in ("mu_bar", "a_bar", "l_bar", "kappa"):
            if len(getattr(self, name)) != n:
                raise ScenarioError(f"table '{name}' has {len(getattr(self, name))} entries, expected {n}")
        if np.any(self.a_bar < -1e-12):
            raise NumericalError(
                f"negative effective diffusion {self.a_bar.min():.3g}", StageType.HOMOGENIZE
            )
        if np.any(np.abs(self.kappa) > 1.0 + 1e-12):
            raise NumericalError(
                f"|kappa| exceeds 1 ({np.abs(self.kappa).max():.6g})", StageType.HOMOGENIZE
            )

    def at(self, x) -> Dict[str, Any]:
        """Linear interpolation of every table at x."""
        return {
            name: np.interp(x, self.x_nodes, getattr(self, name))
            for name in ("mu_bar", "a_bar", "l_bar", "kappa")
        }


@dataclass(frozen=True)
class HamiltonianPoint:
    """Frozen slow state and derivative arguments p = (x_bar, g, H)."""

    x_bar: float
    g: float
    H: float

    def check(self, alpha: float) -> "HamiltonianPoint":
        if not -alpha <= self.x_bar <= alpha:
            raise ScenarioError(f"x_bar={self.x_bar} outside X=[-{alpha}, {alpha}]")
        return self


def _kappa_samples(grid: TorusGrid) -> np.ndarray:
    y = grid.points()
    if grid.d_y < 2:
        return np.zeros(grid.size)
    return np.sin(2.0 * math.pi * y[:, 0]) * np.sin(2.0 * math.pi * y[:, 1])


def effective_tables(
    slow: SlowSpec, densities: Sequence[DensityField], x_nodes: Sequence[float]
) -> EffectiveTables:
    """Rectangle-rule quadrature of mu_sf, sigma_sf**2 and l_sf against each density."""
    x_nodes = np.asarray(x_nodes, dtype=float)
    if len(densities) != len(x_nodes):
        raise ScenarioError(
            f"{len(densities)} densities for {len(x_nodes)} slow nodes", StageType.HOMOGENIZE
        )
    mu_bar, a_bar, l_bar, kappa = (np.empty(len(x_nodes)) for _ in range(4))
    for i, (x, rho) in enumerate(zip(x_nodes, densities)):
        if abs(rho.x_bar - x) > 1e-12 * max(1.0, abs(x)):
            raise ScenarioError(
                f"density {i} was solved at x_bar={rho.x_bar}, node is {x}", StageType.HOMOGENIZE
            )
        y = rho.grid.points()
        sigma = np.broadcast_to(slow.sigma_sf(x, y), (rho.grid.size,))
        mu_bar[i] = rho.expectation(np.broadcast_to(slow.mu_sf(x, y), (rho.grid.size,)))
        a_bar[i] = rho.expectation(sigma * sigma)
        l_bar[i] = rho.expectation(np.broadcast_to(slow.l_sf(x, y), (rho.grid.size,)))
        kappa[i] = rho.expectation(_kappa_samples(rho.grid))
    logger.info("Effective tables on %d slow nodes", len(x_nodes))
    return EffectiveTables(x_nodes=x_nodes, mu_bar=mu_bar, a_bar=a_bar, l_bar=l_bar, kappa=kappa)


def effective_hamiltonian_quadrature(
    p: HamiltonianPoint,
    slow: SlowSpec,
    density: DensityField,
    control: ControlBox,
    n_control: int = 201,
) -> float:
    """
    H_bar(p) = int [mu_sf g + sigma_sf**2 H / 2 + l_sf] rho dy
               + min_u [mu_sc g + sigma_sc**2 H / 2 + l_sc].
    """
    p.check(slow.alpha)
    y = density.grid.points()
    sf = np.broadcast_to(slow.sf_bracket(p.x_bar, y, p.g, p.H), (density.grid.size,))
    _, sc_min = minimize_sc(slow, control, p.x_bar, p.g, p.H, n_control)
    return float(density.expectation(sf) + float(sc_min))


def lipschitz_probe(tables: EffectiveTables) -> Dict[str, float]:
    """Largest finite-difference slope of each table."""
    if len(tables.x_nodes) < 2:
        raise ScenarioError("lipschitz probe needs at least two nodes", StageType.HOMOGENIZE)
    dx = np.diff(tables.x_nodes)
    report = {}
    for name in ("mu_bar", "a_bar", "l_bar", "kappa"):
        slopes = np.abs(np.diff(getattr(tables, name))) / dx
        report[name] = float(slopes.max())
    if not all(np.isfinite(v) for v in report.values()):
        raise NumericalError(f"non-finite table slope: {report}", StageType.HOMOGENIZE)
    return report


def sigma_bar(tables: EffectiveTables) -> np.ndarray:
    return np.sqrt(np.maximum(tables.a_bar, 0.0))


def effective_slow_spec(tables: EffectiveTables, slow: SlowSpec) -> SlowSpec:
    """
    The effective model as a SlowSpec: its fast-dependent fields ignore y and
    interpolate the tables linearly; the control part is unchanged.
    """
    nodes = tables.x_nodes
    sig = sigma_bar(tables)

    def _shape(x, y):
        if y is None:
            return np.shape(x)
        return np.broadcast(np.asarray(x, dtype=float), np.asarray(y)[..., 0]).shape

    def mu_sf(x, y=None):
        return np.broadcast_to(np.interp(x, nodes, tables.mu_bar), _shape(x, y))

    def sigma_sf(x, y=None):
        return np.broadcast_to(np.interp(x, nodes, sig), _shape(x, y))

    def l_sf(x, y=None):
        return np.broadcast_to(np.interp(x, nodes, tables.l_bar), _shape(x, y))

    return SlowSpec(
        alpha=slow.alpha,
        mu_sf=mu_sf,
        mu_sc=slow.mu_sc,
        sigma_sf=sigma_sf,
        sigma_sc=slow.sigma_sc,
        l_sf=l_sf,
        l_sc=slow.l_sc,
        h_minus=slow.h_minus,
        h_plus=slow.h_plus,
        phi=slow.phi,
        dphi=slow.dphi,
        quadratic_f=slow.quadratic_f,
        quadratic_offset=slow.quadratic_offset,
        example_id=slow.example_id,
    )


def write_tables(tables: EffectiveTables, path: str, scenario_hash: str) -> str:
    return csvio.write_csv(
        path,
        TABLE_COLUMNS,
        [tables.x_nodes, tables.mu_bar, tables.a_bar, tables.l_bar, tables.kappa],
        scenario_hash,
    )


def read_tables(path: str) -> EffectiveTables:
    columns, data = csvio.read_csv(path)
    missing = [c for c in TABLE_COLUMNS if c not in columns]
    if missing:
        raise NumericalError(f"{path} lacks columns {missing}", StageType.HOMOGENIZE)
    return EffectiveTables(
        x_nodes=data["x"],
        mu_bar=data["mu_bar"],
        a_bar=data["a_bar"],
        l_bar=data["l_bar"],
        kappa=data["kappa"],
    )


async def call(
    slow: SlowSpec,
    densities: List[DensityField],
    x_nodes: np.ndarray,
    out_dir: str,
    scenario_hash: str,
    out: Optional[str] = None,
) -> Dict[str, Any]:
    """
    Homogenize stage: writes <out_dir>/homogenize/tables.csv (or `out`) and
    returns a success envelope

    {
      "tables": "<path>",
      "nodes": <int>,
      "lipschitz": { "mu_bar": ..., "a_bar": ..., "l_bar": ..., "kappa": ... },
      "max_abs_kappa": <float>
    }
    """
    tables = await asyncio.to_thread(effective_tables, slow, densities, x_nodes)
    path = out or os.path.join(out_dir, StageType.HOMOGENIZE.value, "tables.csv")
    write_tables(tables, path, scenario_hash)
    data = {
        "tables": path,
        "nodes": int(len(tables.x_nodes)),
        "lipschitz": lipschitz_probe(tables),
        "max_abs_kappa": float(np.abs(tables.kappa).max()),
    }
    return make_success_response(StageType.HOMOGENIZE, data)
