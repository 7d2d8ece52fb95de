"""
Generator of the frozen fast dynamics on a periodic grid and the invariant
density of the stationary Fokker-Planck equation.

Nodes of the torus grid are flattened in C order: node (j_1, ..., j_d) sits
at y = (j_1 h, ..., j_d h) with h = 1/n. The generator matrix acts on nodal
function values, (L f)_i = sum_j L_ij f_j; its transpose is the discrete
Fokker-Planck operator.
"""

import asyncio
import logging
import math
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numba as nb
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from multiscale_soc import csvio
from multiscale_soc.model import FastSpec
from multiscale_soc.response import NumericalError, ScenarioError, StageType, make_success_response

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TorusGrid:
    d_y: int
    n: int

    def __post_init__(self):
        if self.n < 4:
            raise ScenarioError(f"torus grid needs n >= 4, got {self.n}")
        if self.d_y < 1:
            raise ScenarioError(f"torus dimension must be >= 1, got {self.d_y}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def size(self) -> int:
        return self.n**self.d_y

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.n,) * self.d_y

    @property
    def cell_volume(self) -> float:
        return self.h**self.d_y

    def multi_index(self) -> np.ndarray:
        """(size, d_y) integer node indices in flattening order."""
        return np.indices(self.shape).reshape(self.d_y, -1).T

    def points(self) -> np.ndarray:
        """(size, d_y) node coordinates in [0, 1)."""
        return self.multi_index() * self.h

    def flat(self, multi: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.mod(multi, self.n).T), self.shape)

    def neighbour(self, offset: Sequence[int]) -> np.ndarray:
        """Flat index of node + offset for every node, wrapping modulo n."""
        return self.flat(self.multi_index() + np.asarray(offset, dtype=int))


def integrate(values: np.ndarray, grid: TorusGrid) -> float:
    """Rectangle rule on the periodic grid."""
    return float(grid.cell_volume * np.sum(values))


@dataclass(frozen=True)
class DensityField:
    grid: TorusGrid
    values: np.ndarray
    x_bar: float

    def integral(self) -> float:
        return integrate(self.values, self.grid)

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def expectation(self, samples: np.ndarray) -> float:
        """Quadrature of nodal samples against the density."""
        return integrate(samples * self.values, self.grid)


@dataclass(frozen=True)
class GeneratorMatrix:
    """Discrete generator L^{x_bar}; rows act on nodal values."""

    grid: TorusGrid
    matrix: sp.csr_matrix
    x_bar: float
    monotone: bool

    @property
    def adjoint(self) -> sp.csr_matrix:
        return self.matrix.T.tocsr()

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.matrix @ f

    def norm(self) -> float:
        return float(abs(self.matrix).sum(axis=1).max())


def torus_stencil(
    mu: np.ndarray,
    a: np.ndarray,
    grid: TorusGrid,
    upwind: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    COO triplets of <mu, D f> + (1/2) Tr(a D^2 f) on the torus.

    mu is (size, d), a is (size, d, d). Drift is upwinded by the sign of
    `upwind` (default mu), diagonal diffusion uses the 3-point central
    stencil and off-diagonal diffusion the centered 4-point mixed stencil.
    The diagonal entry of each row is minus the sum of its off-diagonal
    entries, so constants lie in the kernel.
    """
    h = grid.h
    d = grid.d_y
    nodes = np.arange(grid.size)
    upwind = mu if upwind is None else upwind
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []

    def add(offset, coeff):
        rows.append(nodes)
        cols.append(grid.neighbour(offset))
        vals.append(coeff)

    for k in range(d):
        e = np.zeros(d, dtype=int)
        e[k] = 1
        forward = np.where(upwind[:, k] > 0.0, mu[:, k], 0.0) / h
        backward = -np.where(upwind[:, k] < 0.0, mu[:, k], 0.0) / h
        diffusion = 0.5 * a[:, k, k] / (h * h)
        add(e, forward + diffusion)
        add(-e, backward + diffusion)
        for m in range(k + 1, d):
            f = np.zeros(d, dtype=int)
            f[m] = 1
            # a_km + a_mk = 2 a_km, times 1/2 from the generator.
            cross = 0.5 * (a[:, k, m] + a[:, m, k]) / (4.0 * h * h)
            add(e + f, cross)
            add(e - f, -cross)
            add(-e + f, -cross)
            add(-e - f, cross)

    off = np.concatenate(vals)
    row_sum = np.bincount(np.concatenate(rows), weights=off, minlength=grid.size)
    rows.append(nodes)
    cols.append(nodes)
    vals.append(-row_sum)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def _coefficients(fast: FastSpec, x_bar: float, grid: TorusGrid) -> Tuple[np.ndarray, np.ndarray]:
    y = grid.points()
    mu = np.broadcast_to(np.asarray(fast.mu_y(x_bar, y), dtype=float), (grid.size, grid.d_y))
    a = np.broadcast_to(
        np.asarray(fast.a_y(x_bar, y), dtype=float), (grid.size, grid.d_y, grid.d_y)
    )
    return np.array(mu), np.array(a)


def _check_psd(a: np.ndarray, x_bar: float) -> None:
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    eig_min = np.linalg.eigvalsh(sym).min(axis=-1)
    scale = max(1.0, float(np.abs(a).max()))
    bad = np.flatnonzero(eig_min < -1e-12 * scale)
    if bad.size:
        raise NumericalError(
            f"fast diffusion is not positive semidefinite at x_bar={x_bar} "
            f"(node {int(bad[0])}, eigenvalue {float(eig_min[bad[0]]):.3g})",
            StageType.DENSITY,
        )


def assemble_generator(fast: FastSpec, x_bar: float, grid: TorusGrid) -> GeneratorMatrix:
    """Upwind/central discretisation of the fast generator frozen at x_bar."""
    if fast.d_y != grid.d_y:
        raise ScenarioError(f"grid dimension {grid.d_y} does not match d_y={fast.d_y}")
    mu, a = _coefficients(fast, x_bar, grid)
    _check_psd(a, x_bar)
    rows, cols, vals = torus_stencil(mu, a, grid)
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(grid.size, grid.size))
    matrix.sum_duplicates()
    off = matrix - sp.diags(matrix.diagonal())
    monotone = bool(off.data.size == 0 or off.data.min() >= -1e-12 * max(1.0, abs(off.data).max()))
    if not monotone:
        logger.warning("Generator at x_bar=%.4g is not monotone (cross diffusion)", x_bar)
    return GeneratorMatrix(grid=grid, matrix=matrix, x_bar=float(x_bar), monotone=monotone)


def _nullspace_direct(adjoint: sp.csr_matrix, grid: TorusGrid) -> np.ndarray:
    n = grid.size
    normalization = sp.csr_matrix(np.full((1, n), grid.cell_volume))
    system = sp.vstack([normalization, adjoint[1:]]).tocsc()
    rhs = np.zeros(n)
    rhs[0] = 1.0
    return spla.splu(system).solve(rhs)


def _nullspace_power(adjoint: sp.csr_matrix, grid: TorusGrid, iterations: int = 50) -> np.ndarray:
    """Shifted inverse power iteration on the adjoint."""
    scale = float(abs(adjoint).sum(axis=1).max())
    shift = 1e-8 * scale
    lu = spla.splu((adjoint - shift * sp.identity(grid.size)).tocsc())
    v = np.ones(grid.size)
    for _ in range(iterations):
        v = lu.solve(v)
        v /= np.abs(v).max()
    return v / integrate(v, grid)


def solve_invariant_density(
    fast: FastSpec,
    x_bar: float,
    grid: TorusGrid,
    tol: float = 1e-10,
    generator: Optional[GeneratorMatrix] = None,
) -> DensityField:
    """
    Invariant density as the normalised nullspace of the discrete adjoint.

    One row of the adjoint is replaced by the normalisation constraint and
    the nonsingular system is solved by sparse LU; shifted inverse power
    iteration is the fallback. The residual ||L* rho||_inf is measured
    against tol times the operator's sup-norm.
    """
    generator = generator or assemble_generator(fast, x_bar, grid)
    adjoint = generator.adjoint
    scale = max(1.0, generator.norm())
    limit = tol * scale

    rho = None
    try:
        rho = _nullspace_direct(adjoint, grid)
    except RuntimeError as e:
        logger.warning("Direct nullspace solve failed at x_bar=%.4g: %s", x_bar, e)
    if rho is None or not np.all(np.isfinite(rho)) or np.abs(adjoint @ rho).max() > limit:
        logger.warning("Falling back to inverse power iteration at x_bar=%.4g", x_bar)
        try:
            rho = _nullspace_power(adjoint, grid)
        except RuntimeError as e:
            raise NumericalError(
                f"density solve did not converge at x_bar={x_bar}: {e}", StageType.DENSITY
            ) from e

    residual = float(np.abs(adjoint @ rho).max())
    if not np.isfinite(residual) or residual > limit:
        raise NumericalError(
            f"density residual {residual:.3g} exceeds {limit:.3g} at x_bar={x_bar}",
            StageType.DENSITY,
        )
    if rho.min() <= 0.0:
        raise NumericalError(
            f"nonpositive density (min {rho.min():.3g}) at x_bar={x_bar}; "
            "the discretisation is not monotone on this grid",
            StageType.DENSITY,
        )
    logger.debug("Density at x_bar=%.4g: residual %.3g, min %.4g", x_bar, residual, rho.min())
    return DensityField(grid=grid, values=rho, x_bar=float(x_bar))


def density_sweep(
    fast: FastSpec, x_grid: Sequence[float], grid: TorusGrid, tol: float = 1e-10
) -> List[DensityField]:
    """One invariant density per slow node, in input order."""
    densities = []
    for x_bar in x_grid:
        try:
            densities.append(solve_invariant_density(fast, float(x_bar), grid, tol))
        except NumericalError as e:
            raise NumericalError(
                f"density sweep failed at x_bar={float(x_bar)}: {e.message}", StageType.DENSITY
            ) from e
    logger.info("Solved %d invariant densities on %s grid", len(densities), grid.shape)
    return densities


def density_continuity_probe(
    fast: FastSpec, x_bar: float, deltas: Sequence[float], grid: TorusGrid, tol: float = 1e-10
) -> List[Tuple[float, float]]:
    """(delta, ||rho(x_bar + delta) - rho(x_bar)||_inf) for each delta."""
    base = solve_invariant_density(fast, x_bar, grid, tol)
    out = []
    for delta in deltas:
        other = solve_invariant_density(fast, x_bar + delta, grid, tol)
        out.append((float(delta), float(np.abs(other.values - base.values).max())))
    return out


@dataclass(frozen=True)
class ParameterDerivative:
    values: np.ndarray
    residual: float
    integral: float
    step: float
    central: bool


def _coefficient_derivatives(
    fast: FastSpec, x_bar: float, grid: TorusGrid
) -> Tuple[np.ndarray, np.ndarray]:
    delta = 1e-6 * max(1.0, abs(x_bar))
    mu_p, a_p = _coefficients(fast, x_bar + delta, grid)
    mu_m, a_m = _coefficients(fast, x_bar - delta, grid)
    return (mu_p - mu_m) / (2.0 * delta), (a_p - a_m) / (2.0 * delta)


def fd_parameter_derivative(
    fast: FastSpec,
    x_bar: float,
    step: float,
    grid: TorusGrid,
    alpha: Optional[float] = None,
    tol: float = 1e-10,
) -> ParameterDerivative:
    """
    Difference quotient of the density in the slow parameter and its
    residual in the differentiated Fokker-Planck equation -L* r = f, where
    f = (dL/dx)^T rho is assembled from the x-derivatives of the fast
    coefficients with the upwind pattern of L at x_bar.
    """
    if step <= 0:
        raise ScenarioError(f"step must be positive, got {step}")
    if alpha is not None:
        if not (-alpha <= x_bar <= alpha) or x_bar + step > alpha:
            raise ScenarioError(
                f"step {step} from x_bar={x_bar} leaves X=[-{alpha}, {alpha}]",
                StageType.DENSITY,
            )
        central = x_bar - step >= -alpha
    else:
        central = True

    generator = assemble_generator(fast, x_bar, grid)
    rho = solve_invariant_density(fast, x_bar, grid, tol, generator=generator)
    rho_plus = solve_invariant_density(fast, x_bar + step, grid, tol)
    if central:
        rho_minus = solve_invariant_density(fast, x_bar - step, grid, tol)
        quotient = (rho_plus.values - rho_minus.values) / (2.0 * step)
    else:
        quotient = (rho_plus.values - rho.values) / step

    mu, _ = _coefficients(fast, x_bar, grid)
    dmu, da = _coefficient_derivatives(fast, x_bar, grid)
    rows, cols, vals = torus_stencil(dmu, da, grid, upwind=mu)
    d_generator = sp.csr_matrix((vals, (rows, cols)), shape=(grid.size, grid.size))
    source = d_generator.T @ rho.values
    residual = float(np.abs(generator.adjoint @ quotient + source).max())
    return ParameterDerivative(
        values=quotient,
        residual=residual,
        integral=integrate(quotient, grid),
        step=float(step),
        central=central,
    )


@nb.njit(cache=True)
def accumulate_bins(points, n, counts):
    """Add one count per point to the node-centred torus bin containing it."""
    for p in range(points.shape[0]):
        idx = 0
        for k in range(points.shape[1]):
            j = int(math.floor(points[p, k] * n + 0.5)) % n
            idx = idx * n + j
        counts[idx] += 1


def fast_increment(fast: FastSpec, x, y: np.ndarray, dt: float, rng: np.random.Generator,
                   drift_scale: float = 1.0, noise_scale: float = 1.0,
                   dw_slow: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Euler-Maruyama increment of the fast variable for a batch of states.
    `dw_slow` is the slow Brownian increment shared through b_xy.
    """
    batch = y.shape[0]
    dw = rng.standard_normal((batch, fast.d_y)) * math.sqrt(dt)
    if dw_slow is None:
        dw_slow = rng.standard_normal(batch) * math.sqrt(dt)
    mu = np.asarray(fast.mu_y(x, y))
    noise = np.einsum("...ij,...j->...i", np.asarray(fast.sigma_y(x, y)), dw)
    noise = noise + np.asarray(fast.b_xy(x, y)) * dw_slow[:, None]
    return drift_scale * mu * dt + noise_scale * noise


def occupation_measure_mc(
    fast: FastSpec,
    x_bar: float,
    T: float,
    dt: float,
    seed: int,
    grid: TorusGrid,
    n_chains: int = 1,
    burn_in: float = 0.0,
) -> DensityField:
    """
    Normalised occupation histogram of the frozen fast dynamics.

    The default is a single long trajectory started uniformly on the torus.
    With `n_chains` > 1 the horizon T is split over that many independent
    chains advanced together, each discarding `burn_in` time units before
    counting; the total number of counted samples stays T / dt.
    """
    if T <= 0 or dt <= 0 or n_chains < 1 or burn_in < 0:
        raise ScenarioError(f"invalid occupation run: T={T}, dt={dt}, chains={n_chains}")
    rng = np.random.default_rng(seed)
    y = rng.uniform(0.0, 1.0, (n_chains, grid.d_y))
    burn_steps = int(round(burn_in / dt))
    steps = max(1, int(round(T / (dt * n_chains))))
    counts = np.zeros(grid.size, dtype=np.int64)
    for k in range(burn_steps + steps):
        y = np.mod(y + fast_increment(fast, x_bar, y, dt, rng), 1.0)
        if k >= burn_steps:
            accumulate_bins(y, grid.n, counts)
    values = counts / (counts.sum() * grid.cell_volume)
    logger.debug("Occupation histogram at x_bar=%.4g from %d samples", x_bar, counts.sum())
    return DensityField(grid=grid, values=values, x_bar=float(x_bar))


def write_densities(densities: Sequence[DensityField], path: str, scenario_hash: str) -> str:
    """Long format: one row per (x_bar, torus node) with columns x_bar, y1..yd, rho."""
    if not densities:
        raise ScenarioError("no densities to write", StageType.DENSITY)
    grid = densities[0].grid
    y = grid.points()
    columns = ["x_bar"] + [f"y{k + 1}" for k in range(grid.d_y)] + ["rho"]
    data = [np.repeat([rho.x_bar for rho in densities], grid.size)]
    data += [np.tile(y[:, k], len(densities)) for k in range(grid.d_y)]
    data.append(np.concatenate([rho.values for rho in densities]))
    return csvio.write_csv(path, columns, data, scenario_hash)


def read_densities(path: str, grid: Optional[TorusGrid] = None) -> List[DensityField]:
    """
    Read a density file, taking the torus grid from its y columns.
    A given `grid` that differs from the file's is an error.
    """
    columns, data = csvio.read_csv(path)
    y_columns = [c for c in columns if c[:1] == "y" and c[1:].isdigit()]
    if "x_bar" not in columns or "rho" not in columns or not y_columns:
        raise NumericalError(f"{path} is not a density file", StageType.DENSITY)
    n = int(np.unique(data["y1"]).size)
    try:
        found = TorusGrid(len(y_columns), n)
    except ScenarioError as e:
        raise NumericalError(f"{path} does not hold a torus grid: {e.message}", StageType.DENSITY) from e
    if data["rho"].size % found.size:
        raise NumericalError(
            f"{path} holds {data['rho'].size} rows, not a multiple of its {found.size}-node grid",
            StageType.DENSITY,
        )
    if grid is not None and grid != found:
        raise NumericalError(
            f"{path} was written on a torus grid with n={found.n}, d_y={found.d_y}; "
            f"the scenario expects n={grid.n}, d_y={grid.d_y}",
            StageType.DENSITY,
        )
    x_bar = data["x_bar"].reshape(-1, found.size)[:, 0]
    rho = data["rho"].reshape(-1, found.size)
    return [DensityField(grid=found, values=r.copy(), x_bar=float(x)) for x, r in zip(x_bar, rho)]


async def call(
    fast: FastSpec,
    x_nodes: Sequence[float],
    grid: TorusGrid,
    out_dir: str,
    scenario_hash: str,
    tol: float = 1e-10,
    out: Optional[str] = None,
) -> Tuple[Dict[str, Any], List[DensityField]]:
    """
    density stage: one invariant density per slow node, solved concurrently
    and written to <out_dir>/density/densities.csv.

    {
      "densities": "<path>",
      "nodes": <int>,
      "grid": [n, ..., n],
      "min_density": <float>
    }
    """
    densities = await asyncio.gather(
        *(asyncio.to_thread(solve_invariant_density, fast, float(x), grid, tol) for x in x_nodes)
    )
    densities = list(densities)
    path = out or os.path.join(out_dir, StageType.DENSITY.value, "densities.csv")
    write_densities(densities, path, scenario_hash)
    data = {
        "densities": path,
        "nodes": len(densities),
        "grid": list(grid.shape),
        "min_density": float(min(rho.values.min() for rho in densities)),
    }
    return make_success_response(StageType.DENSITY, data), densities
