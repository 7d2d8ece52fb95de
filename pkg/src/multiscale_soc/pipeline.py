"""
Stage orchestration: dependency resolution, in-process hand-over of
intermediate results, the run manifest and the plain-text report.

Each stage writes under <out_dir>/<stage>/. A stage that fails leaves its
error envelope in <out_dir>/<stage>/error.json.
"""

import asyncio
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import metadata
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from multiscale_soc import cell_problem, csvio, hjb, homogenize, sde_sim, torus_fp
from multiscale_soc.model import ScenarioConfig, build_example, scenario_hash
from multiscale_soc.response import (
    DependencyError,
    OutputError,
    ScenarioError,
    SocError,
    StageType,
    make_error_response,
)

logger = logging.getLogger(__name__)

PIPELINE_STAGES: Tuple[StageType, ...] = (
    StageType.DENSITY,
    StageType.HOMOGENIZE,
    StageType.CELL,
    StageType.SOLVE_EFFECTIVE,
    StageType.SOLVE_MULTISCALE,
    StageType.CONVERGE,
    StageType.SIMULATE,
)

DEPENDENCIES: Dict[StageType, Tuple[StageType, ...]] = {
    StageType.HOMOGENIZE: (StageType.DENSITY,),
    StageType.SOLVE_EFFECTIVE: (StageType.HOMOGENIZE,),
    StageType.CONVERGE: (StageType.HOMOGENIZE,),
    StageType.SIMULATE: (StageType.SOLVE_EFFECTIVE,),
}

# File whose presence on disk satisfies a dependency on the stage.
PRIMARY_OUTPUT: Dict[StageType, str] = {
    StageType.DENSITY: "densities.csv",
    StageType.HOMOGENIZE: "tables.csv",
    StageType.SOLVE_EFFECTIVE: "value.csv",
}

REPORT_FILES = (
    "density_heatmap.dat",
    "kappa.dat",
    "effective_coefficients.dat",
    "value_effective.dat",
    "value_multiscale_envelope.dat",
    "convergence_loglog.dat",
)


def tool_version() -> str:
    try:
        return metadata.version("multiscale-soc")
    except metadata.PackageNotFoundError:
        return "0.1.0"


@dataclass
class StageRecord:
    stage: str
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    wall_clock_s: float = 0.0
    data: Dict[str, Any] = field(default_factory=dict)


@dataclass
class RunManifest:
    scenario_hash: str
    out_dir: str
    stages: List[StageRecord] = field(default_factory=list)
    version: str = field(default_factory=tool_version)

    def record(self, stage: StageType) -> Optional[StageRecord]:
        for rec in self.stages:
            if rec.stage == StageType(stage).value:
                return rec
        return None

    def add(self, record: StageRecord) -> None:
        self.stages = [rec for rec in self.stages if rec.stage != record.stage] + [record]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunManifest":
        stages = [StageRecord(**rec) for rec in data.get("stages", [])]
        return cls(
            scenario_hash=data["scenario_hash"],
            out_dir=data["out_dir"],
            stages=stages,
            version=data.get("version", tool_version()),
        )

    def write(self) -> str:
        path = os.path.join(self.out_dir, "manifest.json")
        os.makedirs(self.out_dir, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, default=str)
        return path


def load_manifest(out_dir: str) -> RunManifest:
    path = os.path.join(out_dir, "manifest.json")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return RunManifest.from_dict(json.load(f))
    except OSError as e:
        raise OutputError(f"cannot read manifest {path}: {e}", StageType.REPORT) from e
    except (KeyError, ValueError) as e:
        raise OutputError(f"malformed manifest {path}: {e}", StageType.REPORT) from e


def stage_path(out_dir: str, stage: StageType, name: str) -> str:
    return os.path.join(out_dir, StageType(stage).value, name)


def resolve_stages(
    requested: Iterable[str], out_dir: str, auto_deps: bool = False
) -> List[StageType]:
    """
    Requested stages in pipeline order. A dependency is satisfied by being
    requested too or by its primary output already existing under out_dir;
    with auto_deps missing dependencies are added instead of rejected.
    """
    try:
        selected = {StageType(s) for s in requested}
    except ValueError as e:
        raise ScenarioError(f"unknown stage: {e}") from e
    unknown = selected - set(PIPELINE_STAGES)
    if unknown:
        raise ScenarioError(f"not a pipeline stage: {sorted(s.value for s in unknown)}")

    changed = True
    while changed:
        changed = False
        for stage in list(selected):
            for dep in DEPENDENCIES.get(stage, ()):
                if dep in selected:
                    continue
                if os.path.exists(stage_path(out_dir, dep, PRIMARY_OUTPUT[dep])):
                    continue
                if not auto_deps:
                    raise DependencyError(
                        f"stage '{stage.value}' needs the outputs of '{dep.value}'; "
                        f"run it first or pass --auto-deps",
                        stage,
                    )
                logger.info("Adding stage %s required by %s", dep.value, stage.value)
                selected.add(dep)
                changed = True
    return [s for s in PIPELINE_STAGES if s in selected]


@dataclass
class StageOptions:
    """Per-stage overrides from the command line."""

    density_x_bar: Optional[Sequence[float]] = None
    density_n: Optional[int] = None
    density_out: Optional[str] = None
    cell_points: Optional[Sequence[Tuple[float, float, float]]] = None
    cell_horizon: Optional[float] = None
    homogenize_out: Optional[str] = None
    cell_out: Optional[str] = None
    epsilons: Optional[Sequence[float]] = None
    simulate_which: Sequence[str] = ("effective", "multiscale")
    simulate_x0: Sequence[float] = (-0.5, 0.0, 0.5)
    simulate_y0: Sequence[float] = (0.25, 0.75)
    simulate_epsilon: Optional[float] = None
    simulate_paths: Optional[int] = None
    simulate_dt: Optional[float] = None
    per_path: bool = False


@dataclass
class RunState:
    """Results handed from one stage to the next within an invocation."""

    densities: Optional[List[torus_fp.DensityField]] = None
    tables: Optional[homogenize.EffectiveTables] = None
    effective: Optional[hjb.ValueField1D] = None
    fields: Dict[float, hjb.ValueField3D] = field(default_factory=dict)


def _write_error(out_dir: str, stage: StageType, error: SocError) -> None:
    path = stage_path(out_dir, stage, "error.json")
    try:
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(make_error_response(stage, error.code, error.message), f, indent=2)
    except OSError as e:
        logger.error("Could not write %s: %s", path, e)


class Pipeline:
    def __init__(self, cfg: ScenarioConfig, out_dir: str, options: Optional[StageOptions] = None):
        self.cfg = cfg
        self.out_dir = out_dir
        self.options = options or StageOptions()
        self.hash = scenario_hash(cfg)
        self.slow, self.fast = build_example(cfg)
        self.grid = torus_fp.TorusGrid(cfg.d_y, cfg.n_torus)
        self.x_nodes = hjb.slow_nodes(cfg.alpha, cfg.n_slow)
        self.state = RunState()

    def _epsilons(self) -> List[float]:
        chosen = self.options.epsilons or self.cfg.epsilon_list
        return sorted((float(e) for e in chosen), reverse=True)

    def _densities(self) -> List[torus_fp.DensityField]:
        if self.state.densities is None:
            path = stage_path(self.out_dir, StageType.DENSITY, "densities.csv")
            self.state.densities = torus_fp.read_densities(path, self.grid)
        return self.state.densities

    def _tables(self) -> homogenize.EffectiveTables:
        if self.state.tables is None:
            path = stage_path(self.out_dir, StageType.HOMOGENIZE, "tables.csv")
            self.state.tables = homogenize.read_tables(path)
        return self.state.tables

    def _effective(self) -> hjb.ValueField1D:
        if self.state.effective is None:
            path = stage_path(self.out_dir, StageType.SOLVE_EFFECTIVE, "value.csv")
            self.state.effective = hjb.read_value_1d(
                path, self.cfg.control_box, self.cfg.beta, self.slow.h_minus, self.slow.h_plus
            )
        return self.state.effective

    async def _multiscale(self, epsilon: float) -> hjb.ValueField3D:
        if epsilon not in self.state.fields:
            cfg = self.cfg
            self.state.fields[epsilon] = await asyncio.to_thread(
                hjb.solve_multiscale_hjb, self.slow, self.fast, cfg.control_box, epsilon, cfg.beta,
                None, cfg.n_slow, cfg.n_torus, cfg.tol_policy, cfg.max_policy_iter, cfg.n_control,
            )
        return self.state.fields[epsilon]

    async def run_stage(self, stage: StageType) -> StageRecord:
        cfg, out, opts = self.cfg, self.out_dir, self.options
        started = time.perf_counter()
        inputs: List[str] = []
        if stage is StageType.DENSITY:
            grid = torus_fp.TorusGrid(cfg.d_y, opts.density_n) if opts.density_n else self.grid
            response, self.state.densities = await torus_fp.call(
                self.fast, opts.density_x_bar or self.x_nodes, grid, out, self.hash, cfg.tol_density,
                opts.density_out,
            )
            outputs = [response["data"]["densities"]]
        elif stage is StageType.HOMOGENIZE:
            inputs = [stage_path(out, StageType.DENSITY, "densities.csv")]
            densities = self._densities()
            response = await homogenize.call(
                self.slow, densities, np.array([rho.x_bar for rho in densities]), out, self.hash,
                opts.homogenize_out,
            )
            self.state.tables = homogenize.read_tables(response["data"]["tables"])
            outputs = [response["data"]["tables"]]
        elif stage is StageType.CELL:
            response = await cell_problem.call(
                cfg, out, self.hash, opts.cell_points, opts.cell_horizon, opts.cell_out
            )
            outputs = [response["data"]["history"]]
        elif stage is StageType.SOLVE_EFFECTIVE:
            inputs = [stage_path(out, StageType.HOMOGENIZE, "tables.csv")]
            response, self.state.effective = await hjb.call(cfg, self._tables(), out, self.hash)
            outputs = [response["data"]["value"]]
        elif stage is StageType.SOLVE_MULTISCALE:
            if opts.epsilons:
                cfg = cfg.replace(epsilon_list=tuple(self._epsilons()))
            response, fields = await hjb.call_multiscale(cfg, out, self.hash)
            self.state.fields.update(fields)
            outputs = [entry["value"] for entry in response["data"]["fields"]]
        elif stage is StageType.CONVERGE:
            inputs = [stage_path(out, StageType.HOMOGENIZE, "tables.csv")]
            if self.state.effective is None:
                self.state.effective = await asyncio.to_thread(
                    hjb.solve_effective_hjb, self._tables(), self.slow, cfg.control_box, cfg.beta, None,
                    cfg.n_slow, cfg.tol_policy, cfg.max_policy_iter, cfg.n_control,
                )
            if opts.epsilons:
                cfg = cfg.replace(epsilon_list=tuple(self._epsilons()))
            response, _ = await hjb.call_converge(cfg, self.state.effective, self.state.fields, out, self.hash)
            outputs = [response["data"]["convergence"]]
        elif stage is StageType.SIMULATE:
            inputs = [stage_path(out, StageType.SOLVE_EFFECTIVE, "value.csv")]
            multiscale = None
            if "multiscale" in opts.simulate_which:
                eps = opts.simulate_epsilon or (0.2 if 0.2 in cfg.epsilon_list else self._epsilons()[0])
                multiscale = await self._multiscale(float(eps))
            effective = self._effective() if "effective" in opts.simulate_which else None
            tables = self._tables() if effective is not None else None
            response = await sde_sim.call(
                cfg, out, self.hash, effective, tables, multiscale, opts.simulate_which,
                opts.simulate_x0, opts.simulate_y0, opts.simulate_paths, opts.simulate_dt, opts.per_path,
            )
            outputs = [stage_path(out, StageType.SIMULATE, "simulate.csv")]
        else:
            raise ScenarioError(f"'{stage.value}' is not a pipeline stage")
        elapsed = time.perf_counter() - started
        logger.info("Stage %s finished in %.2f s", stage.value, elapsed)
        return StageRecord(stage.value, inputs, outputs, elapsed, response["data"])

    async def run(self, stages: Sequence[StageType]) -> RunManifest:
        manifest = RunManifest(scenario_hash=self.hash, out_dir=self.out_dir)
        if os.path.exists(os.path.join(self.out_dir, "manifest.json")):
            previous = load_manifest(self.out_dir)
            if previous.scenario_hash == self.hash:
                manifest.stages = previous.stages
        for stage in stages:
            logger.info("Starting stage %s", stage.value)
            try:
                manifest.add(await self.run_stage(stage))
            except SocError as e:
                e.stage = stage
                _write_error(self.out_dir, stage, e)
                manifest.write()
                raise
            except OSError as e:
                error = OutputError(f"{stage.value}: {e}", stage)
                _write_error(self.out_dir, stage, error)
                raise error from e
        manifest.write()
        return manifest


def run_pipeline(
    cfg: ScenarioConfig,
    stages: Iterable[str],
    out_dir: str,
    auto_deps: bool = False,
    threads: Optional[int] = None,
    options: Optional[StageOptions] = None,
) -> RunManifest:
    """Run the requested stages in dependency order and return the manifest."""
    ordered = resolve_stages(stages, out_dir, auto_deps)

    async def _run() -> RunManifest:
        if threads:
            asyncio.get_running_loop().set_default_executor(ThreadPoolExecutor(max_workers=threads))
        return await Pipeline(cfg, out_dir, options).run(ordered)

    return asyncio.run(_run())


def _nearest(values: np.ndarray, target: float) -> float:
    unique = np.unique(values)
    return float(unique[np.argmin(np.abs(unique - target))])


def emit_report(manifest: RunManifest, report_dir: Optional[str] = None) -> Tuple[str, List[str]]:
    """
    Summary text and gnuplot data files for the stages in the manifest:
    density heatmap, kappa curve, effective coefficients, effective value,
    multiscale envelopes and the error-vs-epsilon table.
    """
    report_dir = report_dir or os.path.join(manifest.out_dir, StageType.REPORT.value)
    files: List[str] = []
    lines: List[str] = []

    def out(name: str) -> str:
        path = os.path.join(report_dir, name)
        files.append(path)
        return path

    rec = manifest.record(StageType.DENSITY)
    if rec:
        _, d = csvio.read_csv(rec.outputs[0])
        x_bar = _nearest(d["x_bar"], 0.5)
        mask = d["x_bar"] == x_bar
        columns = [c for c in d if c.startswith("y")] + ["rho"]
        csvio.write_plot_data(
            out("density_heatmap.dat"), columns, [d[c][mask] for c in columns], f"invariant density at x_bar={x_bar:g}"
        )
        lines.append(f"density: {rec.data.get('nodes')} slow nodes, min density {rec.data.get('min_density', float('nan')):.6g}")

    rec = manifest.record(StageType.HOMOGENIZE)
    if rec:
        _, d = csvio.read_csv(rec.outputs[0])
        csvio.write_plot_data(out("kappa.dat"), ("x", "kappa"), [d["x"], d["kappa"]], "kappa(x)")
        csvio.write_plot_data(
            out("effective_coefficients.dat"),
            ("x", "mu_bar", "a_bar", "l_bar"),
            [d["x"], d["mu_bar"], d["a_bar"], d["l_bar"]],
            "effective coefficients",
        )
        lines.append(f"homogenize: max |kappa| {rec.data.get('max_abs_kappa', float('nan')):.6g}")

    rec = manifest.record(StageType.CELL)
    if rec:
        for pt in rec.data.get("points", []):
            lines.append(
                f"cell: p=({pt['x_bar']:g}, {pt['g']:g}, {pt['H']:g}) H_cell={pt['h_cell']:.6g} "
                f"H_quad={pt['h_quadrature']:.6g} spread={pt['spread']:.3g}"
            )

    rec = manifest.record(StageType.SOLVE_EFFECTIVE)
    if rec:
        _, d = csvio.read_csv(rec.outputs[0])
        csvio.write_plot_data(out("value_effective.dat"), ("x", "v", "policy"), [d["x"], d["v"], d["policy"]], "effective value")
        lines.append(
            f"solve-effective: residual {rec.data.get('residual', float('nan')):.3g}, "
            f"Neumann residual {rec.data.get('neumann_residual', float('nan')):.3g}"
        )

    rec = manifest.record(StageType.SOLVE_MULTISCALE)
    if rec:
        columns, data = ["x"], []
        for entry, path in zip(rec.data.get("fields", []), rec.outputs):
            _, d = csvio.read_csv(path)
            x = np.unique(d["x"])
            v = d["v"].reshape(len(x), -1)
            if not data:
                data.append(x)
            columns += [f"min_v_eps_{entry['epsilon']:g}", f"max_v_eps_{entry['epsilon']:g}"]
            data += [v.min(axis=1), v.max(axis=1)]
            lines.append(f"solve-multiscale: epsilon={entry['epsilon']:g} residual {entry['residual']:.3g}")
        if data:
            csvio.write_plot_data(out("value_multiscale_envelope.dat"), columns, data, "min/max over y of v_eps")

    rec = manifest.record(StageType.CONVERGE)
    if rec:
        _, d = csvio.read_csv(rec.outputs[0])
        csvio.write_plot_data(
            out("convergence_loglog.dat"),
            ("epsilon", "err_inf", "err_sup"),
            [d["epsilon"], d["err_inf"], d["err_sup"]],
            "errors against the effective value (plot with logscale xy)",
        )
        for row in rec.data.get("rows", []):
            lines.append(
                f"converge: epsilon={row['epsilon']:g} err_inf={row['err_inf']:.4g} "
                f"err_sup={row['err_sup']:.4g} runtime={row['runtime_s']:.1f}s"
            )

    rec = manifest.record(StageType.SIMULATE)
    if rec:
        for est in rec.data.get("estimates", []):
            lines.append(
                f"simulate: {est['which']} x0={est['x0']:g} MC={est['mean']:.5g}±{est['stderr']:.2g} "
                f"PDE={est['pde_value']:.5g} {'ok' if est['agrees'] else 'MISMATCH'}"
            )

    if files:
        lines.append("data files: " + ", ".join(os.path.basename(f) for f in files))
    return "\n".join(lines), files
