"""
Domain types, scenario loading and the two built-in example models.

Every field callable is vectorised with numpy broadcasting: slow states `x`
and controls `u` are scalars or arrays, fast states `y` carry their
coordinates on the last axis (shape `(..., d_y)`).
"""

import configparser
import dataclasses
import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from multiscale_soc.response import ScenarioError, StageType

logger = logging.getLogger(__name__)

FAST_DIFFUSION_STRUCTURES = ("diagonal", "rank_one")

# Section -> key -> converter name.
SCENARIO_SCHEMA: Dict[str, Dict[str, str]] = {
    "model": {
        "example_id": "int",
        "theta_a": "float",
        "theta_b": "float",
        "theta_c": "float",
        "theta_d": "float",
        "theta_e": "float",
        "sigma_x": "float",
        "sigma_y": "float",
        "alpha": "float",
        "beta": "float",
        "epsilon_list": "floats",
        "u_lo": "float",
        "u_hi": "float",
        "d_y": "int",
        "fast_diffusion_structure": "str",
    },
    "grids": {
        "n_slow": "int",
        "n_torus": "int",
        "n_control": "int",
        "cell_horizon": "float",
        "cell_dt": "float",
    },
    "mc": {
        "mc_paths": "int",
        "mc_dt": "float",
        "mc_horizon": "float",
        "occupation_horizon": "float",
        "occupation_dt": "float",
        "seed": "int",
    },
    "tolerances": {
        "tol_pde": "float",
        "tol_policy": "float",
        "tol_density": "float",
        "max_policy_iter": "int",
    },
}


@dataclass(frozen=True)
class ControlBox:
    """Box control set; one entry per control dimension."""

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or not self.lo:
            raise ScenarioError("control box bounds must have equal, nonzero length")
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ScenarioError(f"empty control box: lo={self.lo} hi={self.hi}")

    @classmethod
    def interval(cls, lo: float, hi: float) -> "ControlBox":
        return cls((float(lo),), (float(hi),))

    @property
    def lower(self) -> float:
        return self.lo[0]

    @property
    def upper(self) -> float:
        return self.hi[0]

    def clamp(self, u):
        return np.clip(u, self.lower, self.upper)

    def grid(self, n: int) -> np.ndarray:
        if self.lower == self.upper:
            return np.array([self.lower])
        return np.linspace(self.lower, self.upper, n)


@dataclass(frozen=True)
class ScenarioConfig:
    example_id: int = 1
    theta_a: float = 1.0
    theta_b: float = 1.0
    theta_c: float = 1.0
    theta_d: float = 0.5
    theta_e: float = 0.1
    sigma_x: float = 0.3
    sigma_y: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    epsilon_list: Tuple[float, ...] = (0.4, 0.2, 0.1, 0.05)
    u_lo: float = 0.0
    u_hi: float = 1.0
    d_y: int = 2
    fast_diffusion_structure: str = "diagonal"
    n_slow: int = 65
    n_torus: int = 32
    n_control: int = 201
    cell_horizon: float = 40.0
    cell_dt: float = 0.05
    mc_paths: int = 10_000
    mc_dt: float = 1e-3
    # 0 selects the discount truncation rule of sde_sim.horizon_for.
    mc_horizon: float = 0.0
    occupation_horizon: float = 2e4
    occupation_dt: float = 1e-3
    seed: int = 20250101
    tol_pde: float = 1e-8
    tol_policy: float = 1e-10
    tol_density: float = 1e-10
    max_policy_iter: int = 200

    def __post_init__(self):
        object.__setattr__(
            self, "epsilon_list", tuple(float(e) for e in self.epsilon_list)
        )
        _check(self.example_id in (1, 2), "example_id", f"unknown example {self.example_id}")
        _check(self.u_lo <= self.u_hi, "u_lo", "empty control box")
        _check(self.alpha > 0, "alpha", "must be positive")
        _check(self.beta > 0, "beta", "must be positive")
        _check(self.sigma_x > 0, "sigma_x", "must be positive")
        _check(self.sigma_y > 0, "sigma_y", "must be positive")
        _check(len(self.epsilon_list) > 0, "epsilon_list", "must not be empty")
        _check(
            all(0.0 < e < 1.0 for e in self.epsilon_list),
            "epsilon_list",
            "every epsilon must lie in (0, 1)",
        )
        _check(
            all(a > b for a, b in zip(self.epsilon_list, self.epsilon_list[1:])),
            "epsilon_list",
            "must be strictly decreasing",
        )
        _check(
            self.example_id != 2 or self.u_lo >= 0.0,
            "u_lo",
            "negative control with √u diffusion",
        )
        _check(self.n_slow >= 3, "n_slow", "must be at least 3")
        _check(self.n_torus >= 4, "n_torus", "must be at least 4")
        _check(self.d_y >= 1, "d_y", "must be at least 1")
        _check(self.n_control >= 2, "n_control", "must be at least 2")
        _check(
            self.fast_diffusion_structure in FAST_DIFFUSION_STRUCTURES,
            "fast_diffusion_structure",
            f"must be one of {FAST_DIFFUSION_STRUCTURES}",
        )
        for name in ("cell_horizon", "cell_dt", "mc_dt", "occupation_horizon", "occupation_dt"):
            _check(getattr(self, name) > 0, name, "must be positive")
        _check(self.mc_horizon >= 0, "mc_horizon", "must be >= 0 (0 = automatic)")
        _check(self.mc_paths >= 1, "mc_paths", "must be at least 1")
        for name in ("tol_pde", "tol_policy", "tol_density"):
            _check(getattr(self, name) > 0, name, "must be positive")
        _check(self.max_policy_iter >= 1, "max_policy_iter", "must be at least 1")

    @property
    def control_box(self) -> ControlBox:
        return ControlBox.interval(self.u_lo, self.u_hi)

    def replace(self, **changes: Any) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["epsilon_list"] = list(self.epsilon_list)
        return data


def _check(condition: bool, name: str, message: str) -> None:
    if not condition:
        raise ScenarioError(f"invalid scenario field '{name}': {message}")


def scenario_hash(cfg: ScenarioConfig) -> str:
    """SHA-256 of the canonical key/value dump of the configuration."""
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _line_of(text: str, key: str) -> Optional[int]:
    pattern = re.compile(rf"^\s*{re.escape(key)}\s*[=:]")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if pattern.match(line):
            return lineno
    return None


def _convert(kind: str, raw: str):
    raw = raw.strip()
    if kind == "float":
        return float(raw)
    if kind == "int":
        value = float(raw)
        if not value.is_integer():
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(value)
    if kind == "floats":
        return tuple(float(part) for part in raw.split(",") if part.strip())
    return raw


def load_scenario(text: str) -> ScenarioConfig:
    """
    Parse a scenario document into a validated ScenarioConfig.

    The document is `key = value` lines grouped in the sections `[model]`,
    `[grids]`, `[mc]` and `[tolerances]`, with `#` comments. Omitted keys take
    the ScenarioConfig defaults. Unknown sections and keys are errors.
    """
    parser = configparser.ConfigParser(
        comment_prefixes=("#",),
        inline_comment_prefixes=("#",),
        interpolation=None,
        strict=True,
    )
    parser.optionxform = str
    try:
        parser.read_string(text, source="<scenario>")
    except configparser.MissingSectionHeaderError as e:
        raise ScenarioError(
            f"parse error at line {e.lineno}: key outside of a section: {e.line.strip()!r}"
        ) from e
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise ScenarioError(f"parse error at line {lineno}: {line.strip()!r}") from e
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as e:
        raise ScenarioError(f"parse error at line {e.lineno}: {e.message}") from e

    values: Dict[str, Any] = {}
    for section in parser.sections():
        if section not in SCENARIO_SCHEMA:
            raise ScenarioError(f"unknown section [{section}]")
        schema = SCENARIO_SCHEMA[section]
        for key, raw in parser.items(section):
            lineno = _line_of(text, key)
            if key not in schema:
                raise ScenarioError(
                    f"unknown key '{key}' in [{section}] at line {lineno}"
                )
            try:
                values[key] = _convert(schema[key], raw)
            except ValueError as e:
                raise ScenarioError(
                    f"invalid value for '{key}' at line {lineno}: {e}"
                ) from e
    cfg = ScenarioConfig(**values)
    logger.debug("Loaded scenario %s", scenario_hash(cfg)[:12])
    return cfg


def load_scenario_file(path: str) -> ScenarioConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ScenarioError(f"cannot read scenario {path}: {e}") from e
    return load_scenario(text)


def dump_scenario(cfg: ScenarioConfig) -> str:
    """Render a configuration back into the scenario file format."""
    data = cfg.to_dict()
    lines: List[str] = []
    for section, schema in SCENARIO_SCHEMA.items():
        lines.append(f"[{section}]")
        for key, kind in schema.items():
            value = data[key]
            if kind == "floats":
                value = ", ".join(repr(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Model specifications
# ---------------------------------------------------------------------------

Field = Callable[..., Any]


@dataclass(frozen=True)
class SlowSpec:
    """
    Decomposed slow dynamics and costs on X = [-alpha, alpha].

    mu_X = mu_sf(x, y) + mu_sc(x, u), sigma_X = sigma_sf(x, y) + sigma_sc(x, u),
    L = l_sf(x, y) + l_sc(x, u). When `quadratic_f` is set the control part
    has the form mu_sc g + sigma_sc**2 H / 2 + l_sc = u**2 - f(x, g, H) u + offset.
    """

    alpha: float
    mu_sf: Field
    mu_sc: Field
    sigma_sf: Field
    sigma_sc: Field
    l_sf: Field
    l_sc: Field
    h_minus: float
    h_plus: float
    phi: Field
    dphi: Field
    quadratic_f: Optional[Field] = None
    quadratic_offset: float = 0.0
    example_id: Optional[int] = None

    def sc_bracket(self, x, u, g, H):
        """Control-dependent part of the Hamiltonian bracket."""
        sig = self.sigma_sc(x, u)
        return self.mu_sc(x, u) * g + 0.5 * sig * sig * H + self.l_sc(x, u)

    def sf_bracket(self, x, y, g, H):
        """Fast-dependent part of the Hamiltonian bracket."""
        sig = self.sigma_sf(x, y)
        return self.mu_sf(x, y) * g + 0.5 * sig * sig * H + self.l_sf(x, y)


@dataclass(frozen=True)
class FastSpec:
    """
    Fast dynamics dY = mu_y dt + sigma_y dW_fast + b_xy dW_slow on the torus.

    a_y = sigma_y sigma_y^T + b_xy b_xy^T; `c0` is the claimed ellipticity floor.
    """

    d_y: int
    mu_y: Field
    a_y: Field
    sigma_y: Field
    b_xy: Field
    c0: float
    structure: str = "diagonal"


def constraint_phi(x, alpha: float):
    """
    Constraint function phi(x) = (1/2a) e^{a^2-x^2} (x^2 - a^2) and its
    derivative (x/a) e^{a^2-x^2} (1 + a^2 - x^2).
    """
    if alpha <= 0:
        raise ScenarioError(f"alpha must be positive, got {alpha}")
    x = np.asarray(x, dtype=float)
    growth = np.exp(alpha * alpha - x * x)
    value = growth * (x * x - alpha * alpha) / (2.0 * alpha)
    derivative = (x / alpha) * growth * (1.0 + alpha * alpha - x * x)
    if value.ndim == 0:
        return float(value), float(derivative)
    return value, derivative


def constraint_phi_ball(x, alpha: float):
    """Constraint function of the ball B(0, alpha) in R^d; returns (value, gradient)."""
    if alpha <= 0:
        raise ScenarioError(f"alpha must be positive, got {alpha}")
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    growth = np.exp(alpha * alpha - r2)
    value = growth * (r2 - alpha * alpha) / (2.0 * alpha)
    gradient = (x / alpha) * (growth * (1.0 + alpha * alpha - r2))[..., None]
    return value, gradient


def _batch_shape(x, y) -> Tuple[int, ...]:
    return np.broadcast(np.asarray(x, dtype=float), np.asarray(y)[..., 0]).shape


def build_example(cfg: ScenarioConfig) -> Tuple[SlowSpec, FastSpec]:
    """Construct the slow and fast specifications of example 1 or 2."""
    if cfg.example_id not in (1, 2):
        raise ScenarioError(f"unknown example_id {cfg.example_id}", StageType.SCENARIO)
    if cfg.d_y != 2:
        raise ScenarioError(
            f"invalid scenario field 'd_y': the examples have d_y = 2, got {cfg.d_y}"
        )

    ta, tb, tc, td, te = cfg.theta_a, cfg.theta_b, cfg.theta_c, cfg.theta_d, cfg.theta_e
    sx, sy, alpha = cfg.sigma_x, cfg.sigma_y, cfg.alpha
    two_pi = 2.0 * math.pi

    def mu_sf(x, y):
        y = np.asarray(y, dtype=float)
        return ta * np.asarray(x, dtype=float) * np.sin(two_pi * y[..., 0]) * np.sin(two_pi * y[..., 1])

    def mu_sc(x, u):
        return -tb * np.asarray(u, dtype=float) + 0.0 * np.asarray(x, dtype=float)

    def l_sf(x, y):
        return np.zeros(_batch_shape(x, y))

    def l_sc(x, u):
        u = np.asarray(u, dtype=float)
        return (td - u) ** 2 + 0.0 * np.asarray(x, dtype=float)

    if cfg.example_id == 1:

        def sigma_sf(x, y):
            return sx * np.asarray(x, dtype=float) * np.ones(_batch_shape(x, y))

        def sigma_sc(x, u):
            return np.zeros(np.broadcast(np.asarray(x), np.asarray(u)).shape)

        def quadratic_f(x, g, H):
            return 2.0 * td + tb * np.asarray(g, dtype=float) + 0.0 * np.asarray(x) + 0.0 * np.asarray(H)

    else:

        def sigma_sf(x, y):
            return np.zeros(_batch_shape(x, y))

        def sigma_sc(x, u):
            u = np.asarray(u, dtype=float)
            return sx * np.sqrt(np.maximum(u, 0.0)) * np.asarray(x, dtype=float)

        def quadratic_f(x, g, H):
            x = np.asarray(x, dtype=float)
            return 2.0 * td + tb * np.asarray(g, dtype=float) - 0.5 * sx * sx * x * x * np.asarray(H, dtype=float)

    def phi(x):
        return constraint_phi(x, alpha)[0]

    def dphi(x):
        return constraint_phi(x, alpha)[1]

    slow = SlowSpec(
        alpha=alpha,
        mu_sf=mu_sf,
        mu_sc=mu_sc,
        sigma_sf=sigma_sf,
        sigma_sc=sigma_sc,
        l_sf=l_sf,
        l_sc=l_sc,
        h_minus=te,
        h_plus=te,
        phi=phi,
        dphi=dphi,
        quadratic_f=quadratic_f,
        quadratic_offset=td * td,
        example_id=cfg.example_id,
    )

    ones = np.ones(2)
    if cfg.fast_diffusion_structure == "diagonal":
        dispersion = sy * np.eye(2)
        loading = np.zeros(2)
    else:
        dispersion = np.zeros((2, 2))
        loading = sy * ones
    diffusion = dispersion @ dispersion.T + np.outer(loading, loading)

    def mu_y(x, y):
        y = np.asarray(y, dtype=float)
        amp = tc * np.asarray(x, dtype=float) * np.cos(two_pi * (y[..., 0] - y[..., 1]))
        return np.stack([amp, amp], axis=-1)

    def a_y(x, y):
        return np.broadcast_to(diffusion, _batch_shape(x, y) + (2, 2))

    def sigma_y(x, y):
        return np.broadcast_to(dispersion, _batch_shape(x, y) + (2, 2))

    def b_xy(x, y):
        return np.broadcast_to(loading, _batch_shape(x, y) + (2,))

    fast = FastSpec(
        d_y=2,
        mu_y=mu_y,
        a_y=a_y,
        sigma_y=sigma_y,
        b_xy=b_xy,
        c0=sy * sy,
        structure=cfg.fast_diffusion_structure,
    )
    logger.debug(
        "Built example %d with %s fast diffusion", cfg.example_id, cfg.fast_diffusion_structure
    )
    return slow, fast


def shift_running_cost(slow: SlowSpec, delta: float) -> SlowSpec:
    """The same model with delta added to the fast-dependent running cost."""
    base = slow.l_sf

    def l_sf(x, y):
        return np.asarray(base(x, y), dtype=float) + delta

    return dataclasses.replace(slow, l_sf=l_sf)


# ---------------------------------------------------------------------------
# Structural hypotheses
# ---------------------------------------------------------------------------


@dataclass
class HypothesisCheck:
    name: str
    passed: bool
    worst: float
    detail: str = ""


@dataclass
class ValidationReport:
    checks: List[HypothesisCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> HypothesisCheck:
        for check in self.checks:
            if check.name == name:
                return check
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "checks": [dataclasses.asdict(c) for c in self.checks],
        }


def divergence_condition_expression(fast: FastSpec, x, y, step: float = 1e-4) -> np.ndarray:
    """
    (1/2) sum_ij d2 a_ij / dy_i dy_j - sum_i d mu_i / dy_i by central differences.
    """
    y = np.asarray(y, dtype=float)
    d = fast.d_y
    eye = np.eye(d) * step
    div_mu = 0.0
    for i in range(d):
        div_mu = div_mu + (
            fast.mu_y(x, y + eye[i])[..., i] - fast.mu_y(x, y - eye[i])[..., i]
        ) / (2.0 * step)
    second = 0.0
    for i in range(d):
        for j in range(d):
            if i == j:
                a_p = fast.a_y(x, y + eye[i])[..., i, i]
                a_0 = fast.a_y(x, y)[..., i, i]
                a_m = fast.a_y(x, y - eye[i])[..., i, i]
                second = second + (a_p - 2.0 * a_0 + a_m) / (step * step)
            else:
                a_pp = fast.a_y(x, y + eye[i] + eye[j])[..., i, j]
                a_pm = fast.a_y(x, y + eye[i] - eye[j])[..., i, j]
                a_mp = fast.a_y(x, y - eye[i] + eye[j])[..., i, j]
                a_mm = fast.a_y(x, y - eye[i] - eye[j])[..., i, j]
                second = second + (a_pp - a_pm - a_mp + a_mm) / (4.0 * step * step)
    return 0.5 * np.asarray(second) - np.asarray(div_mu)


def validate_structure(
    slow: SlowSpec,
    fast: FastSpec,
    n_samples: int = 256,
    seed: int = 0,
    control: Optional[ControlBox] = None,
    tol: float = 1e-6,
) -> ValidationReport:
    """
    Sample the structural hypotheses on random (x, y, u) and report each one
    with pass/fail and its worst sampled violation.
    """
    rng = np.random.default_rng(seed)
    control = control or ControlBox.interval(0.0, 1.0)
    alpha = slow.alpha
    x = rng.uniform(-alpha, alpha, n_samples)
    y = rng.uniform(0.0, 1.0, (n_samples, fast.d_y))
    u = rng.uniform(control.lower, control.upper, n_samples)
    report = ValidationReport()

    worst = 0.0
    for i in range(fast.d_y):
        shift = np.zeros(fast.d_y)
        shift[i] = 1.0
        worst = max(worst, float(np.max(np.abs(fast.mu_y(x, y + shift) - fast.mu_y(x, y)))))
        worst = max(worst, float(np.max(np.abs(fast.a_y(x, y + shift) - fast.a_y(x, y)))))
    report.checks.append(
        HypothesisCheck("fast_periodicity", worst <= 1e-12 * (1.0 + abs(alpha)), worst)
    )

    worst = 0.0
    for i in range(fast.d_y):
        shift = np.zeros(fast.d_y)
        shift[i] = 1.0
        for name in ("mu_sf", "sigma_sf", "l_sf"):
            f = getattr(slow, name)
            worst = max(worst, float(np.max(np.abs(f(x, y + shift) - f(x, y)))))
    report.checks.append(
        HypothesisCheck("slow_periodicity", worst <= 1e-12 * (1.0 + abs(alpha)), worst)
    )

    a = np.asarray(fast.a_y(x, y))
    asym = float(np.max(np.abs(a - np.swapaxes(a, -1, -2))))
    eig_min = float(np.min(np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, -1, -2)))))
    shortfall = max(0.0, fast.c0 - eig_min)
    report.checks.append(
        HypothesisCheck(
            "ellipticity",
            asym <= 1e-12 and eig_min > 0.0 and shortfall <= 1e-12 * fast.c0,
            shortfall,
            f"min eigenvalue {eig_min:.6g}, floor {fast.c0:.6g}, asymmetry {asym:.3g}",
        )
    )

    residual = float(np.max(np.abs(2.0 * slow.sigma_sc(x, u) * slow.sigma_sf(x, y))))
    report.checks.append(HypothesisCheck("non_correlation", residual <= 1e-12, residual))

    expr = divergence_condition_expression(fast, x, y)
    largest, smallest = float(np.max(expr)), float(np.min(expr))
    if largest <= tol and smallest >= -tol:
        sign = "zero"
    elif largest <= tol:
        sign = "nonpositive"
    elif smallest >= -tol:
        sign = "nonnegative"
    else:
        sign = "indefinite"
    report.checks.append(
        HypothesisCheck(
            "divergence_condition",
            largest <= tol,
            max(largest, 0.0),
            f"sign {sign}; range [{smallest:.3g}, {largest:.3g}]",
        )
    )

    edges = np.array([-alpha, alpha])
    phi_edge = np.abs(slow.phi(edges))
    dphi_edge = np.abs(np.abs(slow.dphi(edges)) - 1.0)
    interior = slow.phi(x[np.abs(x) < alpha])
    worst = float(max(np.max(phi_edge), np.max(dphi_edge), np.max(interior, initial=-np.inf)))
    report.checks.append(
        HypothesisCheck(
            "constraint_function",
            bool(np.max(phi_edge) <= 1e-12 and np.max(dphi_edge) <= 1e-12 and np.all(interior < 0)),
            max(worst, 0.0),
        )
    )

    for check in report.checks:
        if not check.passed:
            logger.warning("Hypothesis %s fails (worst %.3g) %s", check.name, check.worst, check.detail)
    return report
