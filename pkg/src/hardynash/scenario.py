"""
Problem instances: configuration loading, validation and expression evaluation.

A scenario file is TOML with the sections ``[grid]``, ``[regions]``,
``[model]``, ``[data]`` and optionally ``[leader]`` and ``[tolerances]``.
Initial data, targets and the leader source are expressions in a small
whitelisted grammar or ``file:<path>`` references to field files.
"""
from __future__ import annotations

import ast
import hashlib
import math
import re
from dataclasses import dataclass, field, fields
from functools import cached_property
from pathlib import Path

import numpy as np
import tomli

from .coupled import CoupledSystem
from .errors import HardyNashError, ParseError, ShapeMismatch, ValidationError
from .geometry import (
    REGION_NAMES,
    RegionSpec,
    SpatialGrid,
    build_grid,
    build_regions,
    hardy_constant,
    validate_regions,
)
from .pde import TimeScheme, assemble, read_field_binary, read_field_csv
from .semilinear import NONLINEARITIES, Nonlinearity, make_nonlinearity, solve_trajectory

DEFAULT_TOL = {
    "nash": 1e-10,       # CG / GCR relative residual
    "contraction": 1e-12,
    "coupling": 1e-13,   # inner block fixed points
    "leader": 1e-10,
    "outer": 1e-8,       # semilinear outer loops
    "picard": 1e-10,
}

# ---------------------------------------------------------------------------
# expressions

_FUNCS = {
    "exp": np.exp, "sin": np.sin, "cos": np.cos, "tanh": np.tanh, "sqrt": np.sqrt,
    "abs": np.abs, "log": np.log, "max": np.maximum, "min": np.minimum,
}
_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd, ast.Mod,
)


class Expression:
    """Whitelisted arithmetic expression of space/time variables.

    Names: ``r``, ``x1``..``x3``, ``t``, ``T``, ``pi``, ``R``/``L`` (domain
    extent), ``ybar`` (uncontrolled trajectory, targets only) and
    ``mode(k)`` (k-th discrete Dirichlet eigenvector, unit mass norm).
    """

    def __init__(self, text: str):
        self.text = str(text)
        try:
            tree = ast.parse(self.text.strip(), mode="eval")
        except SyntaxError as exc:
            raise ParseError(f"bad expression {self.text!r}: {exc.msg}") from exc
        for node in ast.walk(tree):
            if not isinstance(node, _ALLOWED_NODES):
                raise ParseError(f"disallowed syntax {type(node).__name__} in {self.text!r}")
            if isinstance(node, ast.Call):
                if not isinstance(node.func, ast.Name) or node.func.id not in (*_FUNCS, "mode"):
                    raise ParseError(f"unknown function in {self.text!r}")
                if node.keywords:
                    raise ParseError(f"keyword arguments not allowed in {self.text!r}")
            if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
                raise ParseError(f"only numeric constants allowed in {self.text!r}")
        self.names = {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)} - set(_FUNCS) - {"mode"}
        self._code = compile(tree, "<expr>", "eval")

    def evaluate(self, env: dict):
        unknown = self.names - set(env)
        if unknown:
            raise ParseError(f"unknown name(s) {sorted(unknown)} in {self.text!r}")
        with np.errstate(all="raise"):
            try:
                return eval(self._code, {"__builtins__": {}}, {**_FUNCS, **env})
            except FloatingPointError as exc:
                raise ParseError(f"floating point error evaluating {self.text!r}: {exc}") from exc


def _space_env(grid: SpatialGrid, op) -> dict:
    env = {"r": grid.radius, "pi": math.pi, "R": grid.extent, "L": grid.extent}
    if grid.mode == "tensor":
        for k in range(grid.dimension):
            env[f"x{k + 1}"] = grid.centers[:, k]
    cache = {}

    def mode(k):
        k = int(k)
        if "vecs" not in cache:
            if op.mass.size > 1500:
                raise ParseError("mode(k) requires at most 1500 cells")
            s = 1.0 / np.sqrt(op.mass)
            sym = op.stiffness.toarray() * np.outer(s, s)
            w, v = np.linalg.eigh(sym)
            cache["vecs"] = v * s[:, None]
        vec = cache["vecs"][:, k - 1]
        j = int(np.argmax(np.abs(vec)))
        return vec * np.sign(vec[j])

    env["mode"] = mode
    return env


def _load_field_file(path: Path):
    if path.suffix.lower() == ".csv":
        return read_field_csv(path)
    return read_field_binary(path)


@dataclass
class DataSpec:
    """One data item: an expression or a field file."""

    text: str
    base: Path = Path(".")

    def is_file(self) -> bool:
        return self.text.strip().startswith("file:")

    def spatial(self, grid, op) -> np.ndarray:
        n = grid.n_cells
        if self.is_file():
            fld = _load_field_file(self.base / self.text.strip()[5:])
            if fld.values.shape[1] != n:
                raise ShapeMismatch(f"{self.text}: {fld.values.shape[1]} cells, grid has {n}")
            return fld.values[0].copy()
        expr = Expression(self.text)
        env = _space_env(grid, op)
        env.update(t=0.0, T=np.nan)
        return np.broadcast_to(np.asarray(expr.evaluate(env), dtype=float), (n,)).copy()

    def space_time(self, grid, op, times, T, ybar_hat=None) -> np.ndarray:
        nt, n = len(times), grid.n_cells
        if self.is_file():
            fld = _load_field_file(self.base / self.text.strip()[5:])
            if fld.values.shape != (nt, n):
                raise ShapeMismatch(f"{self.text}: shape {fld.values.shape}, expected {(nt, n)}")
            return fld.values.copy()
        expr = Expression(self.text)
        env = _space_env(grid, op)
        env.update(t=np.asarray(times, dtype=float)[:, None], T=float(T))
        if ybar_hat is not None:
            env["ybar"] = ybar_hat
        return np.broadcast_to(np.asarray(expr.evaluate(env), dtype=float), (nt, n)).copy()


# ---------------------------------------------------------------------------
# scenario


@dataclass(eq=False)
class Scenario:
    """A complete problem instance.

    ``targets`` and ``leader_source`` entries may be :class:`DataSpec`
    objects, arrays of interval values, or callables
    ``(scenario, ybar_hat) -> array``.
    """

    grid: SpatialGrid
    regions: object
    mu: float
    scheme: TimeScheme
    alpha: tuple
    y0: np.ndarray
    ybar0: np.ndarray
    targets: tuple
    nonlinearity: Nonlinearity = field(default_factory=lambda: make_nonlinearity("zero"))
    leader_source: object = None
    eps: tuple = (1e-1, 1e-2, 1e-3, 1e-4)
    penalty: str = "exact"
    tol: dict = field(default_factory=lambda: dict(DEFAULT_TOL))
    seed: int = 0
    name: str = "scenario"
    config_hash: str = ""
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tol = {**DEFAULT_TOL, **(self.tol or {})}
        self.alpha = (float(self.alpha[0]), float(self.alpha[1]))
        self.y0 = np.asarray(self.y0, dtype=float)
        self.ybar0 = np.asarray(self.ybar0, dtype=float)

    @property
    def case_flag(self) -> str:
        return self.regions.case_flag

    @property
    def T(self) -> float:
        return self.scheme.T

    @cached_property
    def op(self):
        return assemble(self.grid, self.mu)

    def rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.default_rng([int(self.seed), int(stream)])

    def system(self, state_reaction=None, follower_reaction=None, alpha=None) -> CoupledSystem:
        return CoupledSystem(self.op, self.scheme, self.regions, alpha or self.alpha,
                             state_reaction, follower_reaction)

    def with_alpha(self, alpha) -> "Scenario":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        other = Scenario(**{**kw, "alpha": tuple(alpha)})
        other.__dict__["_cache"] = self.__dict__.get("_cache", {})
        if "op" in self.__dict__:
            other.__dict__["op"] = self.op
        return other

    def trajectory(self, nonlinear: bool = True) -> np.ndarray:
        """Uncontrolled trajectory from ``ybar0`` (levels)."""
        key = ("ybar", nonlinear)
        cache = self.__dict__.setdefault("_cache", {})
        if key not in cache:
            nl = self.nonlinearity if nonlinear else make_nonlinearity("zero")
            cache[key] = solve_trajectory(self.ybar0, nl, self.op, self.scheme,
                                          tol=self.tol["picard"])
        return cache[key]

    def _resolve(self, item, ybar_hat) -> np.ndarray:
        shape = (self.scheme.n_steps, self.grid.n_cells)
        if item is None:
            return np.zeros(shape)
        if isinstance(item, DataSpec):
            return item.space_time(self.grid, self.op, self.scheme.forward_times, self.T, ybar_hat)
        if callable(item):
            out = np.asarray(item(self, ybar_hat), dtype=float)
        else:
            out = np.asarray(item, dtype=float)
        if out.shape != shape:
            out = np.broadcast_to(out, shape)
        return np.array(out)

    def target_values(self, nonlinear: bool = True) -> list:
        """Targets ``y_{i,d}`` on the time intervals."""
        yb = self.trajectory(nonlinear)
        yb_hat = self.theta_hat(yb)
        return [self._resolve(self.targets[i], yb_hat) for i in range(2)]

    def leader_values(self) -> np.ndarray:
        yb_hat = self.theta_hat(self.trajectory(False))
        return self._resolve(self.leader_source, yb_hat) * self.regions.O

    def theta_hat(self, levels):
        th = self.scheme.theta
        return th * levels[1:] + (1.0 - th) * levels[:-1]

    def reduced_data(self, nonlinear: bool = False):
        """Data for the deviation ``z = y - ybar``: ``(z0, [zd_1, zd_2], ybar levels)``."""
        yb = self.trajectory(nonlinear)
        yb_hat = self.theta_hat(yb)
        ys = self.target_values(nonlinear)
        return self.y0 - self.ybar0, [ys[i] - yb_hat for i in range(2)], yb


# ---------------------------------------------------------------------------
# loading

_LINE_RE = re.compile(r"line (\d+)")


def parse_config_text(text: str, origin: str = "<string>") -> dict:
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = _LINE_RE.search(str(exc))
        line = int(m.group(1)) if m else None
        err = ParseError(f"{origin}: {exc}")
        err.line = line
        raise err from exc


def _get(section: dict, *names, default=None):
    for n in names:
        if n in section:
            return section[n]
    return default


def scenario_from_config(cfg: dict, base: Path = Path("."), config_text: str = "") -> Scenario:
    """Build and validate a scenario from parsed configuration data."""
    violations = []
    g = cfg.get("grid", {})
    try:
        grid = build_grid(g.get("mode", "radial3d"), _get(g, "cells", "cells_per_axis", default=32),
                          _get(g, "extent", "extent_length", default=2.0), g.get("dimension"))
    except HardyNashError as exc:
        raise ValidationError([f"grid: {exc}"]) from exc

    model = cfg.get("model", {})
    mu = float(model.get("mu", 0.0))
    mu_star = hardy_constant(grid.dimension)
    if mu < 0 or mu > mu_star:
        violations.append(f"mu = {mu} outside [0, mu*(N)] = [0, {mu_star}] (Hardy constant for N = {grid.dimension})")

    rcfg = dict(cfg.get("regions", {}))
    case = rcfg.pop("case", rcfg.pop("case_flag", "shared"))
    regions = None
    try:
        spec = RegionSpec.from_mapping(rcfg, case)
        masks = {n: np.zeros(grid.n_cells, bool) for n in REGION_NAMES}
        for n in REGION_NAMES:
            for s in spec.shapes[n]:
                masks[n] |= s.contains(grid)
        problems = validate_regions(grid, masks, case, spec.shapes)
        violations += [f"regions: {msg} ({cls.__name__})" for cls, msg in problems]
        if not problems:
            regions = build_regions(grid, spec)
    except HardyNashError as exc:
        violations.append(f"regions: {exc}")

    T = float(_get(model, "T_seconds", "T", default=1.0))
    steps = int(_get(model, "steps", "n_steps", default=40))
    theta = float(model.get("theta", 0.5))
    scheme = None
    try:
        scheme = TimeScheme(T, steps, theta)
    except ValueError as exc:
        violations.append(f"time scheme: {exc}")
    alpha = model.get("alpha", [1e3, 1e3])
    if isinstance(alpha, (int, float)):
        alpha = [alpha, alpha]
    if len(alpha) != 2 or min(alpha) <= 0:
        violations.append(f"alpha must be two positive numbers, got {alpha}")
    try:
        nl = make_nonlinearity(model.get("nonlinearity", "zero"), float(model.get("kappa", 1.0)))
    except (KeyError, ValueError) as exc:
        violations.append(f"nonlinearity: {exc}")
        nl = None

    lead = cfg.get("leader", {})
    eps = tuple(float(e) for e in lead.get("eps", (1e-1, 1e-2, 1e-3, 1e-4)))
    if any(e <= 0 for e in eps):
        violations.append("leader eps values must be positive")
    penalty = lead.get("penalty", "exact")
    if penalty not in ("exact", "quadratic"):
        violations.append(f"unknown penalty {penalty!r}")
    tol = {**DEFAULT_TOL, **{k: float(v) for k, v in cfg.get("tolerances", {}).items()}}
    cw = cfg.get("carleman", {})

    if violations:
        raise ValidationError(violations)

    data = cfg.get("data", {})
    spec_of = lambda key, default: DataSpec(str(data.get(key, default)), base)
    scn = Scenario(
        grid=grid, regions=regions, mu=mu, scheme=scheme, alpha=tuple(alpha),
        y0=np.zeros(grid.n_cells), ybar0=np.zeros(grid.n_cells),
        targets=(spec_of("y1d", "ybar"), spec_of("y2d", "ybar")), nonlinearity=nl,
        leader_source=spec_of("f", "0"), eps=eps, penalty=penalty, tol=tol,
        seed=int(cfg.get("seed", 0)), name=str(cfg.get("name", "scenario")),
        config_hash=hashlib.sha256(config_text.encode()).hexdigest() if config_text else "",
        weights={k: float(v) for k, v in cw.items()},
    )
    try:
        scn.y0 = spec_of("y0", "0").spatial(grid, scn.op)
        scn.ybar0 = spec_of("ybar0", "0").spatial(grid, scn.op)
        scn.target_values()
        scn.leader_values()
    except HardyNashError as exc:
        raise ValidationError([f"data: {exc}"]) from exc
    if case == "shared" and data.get("y1d", "ybar") != data.get("y2d", "ybar"):
        raise ValidationError(["case 'shared' requires identical targets y_1,d = y_2,d"])
    return scn


def load_scenario(path) -> Scenario:
    """Read, parse and validate a scenario file.

    Raises ``ParseError`` (with ``line`` when available) for malformed files
    and ``ValidationError`` listing every violated hypothesis.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    cfg = parse_config_text(text, str(path))
    return scenario_from_config(cfg, path.parent, text)


def bundled_scenario_path(name: str) -> Path:
    here = Path(__file__).parent / "scenarios"
    p = here / (name if name.endswith(".toml") else name + ".toml")
    if not p.exists():
        raise FileNotFoundError(f"no bundled scenario {name!r}; available: "
                                f"{sorted(q.stem for q in here.glob('*.toml'))}")
    return p


def load_bundled(name: str) -> Scenario:
    return load_scenario(bundled_scenario_path(name))


__all__ = ["Scenario", "DataSpec", "Expression", "load_scenario", "load_bundled",
           "scenario_from_config", "bundled_scenario_path", "DEFAULT_TOL", "NONLINEARITIES"]
