"""
Cell-centered grids, control/observation regions and the Hardy potential.

Two layouts are supported:

``radial3d``
    The ball ``|x| < R`` in three dimensions, reduced to radially symmetric
    functions.  Cells are the spherical shells ``(j h, (j+1) h)`` with
    centers ``r_j = (j + 1/2) h``; quadrature weights are exact shell volumes.
``tensor``
    The box ``(-L, L)^N``.  An even number of cells per axis keeps every
    cell center at distance at least ``h/2`` from each coordinate plane, so
    the origin is never a degree of freedom.

Regions are unions of simple shapes: annuli ``(r_in, r_out)`` centered at
the origin (Euclidean or max-norm shells in tensor mode) and axis-aligned
boxes.  The five masks ``O, O_1, O_2, O_{1,d}, O_{2,d}`` are validated
against the standing geometric hypotheses when a :class:`RegionSet` is
built.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    CaseMismatch,
    EmptyIntersection,
    EmptyRegion,
    GeometryError,
    MuOutOfRange,
    SingularOverlap,
)

REGION_NAMES = ("O", "O1", "O2", "O1d", "O2d")
MODES = ("radial3d", "tensor")


@dataclass(frozen=True, eq=False)
class SpatialGrid:
    """Cell-centered discretization of a domain containing the closed unit ball.

    ``centers`` has shape ``(n_cells, dim_coords)``: one radial coordinate in
    ``radial3d`` mode, ``N`` Cartesian coordinates in ``tensor`` mode.
    ``radius`` holds ``|x_j|`` and ``volumes`` the quadrature weights.
    """

    dimension: int
    mode: str
    extent: float
    cells_per_axis: int
    h: float
    centers: np.ndarray
    radius: np.ndarray
    volumes: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.radius.shape[0]

    @property
    def shape(self) -> tuple:
        if self.mode == "radial3d":
            return (self.cells_per_axis,)
        return (self.cells_per_axis,) * self.dimension

    @property
    def domain_volume(self) -> float:
        return float(self.volumes.sum())

    def axis_coordinates(self) -> np.ndarray:
        n, h = self.cells_per_axis, self.h
        if self.mode == "radial3d":
            return (np.arange(n) + 0.5) * h
        return -self.extent + (np.arange(n) + 0.5) * h

    def gradient(self, values: np.ndarray) -> list:
        """Discrete gradient components of a per-cell field (last axis = cells).

        Interior cells use centered differences; the outermost cells use the
        Dirichlet ghost value ``-u`` so that the boundary trace is zero.
        Radial mode returns the single component ``du/dr``; at the innermost
        shell the symmetry condition ``u'(0) = 0`` is used.
        """
        values = np.asarray(values, dtype=float)
        lead = values.shape[:-1]
        u = values.reshape(lead + self.shape)
        h = self.h
        comps = []
        naxes = len(self.shape)
        for k in range(naxes):
            ax = len(lead) + k
            n = u.shape[ax]
            pad_lo = np.take(u, [0], axis=ax)
            pad_hi = -np.take(u, [n - 1], axis=ax)
            if self.mode == "radial3d":
                pad_lo = pad_lo.copy()  # even reflection across r = 0
            else:
                pad_lo = -pad_lo
            ext = np.concatenate([pad_lo, u, pad_hi], axis=ax)
            hi = np.take(ext, np.arange(2, n + 2), axis=ax)
            lo = np.take(ext, np.arange(0, n), axis=ax)
            comps.append(((hi - lo) / (2.0 * h)).reshape(values.shape))
        return comps

    def gradient_norm(self, values: np.ndarray) -> np.ndarray:
        comps = self.gradient(values)
        return np.sqrt(sum(c * c for c in comps))


def build_grid(mode: str = "radial3d", cells_per_axis: int = 32, extent: float = 2.0,
               dimension: int | None = None) -> SpatialGrid:
    """Build a cell-centered grid.

    Parameters
    ----------
    mode : {"radial3d", "tensor"}
    cells_per_axis : int
        Number of cells per axis (radial shells in ``radial3d`` mode), at least 8.
    extent : float
        Outer radius ``R`` (radial) or half-width ``L`` (tensor); must exceed 1.
    dimension : int, optional
        Space dimension. Forced to 3 in radial mode; required (>= 2) in tensor mode.
    """
    if mode not in MODES:
        raise GeometryError(f"unknown grid mode {mode!r}; expected one of {MODES}")
    cells_per_axis = int(cells_per_axis)
    extent = float(extent)
    if cells_per_axis < 8:
        raise GeometryError(f"cells_per_axis must be >= 8, got {cells_per_axis}")
    if not extent > 1.0:
        raise GeometryError(
            f"extent must exceed 1 so the closed unit ball lies inside the domain, got {extent}")

    if mode == "radial3d":
        if dimension not in (None, 3):
            raise GeometryError("radial3d mode represents N = 3 only")
        h = extent / cells_per_axis
        r = (np.arange(cells_per_axis) + 0.5) * h
        faces = np.arange(cells_per_axis + 1) * h
        vol = 4.0 * math.pi / 3.0 * (faces[1:] ** 3 - faces[:-1] ** 3)
        return SpatialGrid(3, mode, extent, cells_per_axis, h, r[:, None].copy(), r, vol)

    if dimension is None or int(dimension) < 2:
        raise GeometryError("tensor mode needs dimension >= 2")
    dimension = int(dimension)
    if cells_per_axis % 2:
        raise GeometryError(
            f"an odd cell count ({cells_per_axis}) places a cell center at the origin")
    h = 2.0 * extent / cells_per_axis
    axis = -extent + (np.arange(cells_per_axis) + 0.5) * h
    mesh = np.meshgrid(*([axis] * dimension), indexing="ij")
    centers = np.stack([m.ravel() for m in mesh], axis=1)
    radius = np.sqrt((centers ** 2).sum(axis=1))
    vol = np.full(radius.shape, h ** dimension)
    return SpatialGrid(dimension, mode, extent, cells_per_axis, h, centers, radius, vol)


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class Shell:
    """Open shell ``r_in < |x| < r_out`` (``norm`` is 2 or ``inf``)."""

    r_in: float
    r_out: float
    norm: str = "2"

    def contains(self, grid: SpatialGrid) -> np.ndarray:
        if grid.mode == "radial3d" or self.norm == "2":
            r = grid.radius
        else:
            r = np.abs(grid.centers).max(axis=1)
        return (r > self.r_in) & (r < self.r_out)

    def min_norm(self) -> float:
        # the inner max-norm square has inscribed radius r_in as well
        return max(self.r_in, 0.0)


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def contains(self, grid: SpatialGrid) -> np.ndarray:
        if grid.mode == "radial3d":
            raise GeometryError("boxes are only available in tensor mode")
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != (grid.dimension,) or hi.shape != (grid.dimension,):
            raise GeometryError(f"box corners must have {grid.dimension} coordinates")
        c = grid.centers
        return np.all((c > lo) & (c < hi), axis=1)

    def min_norm(self) -> float:
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        return float(np.linalg.norm(np.clip(0.0, lo, hi)))


def parse_shape(item) -> Shell | Box:
    """Turn plain config data into a shape.

    ``[a, b]`` is a Euclidean annulus; ``{"shell": [a, b], "norm": "inf"}``
    a max-norm shell; ``{"box": [[lo...], [hi...]]}`` a box.
    """
    if isinstance(item, (Shell, Box)):
        return item
    if isinstance(item, Mapping):
        if "box" in item:
            lo, hi = item["box"]
            return Box(tuple(float(v) for v in lo), tuple(float(v) for v in hi))
        if "shell" in item:
            a, b = item["shell"]
            norm = str(item.get("norm", "2"))
            if norm not in ("2", "inf"):
                raise GeometryError(f"unsupported shell norm {norm!r}")
            return Shell(float(a), float(b), norm)
        raise GeometryError(f"cannot parse region shape {item!r}")
    a, b = item
    return Shell(float(a), float(b))


@dataclass(frozen=True)
class RegionSpec:
    """Region geometry: each name maps to a list of shapes (their union)."""

    shapes: Mapping[str, Sequence]
    case_flag: str = "shared"

    @classmethod
    def from_mapping(cls, data: Mapping, case_flag: str = "shared") -> "RegionSpec":
        shapes = {}
        for name in REGION_NAMES:
            if name not in data:
                raise GeometryError(f"region {name} missing from region spec")
            raw = data[name]
            if isinstance(raw, Mapping) or (len(raw) == 2 and not isinstance(raw[0], (list, tuple, Mapping, Shell, Box))):
                raw = [raw]
            shapes[name] = tuple(parse_shape(s) for s in raw)
        return cls(shapes, case_flag)


@dataclass(frozen=True, eq=False)
class RegionSet:
    """Boolean masks for the five regions plus the geometric case."""

    O: np.ndarray
    O1: np.ndarray
    O2: np.ndarray
    O1d: np.ndarray
    O2d: np.ndarray
    case_flag: str
    report: tuple = field(default=())

    def mask(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def follower(self, i: int) -> np.ndarray:
        return (self.O1, self.O2)[i - 1]

    def target(self, i: int) -> np.ndarray:
        return (self.O1d, self.O2d)[i - 1]


def _union(shapes, grid) -> np.ndarray:
    m = np.zeros(grid.n_cells, dtype=bool)
    for s in shapes:
        m |= s.contains(grid)
    return m


def validate_regions(grid: SpatialGrid, masks: Mapping[str, np.ndarray], case_flag: str,
                     shapes: Mapping[str, Sequence] | None = None) -> list:
    """Return the list of violated hypotheses as ``(error class, message)`` pairs."""
    problems = []
    for name in REGION_NAMES:
        if not masks[name].any():
            problems.append((EmptyRegion, f"{name} contains no cell"))
    O = masks["O"]
    for i, name in ((1, "O1d"), (2, "O2d")):
        md = masks[name]
        if md.any() and O.any() and not (O & md).any():
            problems.append((EmptyIntersection, f"O ∩ O_{i},d is empty"))
        if (md & (grid.radius <= 1.0)).any():
            problems.append((SingularOverlap, f"O_{i},d has cells in the closed unit ball"))
        elif shapes is not None and any(s.min_norm() < 1.0 for s in shapes[name]):
            problems.append((SingularOverlap, f"O_{i},d meets the closed unit ball"))
    if case_flag == "shared":
        if not np.array_equal(masks["O1d"], masks["O2d"]):
            problems.append((CaseMismatch, "case 'shared' requires O_1,d = O_2,d"))
    elif case_flag == "distinct":
        if np.array_equal(masks["O1d"] & O, masks["O2d"] & O):
            problems.append((CaseMismatch, "case 'distinct' requires O_1,d ∩ O ≠ O_2,d ∩ O"))
    else:
        problems.append((CaseMismatch, f"unknown case flag {case_flag!r}"))
    return problems


def build_regions(grid: SpatialGrid, spec: RegionSpec | Mapping, case_flag: str | None = None) -> RegionSet:
    """Rasterize the region spec on ``grid`` and check the geometric hypotheses.

    Raises the first violated hypothesis (``EmptyRegion``, ``EmptyIntersection``,
    ``SingularOverlap`` or ``CaseMismatch``).
    """
    if not isinstance(spec, RegionSpec):
        spec = RegionSpec.from_mapping(spec, case_flag or "shared")
    elif case_flag is not None:
        spec = RegionSpec(spec.shapes, case_flag)
    masks = {name: _union(spec.shapes[name], grid) for name in REGION_NAMES}
    problems = validate_regions(grid, masks, spec.case_flag, spec.shapes)
    if problems:
        cls, msg = problems[0]
        raise cls(msg)
    report = (
        ("O∩O1d cells", int((masks["O"] & masks["O1d"]).sum())),
        ("O∩O2d cells", int((masks["O"] & masks["O2d"]).sum())),
        ("case", spec.case_flag),
    )
    for m in masks.values():
        m.setflags(write=False)
    return RegionSet(case_flag=spec.case_flag, report=report, **masks)


def export_masks_csv(grid: SpatialGrid, regions: RegionSet, path) -> None:
    ncoord = grid.centers.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell"] + [f"x{k}" for k in range(ncoord)] + list(REGION_NAMES))
        for j in range(grid.n_cells):
            w.writerow([j] + [repr(float(v)) for v in grid.centers[j]]
                       + [int(regions.mask(n)[j]) for n in REGION_NAMES])


# ---------------------------------------------------------------------------
# Hardy potential


def hardy_constant(N: int) -> float:
    """Optimal Hardy constant ``(N - 2)^2 / 4``."""
    return (N - 2) ** 2 / 4.0


def check_mu(mu: float, N: int) -> float:
    mu = float(mu)
    if mu < 0.0 or mu > hardy_constant(N):
        raise MuOutOfRange(f"mu = {mu} outside [0, {hardy_constant(N)}] for N = {N}")
    return mu


def hardy_potential(grid: SpatialGrid, mu: float) -> np.ndarray:
    """Per-cell values of ``mu / |x|^2``."""
    mu = check_mu(mu, grid.dimension)
    return mu / grid.radius ** 2
