"""
Discrete Hardy operator, theta-scheme time steppers and space-time quadrature.

The elliptic part is stored as a symmetric stiffness matrix ``K`` together with
the diagonal mass (cell volume) matrix ``M``; the operator itself is
``A_h = M^{-1} K`` and is self-adjoint in the ``M`` inner product.

Time layout
-----------
States live on the ``N_t + 1`` time levels.  Sources, controls and targets
live on the ``N_t`` time intervals.  A forward state is paired with interval
data through its *interval value* ``theta y^{n+1} + (1 - theta) y^n``; a
backward state through ``theta p^n + (1 - theta) p^{n+1}``.  With this
convention the summation-by-parts identity

    <y^N, pT>_M - <y^0, p^0>_M = <f, p_hat>_Q - <y_hat, g>_Q

holds exactly for ``y`` forward with source ``f`` and ``p`` backward with
source ``g``, so every adjoint used downstream is exact up to round-off.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import LinearSolveFailure, ShapeMismatch
from .geometry import SpatialGrid, check_mu, hardy_potential

log = logging.getLogger(__name__)


@dataclass(eq=False)
class DiscreteOperator:
    """``-Delta_h - mu/|x|^2`` with homogeneous Dirichlet data.

    Attributes
    ----------
    stiffness : scipy.sparse.csr_matrix
        Symmetric matrix ``K`` (volume-weighted form).
    mass : ndarray
        Diagonal of ``M`` (cell volumes).
    """

    grid: SpatialGrid
    mu: float
    stiffness: sp.csr_matrix
    mass: np.ndarray
    _factor_cache: dict = field(default_factory=dict, repr=False)

    @property
    def matrix(self) -> sp.csr_matrix:
        """``A_h = M^{-1} K`` (the plain finite-difference operator)."""
        return sp.diags(1.0 / self.mass) @ self.stiffness

    def apply(self, v: np.ndarray) -> np.ndarray:
        return (self.stiffness @ v.T).T / self.mass

    def smallest_eigenvalue(self) -> float:
        """Smallest eigenvalue of the pencil ``K v = lambda M v``."""
        n = self.mass.size
        s = 1.0 / np.sqrt(self.mass)
        sym = sp.diags(s) @ self.stiffness @ sp.diags(s)
        if n <= 600:
            return float(np.linalg.eigvalsh(sym.toarray())[0])
        val = spla.eigsh(sym.tocsc(), k=1, sigma=-1.0, which="LM", return_eigenvectors=False)
        return float(val[0])


def _stiffness_radial(grid: SpatialGrid) -> sp.csr_matrix:
    n, h = grid.cells_per_axis, grid.h
    faces = np.arange(n + 1) * h
    area = 4.0 * np.pi * faces ** 2
    cond = area[1:n] / h  # interior faces between j and j+1
    diag = np.zeros(n)
    diag[:-1] += cond
    diag[1:] += cond
    diag[-1] += area[n] / (0.5 * h)  # Dirichlet ghost at r = R
    return sp.diags([-cond, diag, -cond], [-1, 0, 1], format="csr")


def _stiffness_tensor(grid: SpatialGrid) -> sp.csr_matrix:
    n, h, N = grid.cells_per_axis, grid.h, grid.dimension
    main = np.full(n, 2.0)
    main[0] = main[-1] = 3.0  # ghost value -u on the Dirichlet face
    off = -np.ones(n - 1)
    lap1 = sp.diags([off, main, off], [-1, 0, 1], format="csr") / h ** 2
    eye = sp.identity(n, format="csr")
    total = None
    for k in range(N):
        mats = [eye] * N
        mats[k] = lap1
        term = mats[0]
        for m in mats[1:]:
            term = sp.kron(term, m, format="csr")
        total = term if total is None else total + term
    return (total * h ** N).tocsr()


def assemble(grid: SpatialGrid, mu: float) -> DiscreteOperator:
    """Assemble the symmetric Dirichlet operator for ``-Delta - mu/|x|^2``."""
    mu = check_mu(mu, grid.dimension)
    K = _stiffness_radial(grid) if grid.mode == "radial3d" else _stiffness_tensor(grid)
    if mu:
        K = (K - sp.diags(grid.volumes * hardy_potential(grid, mu))).tocsr()
    K.sort_indices()
    op = DiscreteOperator(grid, mu, K, grid.volumes.copy())
    if mu and mu >= 0.999999 * ((grid.dimension - 2) ** 2 / 4.0):
        lam = op.smallest_eigenvalue()
        scale = spla.norm(K, ord=1) / grid.volumes.min()
        if lam < -1e-6 * scale:
            log.warning("critical mu: lambda_min(A_h) = %.3e is negative", lam)
    return op


@dataclass(frozen=True)
class TimeScheme:
    """Uniform theta-scheme on ``[0, T]``; theta = 1 (implicit Euler) or 1/2 (Crank-Nicolson)."""

    T: float
    n_steps: int
    theta: float = 0.5

    def __post_init__(self):
        if self.theta not in (0.5, 1.0):
            raise ValueError(f"theta must be 0.5 or 1.0, got {self.theta}")
        if not self.T > 0 or self.n_steps < 1:
            raise ValueError("need T > 0 and n_steps >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def levels(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.n_steps) + 0.5) * self.dt

    @property
    def forward_times(self) -> np.ndarray:
        """Time represented by a forward interval value."""
        return (np.arange(self.n_steps) + self.theta) * self.dt

    @property
    def backward_times(self) -> np.ndarray:
        return (np.arange(self.n_steps) + 1.0 - self.theta) * self.dt


def forward_interval(y: np.ndarray, theta: float) -> np.ndarray:
    """Interval values of a forward state (levels -> intervals)."""
    return theta * y[1:] + (1.0 - theta) * y[:-1]


def backward_interval(p: np.ndarray, theta: float) -> np.ndarray:
    """Interval values of a backward state (levels -> intervals)."""
    return theta * p[:-1] + (1.0 - theta) * p[1:]


def _factorize(mat):
    try:
        return spla.splu(mat.tocsc())
    except RuntimeError as exc:  # singular factor
        raise LinearSolveFailure(str(exc)) from exc


class Stepper:
    """Forward/backward theta-scheme marches for one operator and one reaction field.

    ``reaction`` (shape ``(N_t, n_cells)`` or None) adds ``+ c(x, t) u`` to the
    right-hand side of both equations, evaluated on the interval value; the
    forward and backward marches stay exact adjoints of one another.
    """

    def __init__(self, op: DiscreteOperator, scheme: TimeScheme, reaction: np.ndarray | None = None):
        self.op = op
        self.scheme = scheme
        n, nt = op.mass.size, scheme.n_steps
        if reaction is not None:
            reaction = np.asarray(reaction, dtype=float)
            if reaction.shape != (nt, n):
                raise ShapeMismatch(f"reaction shape {reaction.shape} != {(nt, n)}")
            if not reaction.any():
                reaction = None
        self.reaction = reaction
        dt, th = scheme.dt, scheme.theta
        M = sp.diags(op.mass)
        if reaction is None:
            key = (dt, th)
            if key not in op._factor_cache:
                B = (M + th * dt * op.stiffness).tocsc()
                C = (M - (1.0 - th) * dt * op.stiffness).tocsr()
                op._factor_cache[key] = (_factorize(B), C)
            self._lu, self._C = op._factor_cache[key]
            self._lus = None
        else:
            self._lus = [None] * nt
            self._Cs = [None] * nt
        self._M = op.mass

    def _step_mats(self, k: int):
        if self._lus is None:
            return self._lu, self._C
        if self._lus[k] is None:
            dt, th = self.scheme.dt, self.scheme.theta
            Kk = self.op.stiffness - sp.diags(self._M * self.reaction[k])
            M = sp.diags(self._M)
            self._lus[k] = _factorize(M + th * dt * Kk)
            self._Cs[k] = (M - (1.0 - th) * dt * Kk).tocsr()
        return self._lus[k], self._Cs[k]

    def _solve(self, lu, b):
        x = lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise LinearSolveFailure("non-finite value in linear solve")
        return x

    def forward(self, y0, rhs=None) -> np.ndarray:
        nt, n = self.scheme.n_steps, self._M.size
        dt = self.scheme.dt
        y = np.empty((nt + 1, n))
        y[0] = 0.0 if y0 is None else y0
        if rhs is not None and rhs.shape != (nt, n):
            raise ShapeMismatch(f"rhs shape {rhs.shape} != {(nt, n)}")
        for k in range(nt):
            lu, C = self._step_mats(k)
            b = C @ y[k]
            if rhs is not None:
                b += dt * self._M * rhs[k]
            y[k + 1] = self._solve(lu, b)
        return y

    def backward(self, terminal, rhs=None) -> np.ndarray:
        nt, n = self.scheme.n_steps, self._M.size
        dt = self.scheme.dt
        p = np.empty((nt + 1, n))
        p[nt] = 0.0 if terminal is None else terminal
        if rhs is not None and rhs.shape != (nt, n):
            raise ShapeMismatch(f"rhs shape {rhs.shape} != {(nt, n)}")
        for k in range(nt - 1, -1, -1):
            lu, C = self._step_mats(k)
            b = C @ p[k + 1]
            if rhs is not None:
                b += dt * self._M * rhs[k]
            p[k] = self._solve(lu, b)
        return p


def solve_forward(op: DiscreteOperator, scheme: TimeScheme, y0, rhs=None, reaction=None) -> np.ndarray:
    """March ``y_t + A_h y = rhs`` from ``y(0) = y0``; returns all time levels."""
    return Stepper(op, scheme, reaction).forward(y0, rhs)


def solve_backward(op: DiscreteOperator, scheme: TimeScheme, terminal, rhs=None, reaction=None) -> np.ndarray:
    """March ``-u_t + A_h u = rhs`` from ``u(T) = terminal``; exact adjoint of :func:`solve_forward`."""
    return Stepper(op, scheme, reaction).backward(terminal, rhs)


def inner_q(a: np.ndarray, b: np.ndarray, mass: np.ndarray, dt: float, mask=None) -> float:
    """Space-time inner product of two interval fields over ``mask x (0, T)``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.shape[-1] != mass.size:
        raise ShapeMismatch(f"cannot pair shapes {a.shape} and {b.shape}")
    w = mass if mask is None else mass * mask
    return float(dt * np.einsum("tj,tj,j->", a, b, w))


def norm_q(a, mass, dt, mask=None) -> float:
    return float(np.sqrt(max(inner_q(a, a, mass, dt, mask), 0.0)))


def inner_m(a, b, mass) -> float:
    return float(np.dot(a * mass, b))


def norm_m(a, mass) -> float:
    return float(np.sqrt(max(inner_m(a, a, mass), 0.0)))


# ---------------------------------------------------------------------------
# field files


@dataclass
class Field:
    """Space-time scalar array with its time layout ("levels" or "intervals")."""

    values: np.ndarray
    kind: str = "levels"
    T: float = 1.0

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeMismatch("field values must be 2-D (time, cell)")
        if self.kind not in ("levels", "intervals"):
            raise ValueError(f"unknown field kind {self.kind!r}")

    def times(self) -> np.ndarray:
        rows = self.values.shape[0]
        if self.kind == "levels":
            return np.linspace(0.0, self.T, rows)
        return (np.arange(rows) + 0.5) * self.T / rows


_MAGIC = b"HHFIELD1"
_HEADER = struct.Struct("<8sQQdQ")


def write_field_binary(fld: Field, path) -> None:
    """Header (magic, rows, cols, T, kind) followed by row-major little-endian doubles."""
    rows, cols = fld.values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, rows, cols, float(fld.T), 0 if fld.kind == "levels" else 1))
        fh.write(fld.values.astype("<f8").tobytes(order="C"))


def read_field_binary(path) -> Field:
    with open(path, "rb") as fh:
        magic, rows, cols, T, kind = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a field file")
        data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
    if data.size != rows * cols:
        raise ShapeMismatch(f"{path}: truncated field file")
    return Field(data.reshape(rows, cols).astype(np.float64), "levels" if kind == 0 else "intervals", T)


def write_field_csv(fld: Field, path) -> None:
    t = fld.times()
    rows, cols = fld.values.shape
    with open(path, "w") as fh:
        fh.write(f"# kind={fld.kind} T={float(fld.T)!r}\n")
        fh.write("time,cell,value\n")
        for k in range(rows):
            for j in range(cols):
                fh.write(f"{float(t[k])!r},{j},{float(fld.values[k, j])!r}\n")


def read_field_csv(path) -> Field:
    with open(path) as fh:
        meta = fh.readline().lstrip("# ").split()
        opts = dict(item.split("=", 1) for item in meta)
        fh.readline()
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    times = np.unique(data[:, 0])
    cols = int(data[:, 1].max()) + 1
    values = data[:, 2].reshape(times.size, cols)
    return Field(values, opts.get("kind", "levels"), float(opts.get("T", 1.0)))
