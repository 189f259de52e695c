"""
Semilinear state equation ``y_t + A y = F(y) + sources``.

F is always evaluated on interval values, so the deviation ``z = y - ybar``
from a reference trajectory satisfies a *linear* scheme with the interval
reaction coefficient

    G = int_0^1 F'(ybar_hat + tau z_hat) d tau,    G z_hat = F(ybar_hat + z_hat) - F(ybar_hat)

exactly (up to the Gauss-Legendre rule).  Frozen-coefficient outer loops
therefore reproduce the discrete nonlinear problem at their fixed point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    ContractionFailure,
    MaxIterations,
    OuterDivergence,
    PicardDivergence,
    ShapeMismatch,
)
from .pde import Stepper, forward_interval, backward_interval, inner_q


@dataclass(frozen=True)
class Nonlinearity:
    """A bounded C^1 nonlinearity with declared sup-norm bounds."""

    name: str
    kappa: float
    F: Callable
    dF: Callable
    sup_F: float
    sup_dF: float
    sup_d2F: float | None = None

    @property
    def is_zero(self) -> bool:
        return self.name == "zero" or self.kappa == 0.0

    def check_bounds(self, lo: float = -50.0, hi: float = 50.0, n: int = 10_000) -> bool:
        y = np.linspace(lo, hi, n)
        ok = np.all(np.abs(self.F(y)) <= self.sup_F * (1 + 1e-12) + 1e-300)
        return bool(ok and np.all(np.abs(self.dF(y)) <= self.sup_dF * (1 + 1e-12) + 1e-300))


def _zero(y):
    return np.zeros_like(np.asarray(y, dtype=float))


def make_nonlinearity(name: str = "zero", kappa: float = 1.0) -> Nonlinearity:
    """Registry lookup: ``zero``, ``tanh`` (kappa tanh y) or ``sine`` (kappa sin y)."""
    if name not in NONLINEARITIES:
        raise KeyError(f"unknown nonlinearity {name!r}; choose from {sorted(NONLINEARITIES)}")
    return NONLINEARITIES[name](float(kappa))


def _tanh(k):
    return Nonlinearity("tanh", k, lambda y: k * np.tanh(y),
                        lambda y: k / np.cosh(np.clip(y, -350, 350)) ** 2,
                        abs(k), abs(k), abs(k) * 4 / (3 * math.sqrt(3)))


def _sine(k):
    return Nonlinearity("sine", k, lambda y: k * np.sin(y), lambda y: k * np.cos(y),
                        abs(k), abs(k), abs(k))


NONLINEARITIES = {
    "zero": lambda k: Nonlinearity("zero", 0.0, _zero, _zero, 0.0, 0.0, 0.0),
    "tanh": _tanh,
    "sine": _sine,
}


def linear_stub(kappa: float) -> Nonlinearity:
    """``F(y) = kappa y``; unbounded, for testing only (not in the registry)."""
    return Nonlinearity("linear-stub", kappa, lambda y: kappa * np.asarray(y, dtype=float),
                        lambda y: np.full_like(np.asarray(y, dtype=float), kappa),
                        math.inf, abs(kappa), 0.0)


# ---------------------------------------------------------------------------
# state solves


def semilinear_forward(op, scheme, nl: Nonlinearity, y0, source=None, tol=1e-10,
                       max_picard=100, stepper=None) -> np.ndarray:
    """theta-scheme with ``F`` at the interval value, Picard-corrected per step."""
    st = stepper or Stepper(op, scheme)
    if nl.is_zero:
        return st.forward(y0, source)
    nt, n = scheme.n_steps, op.mass.size
    if source is not None and source.shape != (nt, n):
        raise ShapeMismatch(f"source shape {source.shape} != {(nt, n)}")
    dt, th, M = scheme.dt, scheme.theta, op.mass
    y = np.empty((nt + 1, n))
    y[0] = 0.0 if y0 is None else y0
    for k in range(nt):
        lu, C = st._step_mats(k)
        base = C @ y[k]
        if source is not None:
            base += dt * M * source[k]
        guess = y[k].copy()
        prev = math.inf
        grow = 0
        for it in range(max_picard):
            yh = th * guess + (1.0 - th) * y[k]
            new = lu.solve(base + dt * M * nl.F(yh))
            inc = np.max(np.abs(new - guess))
            guess = new
            if inc <= tol * (1.0 + np.max(np.abs(new))):
                break
            grow = grow + 1 if inc > prev else 0
            if grow >= 3 or not np.isfinite(inc):
                raise PicardDivergence(f"Picard iteration diverges at step {k}; reduce dt")
            prev = inc
        else:
            raise PicardDivergence(f"Picard iteration did not converge at step {k}")
        y[k + 1] = guess
    return y


def solve_trajectory(ybar0, nl: Nonlinearity, op, scheme, tol=1e-10) -> np.ndarray:
    """Uncontrolled semilinear trajectory (levels)."""
    return semilinear_forward(op, scheme, nl, ybar0, None, tol)


def G_coefficient(z, ybar, nl: Nonlinearity, quad_nodes: int = 8) -> np.ndarray:
    """Gauss-Legendre value of ``int_0^1 F'(ybar + tau z) d tau`` (elementwise)."""
    if quad_nodes < 4:
        raise ValueError("quad_nodes must be at least 4")
    z = np.asarray(z, dtype=float)
    ybar = np.asarray(ybar, dtype=float)
    x, w = np.polynomial.legendre.leggauss(quad_nodes)
    tau, w = 0.5 * (x + 1.0), 0.5 * w
    out = np.zeros(np.broadcast(z, ybar).shape)
    for tk, wk in zip(tau, w):
        out += wk * nl.dF(ybar + tk * z)
    return out


# ---------------------------------------------------------------------------
# quasi-equilibrium


@dataclass
class SemilinearState:
    y: np.ndarray
    phis: list
    v: list
    trace: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


def _qn(a, op, dt, mask=None):
    return math.sqrt(max(inner_q(a, a, op.mass, dt, mask), 0.0))


def solve_quasi_nash(f, scenario, nl: Nonlinearity | None = None, tol=None, max_iter=200,
                     u0=None, check_uniqueness=False) -> SemilinearState:
    """Outer fixed point ``u -> y_u`` on the frozen-coefficient optimality system.

    Each outer step solves the linear forward-backward system with source
    ``F(u)`` in the state equation and reaction ``F'(u)`` in the follower
    adjoints.  Followers are ``v^i = -phi^i / alpha_i`` on ``O_i``.
    """
    nl = nl or scenario.nonlinearity
    tol = scenario.tol["outer"] if tol is None else tol
    op, scheme = scenario.op, scenario.scheme
    nt, n = scheme.n_steps, op.mass.size
    f = np.zeros((nt, n)) if f is None else np.asarray(f, dtype=float)
    y0 = scenario.y0
    yd = scenario.target_values(nonlinear=True)
    th, dt = scheme.theta, scheme.dt
    if u0 is None:
        u = forward_interval(semilinear_forward(op, scheme, nl, y0, f * scenario.regions.O), th)
    else:
        u = np.asarray(u0, dtype=float)
    trace = []
    bad = 0
    ctol = scenario.tol["coupling"]
    for it in range(1, max_iter + 1):
        system = scenario.system(None, nl.dF(u) if not nl.is_zero else None)
        extra = None if nl.is_zero else nl.F(u)
        y, phis, _ = system.solve_optimality(f, y0, yd, extra=extra, tol=ctol, w0=u)
        un = forward_interval(y, th)
        inc = _qn(un - u, op, dt)
        size = _qn(un, op, dt)
        trace.append(inc)
        u = un
        if inc <= tol * size or inc <= 64 * np.finfo(float).eps * size or nl.is_zero:
            break
        if it > 1 and inc >= trace[-2]:
            bad += 1
            if bad >= 3:
                raise ContractionFailure("outer map u -> y_u is not contracting", trace)
        else:
            bad = 0
    else:
        raise MaxIterations(f"quasi-equilibrium not reached in {max_iter} outer steps", trace)
    # final state consistent with the last frozen coefficients
    v = [-backward_interval(phis[i], th) * system.chi_ctrl[i] / scenario.alpha[i] for i in range(2)]
    state = SemilinearState(y, phis, v, trace, {"outer_iterations": len(trace)})
    if check_uniqueness:
        other = solve_quasi_nash(f, scenario, nl, tol, max_iter, u0=np.zeros_like(u))
        gap = _qn(forward_interval(other.y - y, th), op, dt) / max(size, 1e-300)
        state.diagnostics["second_start_gap"] = gap
        state.diagnostics["non_unique_at_this_alpha"] = bool(gap > 1e-6)
    return state


def semilinear_state(f, v, scenario, nl=None) -> np.ndarray:
    """Full semilinear state for given leader and follower controls."""
    nl = nl or scenario.nonlinearity
    R = scenario.regions
    src = (f if f is not None else 0.0) * R.O + v[0] * R.O1 + v[1] * R.O2
    src = np.broadcast_to(src, (scenario.scheme.n_steps, scenario.grid.n_cells)).copy()
    return semilinear_forward(scenario.op, scenario.scheme, nl, scenario.y0, src,
                              scenario.tol["picard"])


def semilinear_costs(f, v, scenario, nl=None, y=None) -> tuple:
    """``(J_1, J_2)`` for the semilinear state."""
    nl = nl or scenario.nonlinearity
    if y is None:
        y = semilinear_state(f, v, scenario, nl)
    yh = forward_interval(y, scenario.scheme.theta)
    yd = scenario.target_values(nonlinear=True)
    m, dt, R = scenario.op.mass, scenario.scheme.dt, scenario.regions
    out = []
    for i in range(2):
        track = inner_q(yh - yd[i], yh - yd[i], m, dt, R.target(i + 1))
        energy = inner_q(v[i], v[i], m, dt, R.follower(i + 1))
        out.append(0.5 * track + 0.5 * scenario.alpha[i] * energy)
    return tuple(out)


def semilinear_stationarity(i, f, v, scenario, nl=None) -> float:
    """``|phi^i 1_{O_i} + alpha_i v^i| / (1 + |alpha_i v^i|)`` with the linearized adjoint."""
    nl = nl or scenario.nonlinearity
    y = semilinear_state(f, v, scenario, nl)
    th = scenario.scheme.theta
    yh = forward_interval(y, th)
    yd = scenario.target_values(nonlinear=True)
    R = scenario.regions
    st = Stepper(scenario.op, scenario.scheme, None if nl.is_zero else nl.dF(yh))
    phi = st.backward(None, (yh - yd[i - 1]) * R.target(i))
    a = scenario.alpha[i - 1]
    dt, mask = scenario.scheme.dt, R.follower(i)
    r = _qn(backward_interval(phi, th) * mask + a * v[i - 1], scenario.op, dt, mask)
    return r / (1.0 + _qn(a * v[i - 1], scenario.op, dt, mask))


@dataclass
class ProbeReport:
    eps: tuple
    differences: np.ndarray  # (follower, direction, eps)
    min_difference: float
    scale: float
    slope: float
    counterexample: bool


def equilibrium_probe(state: SemilinearState, f, scenario, n_dirs=5, eps_list=(1e-1, 1e-2, 1e-3),
                      nl=None, seed=None) -> ProbeReport:
    """Unilateral perturbation test of a quasi-equilibrium.

    For each follower and random unit direction ``d`` the full semilinear
    state is recomputed with ``v^i + eps d`` and ``J_i`` re-evaluated.
    """
    nl = nl or scenario.nonlinearity
    rng = scenario.rng(11) if seed is None else np.random.default_rng(seed)
    m, dt, R = scenario.op.mass, scenario.scheme.dt, scenario.regions
    base = semilinear_costs(f, state.v, scenario, nl)
    diffs = np.zeros((2, n_dirs, len(eps_list)))
    for i in range(2):
        mask = R.follower(i + 1)
        for k in range(n_dirs):
            d = rng.standard_normal(state.v[i].shape) * mask
            d /= math.sqrt(inner_q(d, d, m, dt, mask))
            for e, eps in enumerate(eps_list):
                v = list(state.v)
                v[i] = v[i] + eps * d
                diffs[i, k, e] = semilinear_costs(f, v, scenario, nl)[i] - base[i]
    scale = max(max(base), 1e-300)
    mn = float(diffs.min())
    pos = np.all(diffs > 0, axis=(0, 1))
    slope = float("nan")
    if pos.sum() >= 2:
        le = np.log(np.asarray(eps_list)[pos])
        ld = np.log(np.mean(diffs[:, :, pos], axis=(0, 1)))
        slope = float(np.polyfit(le, ld, 1)[0])
    return ProbeReport(tuple(eps_list), diffs, mn, scale, slope, bool(mn < -1e-8 * scale))


# ---------------------------------------------------------------------------
# leader loop


@dataclass
class SemilinearLeaderReport:
    leader: object
    z: np.ndarray
    phis: list
    trace: list
    control_norms: list
    terminal_norm: float
    converged: bool


def semilinear_leader(scenario, nl: Nonlinearity | None = None, eps=None, tol=None, max_outer=50,
                      leader_tol=None):
    """Outer loop on ``z``: freeze ``G(z)`` and ``F'(ybar + z)``, compute a leader, set ``z <- w_z``.

    Returns a :class:`SemilinearLeaderReport`; ``leader`` is the
    :class:`~hardynash.leader.LeaderResult` from the final frozen system.
    """
    from .leader import HumProblem

    nl = nl or scenario.nonlinearity
    eps = scenario.eps[-1] if eps is None else eps
    tol = scenario.tol["outer"] if tol is None else tol
    th, dt, op = scenario.scheme.theta, scenario.scheme.dt, scenario.op
    z0, zd, ybar = scenario.reduced_data(nonlinear=True)
    yb = forward_interval(ybar, th)
    zh = np.zeros_like(yb)
    trace, norms = [], []
    result = None
    for it in range(1, max_outer + 1):
        if nl.is_zero:
            system = scenario.system()
        else:
            system = scenario.system(G_coefficient(zh, yb, nl), nl.dF(yb + zh))
        hum = HumProblem(system, z0, zd, coupling_tol=scenario.tol["coupling"])
        result = hum.minimize_exact(eps, tol=leader_tol or scenario.tol["leader"])
        zn = forward_interval(result.z, th)
        inc = _qn(zn - zh, op, dt)
        size = _qn(zn, op, dt)
        trace.append(inc)
        norms.append(math.sqrt(2.0 * result.cost))
        zh = zn
        if inc <= tol * size or size == 0.0:
            return SemilinearLeaderReport(result, result.z, result.phis, trace, norms,
                                          result.terminal_norm, True)
        if it > 3 and inc > trace[-2] and trace[-2] > trace[-3]:
            raise OuterDivergence("leader outer loop increments are growing", trace)
    raise MaxIterations(f"leader outer loop not converged in {max_outer} steps", trace)
