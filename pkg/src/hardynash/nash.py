"""
Follower Nash equilibrium for the linear problem.

With ``u`` the state driven by the leader alone, the equilibrium
``(v^1, v^2)`` solves ``A v = b`` on ``H = L^2(O_1 x (0,T)) x L^2(O_2 x (0,T))``::

    (A v)_i = alpha_i v^i + L_i^* ( (L_1 v^1 + L_2 v^2) 1_{O_i,d} )
    b_i     = L_i^* ( (zd_i - u) 1_{O_i,d} )

``A`` is self-adjoint in ``H`` only when ``O_1,d = O_2,d``; conjugate
gradients are used there and GMRES otherwise.  The fixed-point map on the
state is kept as an independent second path.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .errors import CoercivityFailure, MaxIterations, NonConvergence

log = logging.getLogger(__name__)


@dataclass
class NashSolution:
    v: list
    phis: list
    z: np.ndarray
    residuals: tuple
    diagnostics: dict = field(default_factory=dict)


@dataclass
class CostReport:
    J: tuple
    tracking: tuple
    energy: tuple
    J_leader: float


class NashProblem:
    """Linear follower game around a :class:`~hardynash.coupled.CoupledSystem`."""

    def __init__(self, system, z0=None, zd=None):
        self.sys = system
        n = system.n_cells
        self.z0 = np.zeros(n) if z0 is None else np.asarray(z0, dtype=float)
        self.zd = [system.check_interval(None if zd is None else zd[i]) for i in range(2)]
        # reduced coordinates: sqrt-weighted values on the control cells
        w = system.dt * system.mass
        self._idx = [np.flatnonzero(system.chi_ctrl[i]) for i in range(2)]
        self._sw = [np.sqrt(w[ix]) for ix in self._idx]
        self._sizes = [system.scheme.n_steps * ix.size for ix in self._idx]

    # control-to-state maps -------------------------------------------------
    def L(self, i, v):
        """Interval values of the state driven by ``v 1_{O_i}`` from rest."""
        s = self.sys
        return s.fhat(s.state.forward(None, v * s.chi_ctrl[i - 1]))

    def L_star(self, i, g):
        s = self.sys
        return s.bhat(s.state.backward(None, g)) * s.chi_ctrl[i - 1]

    def apply_A(self, v):
        s = self.sys
        src = v[0] * s.chi_ctrl[0] + v[1] * s.chi_ctrl[1]
        w = s.fhat(s.state.forward(None, src))
        return [s.alpha[i] * v[i] * s.chi_ctrl[i]
                + s.bhat(s.state.backward(None, w * s.chi_obs[i])) * s.chi_ctrl[i]
                for i in range(2)]

    def leader_state(self, f):
        s = self.sys
        return s.state.forward(self.z0, s.check_interval(f) * s.chi_O)

    def rhs(self, f):
        s = self.sys
        u = s.fhat(self.leader_state(f))
        return [self.L_star(i + 1, (self.zd[i] - u) * s.chi_obs[i]) for i in range(2)]

    def h_inner(self, a, b):
        return sum(self.sys.q(a[i], b[i], self.sys.chi_ctrl[i]) for i in range(2))

    # packing ---------------------------------------------------------------
    def pack(self, v):
        return np.concatenate([(v[i][:, self._idx[i]] * self._sw[i]).ravel() for i in range(2)])

    def unpack(self, x):
        s = self.sys
        out = []
        off = 0
        for i in range(2):
            vi = np.zeros(s.interval_shape)
            blk = x[off:off + self._sizes[i]].reshape(s.scheme.n_steps, -1)
            vi[:, self._idx[i]] = blk / self._sw[i]
            out.append(vi)
            off += self._sizes[i]
        return out

    def packed_operator(self):
        n = sum(self._sizes)
        return spla.LinearOperator((n, n), matvec=lambda x: self.pack(self.apply_A(self.unpack(x))),
                                   dtype=float)

    # state and costs -----------------------------------------------------
    def state(self, f, v):
        s = self.sys
        src = s.check_interval(f) * s.chi_O + v[0] * s.chi_ctrl[0] + v[1] * s.chi_ctrl[1]
        return s.state.forward(self.z0, src)

    def follower_adjoints(self, z):
        return self.sys.follower_adjoints(self.sys.fhat(z), self.zd)

    def stationarity(self, i, f, v):
        s = self.sys
        phi = self.follower_adjoints(self.state(f, v))[i - 1]
        a, mask = s.alpha[i - 1], s.chi_ctrl[i - 1]
        r = s.qnorm(s.bhat(phi) * mask + a * v[i - 1], mask)
        return r / (1.0 + s.qnorm(a * v[i - 1], mask))

    def costs(self, f, v, z=None) -> CostReport:
        s = self.sys
        f = s.check_interval(f)
        zh = s.fhat(self.state(f, v) if z is None else z)
        track = tuple(s.q(zh - self.zd[i], zh - self.zd[i], s.chi_obs[i]) for i in range(2))
        energy = tuple(s.q(v[i], v[i], s.chi_ctrl[i]) for i in range(2))
        J = tuple(0.5 * track[i] + 0.5 * s.alpha[i] * energy[i] for i in range(2))
        return CostReport(J, track, energy, 0.5 * s.q(f, f, s.chi_O))

    def _finish(self, f, v, diagnostics):
        z = self.state(f, v)
        phis = self.follower_adjoints(z)
        res = tuple(self.stationarity(i, f, v) for i in (1, 2))
        return NashSolution(v, phis, z, res, diagnostics)

    # solvers ---------------------------------------------------------------
    def solve_krylov(self, f=None, tol=1e-10, max_iter=500, x0=None) -> NashSolution:
        s = self.sys
        f = s.check_interval(f)
        b = self.pack(self.rhs(f))
        bn = float(np.linalg.norm(b))
        if bn == 0.0:
            v = [s.zeros(), s.zeros()]
            return self._finish(f, v, {"method": "trivial", "iterations": 0, "residual": 0.0,
                                       "trace": []})
        A = self.packed_operator()
        trace = []
        symmetric = s.regions.case_flag == "shared" or np.array_equal(s.chi_obs[0], s.chi_obs[1])
        xstart = None if x0 is None else self.pack(x0)
        if symmetric:
            method = "cg"
            cb = lambda xk: trace.append(float(np.linalg.norm(b - A @ xk)) / bn)
            x, info = spla.cg(A, b, x0=xstart, rtol=tol, atol=0.0, maxiter=max_iter, callback=cb)
        else:
            method = "gmres"
            cb = lambda rk: trace.append(float(rk))
            x, info = spla.gmres(A, b, x0=xstart, rtol=tol, atol=0.0, restart=min(200, b.size),
                                 maxiter=max_iter, callback=cb, callback_type="pr_norm")
        res = float(np.linalg.norm(b - A @ x)) / bn
        if info != 0 or res > 10 * tol:
            raise MaxIterations(f"{method} stopped with relative residual {res:.3e}", trace)
        v = self.unpack(x)
        return self._finish(f, v, {"method": method, "iterations": len(trace), "residual": res,
                                   "trace": trace})

    def solve_contraction(self, f=None, tol=1e-12, max_iter=500) -> NashSolution:
        s = self.sys
        f = s.check_interval(f)
        z, phis, trace = s.solve_optimality(f, self.z0, self.zd, tol=tol, max_iter=max_iter)
        v = [-s.bhat(phis[i]) * s.chi_ctrl[i] / s.alpha[i] for i in range(2)]
        return self._finish(f, v, {"method": "contraction", "iterations": len(trace),
                                   "residual": trace[-1] if trace else 0.0, "trace": trace})

    def contraction_ratio(self, w1, w2, f=None):
        """``|S(w1) - S(w2)|_Q / |w1 - w2|_Q``."""
        s = self.sys
        f = s.check_interval(f)
        a = s.fhat(s.S(w1, f, self.z0, self.zd)[0])
        b = s.fhat(s.S(w2, f, self.z0, self.zd)[0])
        return s.qnorm(a - b) / s.qnorm(w1 - w2)

    def contraction_factor(self, n_pairs=5, seed=0, f=None):
        """Largest measured ratio of :meth:`contraction_ratio` over random pairs."""
        rng = np.random.default_rng(seed)
        shape = self.sys.interval_shape
        return max(self.contraction_ratio(rng.standard_normal(shape), rng.standard_normal(shape), f)
                   for _ in range(n_pairs))

    def operator_norm(self, i, iters=200, tol=1e-6, rng=None):
        """Power iteration on ``L_i^* L_i``; returns ``(estimate, gap, history)``.

        The estimate ``sqrt(|B x_k|)`` is nondecreasing for a positive
        semidefinite ``B``.  ``NonConvergence`` if successive Rayleigh
        quotients still differ by more than ``tol`` (relative) at the end.
        """
        if iters < 20:
            raise ValueError("iters must be at least 20")
        s = self.sys
        rng = rng or np.random.default_rng(0)
        mask = s.chi_ctrl[i - 1]
        x = rng.standard_normal(s.interval_shape) * mask
        x /= s.qnorm(x, mask)
        hist = []
        rq_prev = None
        for k in range(iters):
            y = self.L_star(i, self.L(i, x))
            rq = s.q(x, y, mask)
            ny = s.qnorm(y, mask)
            hist.append(math.sqrt(ny))
            if ny == 0.0:
                return 0.0, 0.0, hist
            x = y / ny
            if rq_prev is not None and abs(rq - rq_prev) <= tol * abs(rq) and k >= 5:
                return hist[-1], abs(rq - rq_prev) / abs(rq), hist
            rq_prev = rq
        gap = abs(rq - rq_prev) / abs(rq)
        raise NonConvergence(f"power iteration gap {gap:.2e} after {iters} steps", hist)

    def coercivity(self, norms=None, iters=200):
        """``delta = min_i (alpha_i - |L_i|^2 / 4)``; raises ``CoercivityFailure`` if not positive."""
        if norms is None:
            norms = [self.operator_norm(i, iters)[0] for i in (1, 2)]
        delta = min(self.sys.alpha[i] - 0.25 * norms[i] ** 2 for i in range(2))
        if delta <= 0:
            raise CoercivityFailure(f"delta = {delta:.3e} <= 0; increase alpha", delta)
        return delta

    def rayleigh(self, v):
        return self.h_inner(self.apply_A(v), v) / self.h_inner(v, v)


# ---------------------------------------------------------------------------
# scenario-level entry points (linear data: the nonlinearity is ignored)


def problem_for(scenario) -> NashProblem:
    z0, zd, _ = scenario.reduced_data(nonlinear=False)
    return NashProblem(scenario.system(), z0, zd)


def apply_L(i, v, scenario):
    return problem_for(scenario).L(i, v)


def apply_L_star(i, g, scenario):
    return problem_for(scenario).L_star(i, g)


def operator_norm_L(i, scenario, iters=200):
    return problem_for(scenario).operator_norm(i, iters)


def check_coercivity(alpha1, alpha2, scenario, norms=None):
    return problem_for(scenario.with_alpha((alpha1, alpha2))).coercivity(norms)


def solve_nash_cg(f, scenario, tol=None, max_iter=500):
    tol = scenario.tol["nash"] if tol is None else tol
    return problem_for(scenario).solve_krylov(f, tol, max_iter)


def solve_nash_contraction(f, scenario, tol=None, max_iter=500):
    tol = scenario.tol["contraction"] if tol is None else tol
    return problem_for(scenario).solve_contraction(f, tol, max_iter)


def evaluate_costs(f, v1, v2, scenario) -> CostReport:
    return problem_for(scenario).costs(f, [v1, v2])


def stationarity_residual(i, f, v1, v2, scenario, nonlinear=False):
    if nonlinear:
        from .semilinear import semilinear_stationarity
        return semilinear_stationarity(i, f, [v1, v2], scenario)
    return problem_for(scenario).stationarity(i, f, [v1, v2])
