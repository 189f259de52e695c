"""
Leader control by penalized duality.

For terminal adjoint data ``psiT`` the coupled adjoint system gives
``(psi, gamma^1, gamma^2)`` and

    F(psiT) = 1/2 |psi|^2_{O x (0,T)} + eps P(psiT) + (z0, psi(0)) - sum_i <zd_i, gamma^i>_{O_i,d}

with ``P = |psiT|`` (exact norm) or ``|psiT|^2 / 2`` (quadratic).  By the
discrete duality identity the smooth part is ``1/2 (H psiT, psiT) + (b, psiT)``
where ``H psiT`` is the terminal state for the leader ``psi 1_O`` and zero
data, and ``b`` the terminal state for zero leader and the actual data.
Its gradient is therefore the terminal state ``z(T)`` for ``f = psi 1_O``.
All spatial pairings use the mass matrix.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import MaxIterations, ObservabilityTooWeak, ZeroPointNondifferentiable

log = logging.getLogger(__name__)

ZERO_CUTOFF = 1e-10


@dataclass
class AdjointTriple:
    psi: np.ndarray
    gammas: list
    psiT: np.ndarray


@dataclass
class LeaderResult:
    f: np.ndarray
    eps: float
    terminal_norm: float
    cost: float
    psiT: np.ndarray
    z: np.ndarray
    phis: list
    penalty: str
    branch: str
    iterations: int
    trace: list = field(default_factory=list)


class HumProblem:
    def __init__(self, system, z0=None, zd=None, coupling_tol=1e-13):
        self.sys = system
        n = system.n_cells
        self.z0 = np.zeros(n) if z0 is None else np.asarray(z0, dtype=float)
        self.zd = [system.check_interval(None if zd is None else zd[i]) for i in range(2)]
        self.ctol = coupling_tol
        self._b = None
        self._space = None  # (Q, W) Krylov workspace for the exact-norm path

    def norm(self, x):
        return math.sqrt(max(self.sys.m(x, x), 0.0))

    def adjoint(self, psiT) -> AdjointTriple:
        psi, gammas, _ = self.sys.solve_adjoint(psiT, tol=self.ctol)
        return AdjointTriple(psi, gammas, np.asarray(psiT, dtype=float))

    def control(self, psi):
        return self.sys.bhat(psi) * self.sys.chi_O

    def terminal(self, f, with_data=True):
        z0, zd = (self.z0, self.zd) if with_data else (None, None)
        z, phis, _ = self.sys.solve_optimality(f, z0, zd, tol=self.ctol)
        return z, phis

    @property
    def b(self):
        if self._b is None:
            self._b = self.terminal(None)[0][-1]
        return self._b

    def apply_H(self, psiT):
        return self.terminal(self.control(self.adjoint(psiT).psi), with_data=False)[0][-1]

    # functional ------------------------------------------------------------
    def penalty(self, psiT, kind):
        nrm = self.norm(psiT)
        return nrm if kind == "exact" else 0.5 * nrm * nrm

    def F(self, psiT, eps, kind="quadratic"):
        s = self.sys
        adj = self.adjoint(psiT)
        ph = s.bhat(adj.psi)
        val = 0.5 * s.q(ph, ph, s.chi_O) + eps * self.penalty(psiT, kind) + s.m(self.z0, adj.psi[0])
        for i in range(2):
            val -= s.q(self.zd[i], s.fhat(adj.gammas[i]), s.chi_obs[i])
        return val

    def grad(self, psiT, eps, kind="quadratic"):
        psiT = np.asarray(psiT, dtype=float)
        nrm = self.norm(psiT)
        if kind == "exact" and nrm == 0.0:
            raise ZeroPointNondifferentiable("the exact-norm penalty is not differentiable at 0")
        z, _ = self.terminal(self.control(self.adjoint(psiT).psi))
        d = psiT / nrm if kind == "exact" else psiT
        return z[-1] + eps * d

    def result(self, psiT, eps, kind, branch, iterations, trace) -> LeaderResult:
        psiT = np.asarray(psiT, dtype=float)
        f = self.control(self.adjoint(psiT).psi) if np.any(psiT) else self.sys.zeros()
        z, phis = self.terminal(f)
        return LeaderResult(f, eps, self.norm(z[-1]), 0.5 * self.sys.q(f, f, self.sys.chi_O),
                            psiT, z, phis, kind, branch, iterations, trace)

    # quadratic penalty: CG on (H + eps) psi = -b ---------------------------
    def minimize_quadratic(self, eps, tol=1e-10, max_iter=None, x0=None) -> LeaderResult:
        n = self.sys.n_cells
        max_iter = max_iter or 4 * n + 20
        b = self.b
        bn = self.norm(b)
        if bn == 0.0:
            return self.result(np.zeros(n), eps, "quadratic", "zero", 0, [])
        x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
        r = -b - (self.apply_H(x) + eps * x) if x0 is not None else -b.copy()
        p = r.copy()
        rr = self.sys.m(r, r)
        trace = [math.sqrt(rr) / bn]
        stall = 0
        for it in range(1, max_iter + 1):
            if trace[-1] <= tol:
                break
            Ap = self.apply_H(p) + eps * p
            pAp = self.sys.m(p, Ap)
            a = rr / pAp
            x += a * p
            r -= a * Ap
            rr_new = self.sys.m(r, r)
            decrease = 0.5 * a * rr  # exact decrease of the quadratic along the step
            trace.append(math.sqrt(rr_new) / bn)
            stall = stall + 1 if decrease < 1e-14 * bn * bn else 0
            if stall >= 5:
                raise ObservabilityTooWeak("CG stagnates: gradient stays large while F barely decreases",
                                           trace)
            p = r + (rr_new / rr) * p
            rr = rr_new
        else:
            if trace[-1] > tol:
                raise MaxIterations(f"leader CG residual {trace[-1]:.2e} after {max_iter} steps", trace)
        branch = "zero" if self.norm(x) <= ZERO_CUTOFF else "stationary"
        return self.result(x, eps, "quadratic", branch, len(trace) - 1, trace)

    # exact-norm penalty: secular equation on a growing subspace ------------
    def minimize_exact(self, eps, tol=1e-10, max_iter=None) -> LeaderResult:
        """Minimizer of the exact-norm functional.

        If ``|b| <= eps`` the minimizer is 0.  Otherwise it solves
        ``(H + lam) psi = -b`` with ``lam |psi| = eps``; then
        ``z(T) = H psi + b = -lam psi`` has norm ``eps``.  The system is solved
        by Rayleigh-Ritz on a residual-driven subspace that is kept between
        calls, so an eps-sweep reuses the images already computed.
        """
        n = self.sys.n_cells
        max_iter = max_iter or n + 10
        b = self.b
        bn = self.norm(b)
        if bn <= eps:
            return self.result(np.zeros(n), eps, "exact", "zero", 0, [bn])
        m = self.sys.m
        if self._space is None:
            q = b / bn
            self._space = ([q], [self.apply_H(q)])
        Q, W = self._space
        trace = []
        for it in range(max_iter + 1):
            Qm = np.array(Q)
            Wm = np.array(W)
            Tm = (Qm * self.sys.mass) @ Wm.T
            Tm = 0.5 * (Tm + Tm.T)
            lam_T, U = np.linalg.eigh(Tm)
            lam_T = np.maximum(lam_T, 0.0)
            c = U.T @ ((Qm * self.sys.mass) @ (-b))
            lam = _secular(lam_T, c, eps)
            y = U @ (c / (lam_T + lam))
            psi = y @ Qm
            zT = y @ Wm + b
            res = zT + lam * psi
            rn = self.norm(res)
            trace.append(rn / bn)
            if rn <= tol * eps or len(Q) >= n:
                break
            # extend with the residual, reorthogonalized twice
            v = res.copy()
            for _ in range(2):
                for qk in Q:
                    v -= m(qk, v) * qk
            vn = self.norm(v)
            if vn <= 1e-14 * rn:
                break
            v /= vn
            Q.append(v)
            W.append(self.apply_H(v))
        else:
            raise MaxIterations(f"exact-norm leader not converged in {max_iter} steps", trace)
        branch = "zero" if self.norm(psi) <= ZERO_CUTOFF else "stationary"
        return self.result(psi, eps, "exact", branch, len(Q), trace)

    def minimize(self, eps, penalty="quadratic", tol=1e-10, max_iter=None):
        if penalty == "exact":
            return self.minimize_exact(eps, tol, max_iter)
        if penalty == "quadratic":
            return self.minimize_quadratic(eps, tol, max_iter)
        raise ValueError(f"unknown penalty {penalty!r}")


def _secular(lam_T, c, eps):
    """Root of ``lam |(T + lam)^{-1} c| = eps`` in ``log lam``."""
    def g(loglam):
        lam = math.exp(loglam)
        return lam * float(np.linalg.norm(c / (lam_T + lam))) - eps

    lo, hi = 0.0, 0.0
    while g(hi) < 0:
        hi += 2.0
        if hi > 700:
            raise ValueError("secular equation has no root (|b| <= eps?)")
    while g(lo) > 0:
        lo -= 2.0
        if lo < -690:
            # data along (numerically) unobservable directions exceeds eps
            raise ObservabilityTooWeak("F_eps is unbounded below: no admissible multiplier", [])
    return math.exp(brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=400))


# ---------------------------------------------------------------------------
# scenario-level entry points (linear data)


def hum_for(scenario) -> HumProblem:
    z0, zd, _ = scenario.reduced_data(nonlinear=False)
    return HumProblem(scenario.system(), z0, zd, scenario.tol["coupling"])


def solve_adjoint_coupled(psiT, scenario) -> AdjointTriple:
    return hum_for(scenario).adjoint(psiT)


def eval_F_eps(psiT, eps, scenario, penalty="quadratic"):
    return hum_for(scenario).F(psiT, eps, penalty)


def grad_F_eps(psiT, eps, scenario, penalty="quadratic"):
    return hum_for(scenario).grad(psiT, eps, penalty)


def minimize_leader(scenario, eps, tol=None, max_iter=None, penalty=None) -> LeaderResult:
    tol = scenario.tol["leader"] if tol is None else tol
    return hum_for(scenario).minimize(eps, penalty or scenario.penalty, tol, max_iter)


def eps_sweep(scenario, eps_list=None, penalty=None, tol=None):
    """Leader results for each eps, sharing one workspace."""
    hum = hum_for(scenario)
    tol = scenario.tol["leader"] if tol is None else tol
    return [hum.minimize(e, penalty or scenario.penalty, tol) for e in (eps_list or scenario.eps)]


def duality_residual(scenario, f, psiT):
    """Relative mismatch of the control/observation duality identity (linear data)."""
    from .coupled import duality_residual_terms

    z0, zd, _ = scenario.reduced_data(nonlinear=False)
    lhs, rhs = scenario.system().duality_terms(f, z0, zd, psiT, scenario.tol["coupling"])
    return duality_residual_terms(lhs, rhs)


@dataclass
class ObservabilityReport:
    ratios: np.ndarray
    max_ratio: float
    flagged: int


def observability_ratio(scenario, n_samples=100, weights=None, seed=None) -> ObservabilityReport:
    """Empirical constant in the weighted observability inequality.

    ``ratio = (|psi(0)|^2 + gamma term) / |psi|^2_{O x (0,T)}`` for white-noise
    unit ``psiT``.  The gamma term is ``rho^{-2} |gamma^1 + gamma^2|^2`` over
    ``O_d`` in the shared case and ``sum_i rho^{-2} |gamma^i|^2`` over ``O_i,d``
    otherwise.  A sample with vanishing denominator is recorded as ``inf``.
    """
    from .carleman import build_weight_set

    if weights is None:
        weights = build_weight_set(scenario)
    rng = scenario.rng(3) if seed is None else np.random.default_rng(seed)
    hum = hum_for(scenario)
    s = hum.sys
    w = weights.rho_inv2
    out = np.empty(n_samples)
    flagged = 0
    for k in range(n_samples):
        x = rng.standard_normal(s.n_cells)
        x /= hum.norm(x)
        adj = hum.adjoint(x)
        ph = s.bhat(adj.psi)
        den = s.q(ph, ph, s.chi_O)
        g = [s.fhat(gm) for gm in adj.gammas]
        if scenario.case_flag == "shared":
            gs = g[0] + g[1]
            gterm = s.q(w * gs, gs, s.chi_obs[0])
        else:
            gterm = sum(s.q(w * g[i], g[i], s.chi_obs[i]) for i in range(2))
        num = s.m(adj.psi[0], adj.psi[0]) + gterm
        if den <= 0.0:
            out[k] = math.inf
            flagged += 1
        else:
            out[k] = num / den
    return ObservabilityReport(out, float(np.max(out)), flagged)
