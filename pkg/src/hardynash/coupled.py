"""
Forward-backward coupled systems shared by the follower and leader solvers.

``CoupledSystem`` bundles the operator, the time scheme, the region masks and
the follower weights.  Two reaction fields may be frozen into it: the state
reaction (used by the state ``z`` and its adjoint ``psi``) and the follower
reaction (used by the follower adjoints ``phi^i`` and their duals
``gamma^i``).  Both are zero in the linear problem.

Optimality system (state forward, follower adjoints backward)::

    z_t + A z   = c_s z + f 1_O - sum_i phi^i 1_{O_i} / alpha_i + extra,   z(0) = z0
   -phi_t + A phi = c_f phi + (z - zd_i) 1_{O_i,d},                        phi(T) = 0

Adjoint system (terminal data psiT)::

   -psi_t + A psi = c_s psi + sum_i gamma^i 1_{O_i,d},    psi(T) = psiT
    gamma_t + A gamma = c_f gamma - psi 1_{O_i} / alpha_i, gamma(0) = 0

Both are solved by block fixed-point sweeps.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractionFailure, CouplingDivergence, MaxIterations, ShapeMismatch
from .pde import (
    Stepper,
    backward_interval,
    forward_interval,
    inner_q,
    inner_m,
)

_NOISE = 64 * np.finfo(float).eps


class CoupledSystem:
    def __init__(self, op, scheme, regions, alpha, state_reaction=None, follower_reaction=None):
        self.op = op
        self.scheme = scheme
        self.regions = regions
        self.alpha = (float(alpha[0]), float(alpha[1]))
        if min(self.alpha) <= 0:
            raise ValueError("follower weights alpha_i must be positive")
        self.mass = op.mass
        self.dt = scheme.dt
        self.theta = scheme.theta
        self.state = Stepper(op, scheme, state_reaction)
        self.follower = Stepper(op, scheme, follower_reaction)
        f = lambda m: np.asarray(m, dtype=float)
        self.chi_O = f(regions.O)
        self.chi_ctrl = (f(regions.O1), f(regions.O2))
        self.chi_obs = (f(regions.O1d), f(regions.O2d))

    # shapes and pairings -------------------------------------------------
    @property
    def n_cells(self) -> int:
        return self.mass.size

    @property
    def interval_shape(self) -> tuple:
        return (self.scheme.n_steps, self.mass.size)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.interval_shape)

    def fhat(self, levels) -> np.ndarray:
        return forward_interval(levels, self.theta)

    def bhat(self, levels) -> np.ndarray:
        return backward_interval(levels, self.theta)

    def q(self, a, b, mask=None) -> float:
        return inner_q(a, b, self.mass, self.dt, mask)

    def qnorm(self, a, mask=None) -> float:
        return float(np.sqrt(max(self.q(a, a, mask), 0.0)))

    def m(self, a, b) -> float:
        return inner_m(a, b, self.mass)

    def check_interval(self, a, name="field"):
        if a is None:
            return self.zeros()
        a = np.asarray(a, dtype=float)
        if a.shape != self.interval_shape:
            raise ShapeMismatch(f"{name} has shape {a.shape}, expected {self.interval_shape}")
        return a

    # optimality system ---------------------------------------------------
    def follower_adjoints(self, zhat, zd):
        """Backward follower adjoints for a given state (interval values)."""
        return [self.follower.backward(None, (zhat - zd[i]) * self.chi_obs[i]) for i in range(2)]

    def state_source(self, f, phis, extra=None):
        src = f * self.chi_O
        for i in range(2):
            src = src - self.bhat(phis[i]) * (self.chi_ctrl[i] / self.alpha[i])
        if extra is not None:
            src = src + extra
        return src

    def S(self, what, f, z0, zd, extra=None):
        """One sweep of the fixed-point map ``w -> z_w``; returns (z levels, phis)."""
        phis = self.follower_adjoints(what, zd)
        z = self.state.forward(z0, self.state_source(f, phis, extra))
        return z, phis

    def solve_optimality(self, f=None, z0=None, zd=None, extra=None, tol=1e-13, max_iter=500,
                         w0=None):
        """Fixed point of :meth:`S`; returns ``(z, phis, trace)``.

        Stops when the increment of the state (interval values, Q-norm) falls
        below ``tol`` times its size.  ``ContractionFailure`` is raised when the
        increment fails to shrink on three consecutive sweeps.
        """
        f = self.check_interval(f, "f")
        zd = [self.check_interval(None if zd is None else zd[i], "target") for i in range(2)]
        if w0 is None:
            w = self.fhat(self.state.forward(z0, f * self.chi_O + (0.0 if extra is None else extra)))
        else:
            w = self.check_interval(w0, "initial guess")
        trace = []
        bad = 0
        for it in range(1, max_iter + 1):
            z, phis = self.S(w, f, z0, zd, extra)
            wn = self.fhat(z)
            inc = self.qnorm(wn - w)
            size = self.qnorm(wn)
            trace.append(inc)
            w = wn
            if inc <= tol * size or inc <= _NOISE * size:
                return z, phis, trace
            if it > 1 and inc >= trace[-2]:
                bad += 1
                if bad >= 3:
                    raise ContractionFailure(
                        "fixed-point increments stopped shrinking; alpha_i may be too small", trace)
            else:
                bad = 0
        raise MaxIterations(f"optimality system not converged in {max_iter} sweeps", trace)

    # adjoint system ------------------------------------------------------
    def solve_adjoint(self, psiT, tol=1e-13, max_iter=500):
        """Block fixed point for ``(psi, gamma^1, gamma^2)``; returns ``(psi, gammas, trace)``."""
        psi = self.state.backward(psiT, None)
        p = self.bhat(psi)
        trace = []
        bad = 0
        for it in range(1, max_iter + 1):
            gammas = [self.follower.forward(None, -p * (self.chi_ctrl[i] / self.alpha[i]))
                      for i in range(2)]
            src = sum(self.fhat(gammas[i]) * self.chi_obs[i] for i in range(2))
            psi = self.state.backward(psiT, src)
            pn = self.bhat(psi)
            inc = self.qnorm(pn - p)
            size = self.qnorm(pn)
            trace.append(inc)
            p = pn
            if inc <= tol * size or inc <= _NOISE * size:
                gammas = [self.follower.forward(None, -p * (self.chi_ctrl[i] / self.alpha[i]))
                          for i in range(2)]
                return psi, gammas, trace
            if it > 1 and inc >= trace[-2]:
                bad += 1
                if bad >= 3:
                    raise CouplingDivergence(
                        "adjoint sweeps diverge; alpha_i may be too small", trace)
            else:
                bad = 0
        raise MaxIterations(f"adjoint system not converged in {max_iter} sweeps", trace)

    # duality ---------------------------------------------------------------
    def duality_terms(self, f, z0, zd, psiT, tol=1e-13):
        """Both sides of the control/observation duality identity.

        Returns ``(lhs, rhs)`` with ``lhs = <f, psi>_O`` and
        ``rhs = (z(T), psiT) - (z0, psi(0)) + sum_i <zd_i, gamma^i>_{O_i,d}``.
        """
        f = self.check_interval(f, "f")
        z, _, _ = self.solve_optimality(f, z0, zd, tol=tol)
        psi, gammas, _ = self.solve_adjoint(psiT, tol=tol)
        lhs = self.q(f, self.bhat(psi), self.chi_O)
        rhs = self.m(z[-1], psiT)
        if z0 is not None:
            rhs -= self.m(z0, psi[0])
        if zd is not None:
            for i in range(2):
                rhs += self.q(zd[i], self.fhat(gammas[i]), self.chi_obs[i])
        return lhs, rhs


def duality_residual_terms(lhs: float, rhs: float) -> float:
    return abs(lhs - rhs) / (1.0 + abs(rhs))
