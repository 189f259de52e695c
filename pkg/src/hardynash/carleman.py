"""
Carleman weight family and the diagnostics built on it.

The weight function ``Psi`` is a profile of a radius-like coordinate ``c``:
``c = |x|`` in radial mode, and in tensor mode ``c = |x|`` inside the unit
ball and ``c = 1 + (|x| - 1)(L - 1)/(b(x) - 1)`` outside, where ``b(x)`` is
the distance from the origin to the box boundary along the ray through
``x``.  The profile is ``ln c`` on ``(0, 1]``, increases through cubic
Hermite pieces to a single maximum inside the chosen set and then decreases
linearly to zero at the boundary.

Time-singular quantities are evaluated at interval midpoints only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import CriticalPointLeak, DegenerateRHS, LambdaEscalationFailure
from .geometry import hardy_constant
from .pde import Stepper, backward_interval, inner_q

LOG_FLOOR = math.log(1e-300)


# ---------------------------------------------------------------------------
# sets


def erode(grid, mask) -> np.ndarray:
    """Cells of ``mask`` whose face neighbours all lie in ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if grid.mode == "radial3d":
        out = mask.copy()
        out[1:] &= mask[:-1]
        out[:-1] &= mask[1:]
        out[-1] = False
        return out
    m = mask.reshape(grid.shape)
    out = m.copy()
    for ax in range(m.ndim):
        pad = np.pad(m, [(1, 1) if k == ax else (0, 0) for k in range(m.ndim)])
        n = m.shape[ax]
        out &= np.take(pad, np.arange(0, n), axis=ax)
        out &= np.take(pad, np.arange(2, n + 2), axis=ax)
    return out.ravel()


def shrink(grid, mask) -> np.ndarray:
    """One-cell erosion, or ``mask`` itself when erosion would empty it."""
    e = erode(grid, mask)
    return e if e.any() else np.asarray(mask, dtype=bool).copy()


def default_sets(grid, regions):
    """``omega0`` (shared case) or ``(O_tilde, omega_1, omega_2)`` (distinct case)."""
    if regions.case_flag == "shared":
        return shrink(grid, regions.O & regions.O1d)
    Ot = shrink(grid, regions.O)
    omegas = []
    for i in (1, 2):
        own = Ot & regions.target(i) & ~regions.target(3 - i)
        cand = erode(grid, own)
        if not cand.any():
            cand = shrink(grid, Ot & regions.target(i)) if (Ot & regions.target(i)).any() else own
        omegas.append(cand)
    return Ot, omegas[0], omegas[1]


def ray_coordinate(grid) -> np.ndarray:
    r = grid.radius
    if grid.mode == "radial3d":
        return r.copy()
    L = grid.extent
    sup = np.abs(grid.centers).max(axis=1)
    b = L * r / sup
    c = r.copy()
    out = r > 1.0
    c[out] = 1.0 + (r[out] - 1.0) * (L - 1.0) / (b[out] - 1.0)
    return c


def _gap(c, mask, top):
    """Widest-coverage open interval ``(a, b)`` free of non-``mask`` cells (with c > 1)."""
    outside = np.unique(np.concatenate([[1.0, top], c[(~mask) & (c > 1.0)]]))
    inside = c[mask]
    best, count = None, 0
    for lo, hi in zip(outside[:-1], outside[1:]):
        k = int(np.sum((inside > lo) & (inside < hi)))
        if k > count:
            best, count = (float(lo), float(hi)), k
    if best is None:
        raise CriticalPointLeak("the chosen set contains no full level set of the ray coordinate")
    if best[1] >= top:
        raise CriticalPointLeak("the chosen set reaches the boundary")
    return best


# ---------------------------------------------------------------------------
# profile


def _hermite(x, x0, x1, y0, y1, m0, m1):
    hlen = x1 - x0
    t = (x - x0) / hlen
    t2, t3 = t * t, t * t * t
    return ((2 * t3 - 3 * t2 + 1) * y0 + (t3 - 2 * t2 + t) * hlen * m0
            + (-2 * t3 + 3 * t2) * y1 + (t3 - t2) * hlen * m1)


@dataclass(frozen=True)
class Profile:
    a: float
    b: float
    peaks: tuple
    R: float
    P_a: float
    M: float
    P_b: float

    @classmethod
    def build(cls, a, b, peaks, R):
        P_a = 0.5 * (a - 1.0)
        M = P_a + 0.4 * max(p - a for p in peaks)
        D = max(b - p for p in peaks)
        P_b = M * (R - b) / ((R - b) + D)
        return cls(a, b, tuple(peaks), R, P_a, M, P_b)

    def __call__(self, c, peak=0):
        c = np.asarray(c, dtype=float)
        a, b, R, rm = self.a, self.b, self.R, self.peaks[peak]
        s_b = -self.P_b / (R - b)
        out = np.empty_like(c)
        k0 = c <= 1.0
        k1 = (c > 1.0) & (c <= a)
        k2 = (c > a) & (c <= rm)
        k3 = (c > rm) & (c <= b)
        k4 = c > b
        out[k0] = np.log(c[k0])
        out[k1] = _hermite(c[k1], 1.0, a, 0.0, self.P_a, 1.0, 0.5)
        out[k2] = _hermite(c[k2], a, rm, self.P_a, self.M, 0.5, 0.0)
        out[k3] = _hermite(c[k3], rm, b, self.M, self.P_b, 0.0, s_b)
        out[k4] = self.P_b + s_b * (c[k4] - b)
        return out


@dataclass
class PsiField:
    values: list          # one array (single) or two (pair)
    sup: float
    profile: Profile
    sets: list            # omega masks, one per Psi
    grad_lower: list      # min |grad Psi| outside the matching omega


def build_psi(grid, omega0, variant="single", O_tilde=None, omegas=None, leak_ratio=1e-3) -> PsiField:
    """Weight function on the grid.

    ``variant="single"``: one maximum inside ``omega0``.
    ``variant="pair"``: two functions sharing every piece outside ``O_tilde``
    with maxima inside ``omegas[0]`` and ``omegas[1]`` and equal suprema.
    """
    c = ray_coordinate(grid)
    top = grid.extent
    if variant == "single":
        a, b = _gap(c, np.asarray(omega0, bool), top)
        sets = [np.asarray(omega0, bool)]
        peaks = [0.5 * (a + b)]
    elif variant == "pair":
        a, b = _gap(c, np.asarray(O_tilde, bool), top)
        sets = [np.asarray(w, bool) for w in omegas]
        peaks = []
        for w in sets:
            lo, hi = _gap(c, w & np.asarray(O_tilde, bool), top)
            lo, hi = max(lo, a), min(hi, b)
            if not lo < hi:
                raise CriticalPointLeak("omega_i has no level set inside O_tilde")
            peaks.append(0.5 * (lo + hi))
    else:
        raise ValueError(f"unknown variant {variant!r}")
    prof = Profile.build(a, b, peaks, top)
    values, lower = [], []
    for k, w in enumerate(sets):
        psi = prof(c, k)
        g = grid.gradient_norm(psi)
        outside = ~w
        gmin = float(g[outside].min()) if outside.any() else math.inf
        if gmin < leak_ratio * float(g.max()):
            raise CriticalPointLeak(
                f"|grad Psi| = {gmin:.2e} outside the chosen set (max {float(g.max()):.2e})")
        values.append(psi)
        lower.append(gmin)
    return PsiField(values, prof.M, prof, sets, lower)


# ---------------------------------------------------------------------------
# weights


@dataclass
class CarlemanWeightSet:
    s: float
    lam: float
    psi: PsiField
    Phi: list
    theta: np.ndarray          # (N_t,)
    sigma: list                # per Psi, (N_t, n)
    log_rho_inv2: np.ndarray   # (N_t, n)
    case_flag: str
    T: float
    midpoints: np.ndarray
    doublings: int = 0

    @property
    def rho_inv2(self) -> np.ndarray:
        return np.exp(np.maximum(self.log_rho_inv2, LOG_FLOOR))


def theta_weight(t, T):
    t = np.asarray(t, dtype=float)
    return 1.0 / (t ** 3 * (T - t) ** 3)


def build_weights(psi: PsiField, grid, s, lam, T, midpoints, case_flag="shared",
                  max_doublings=20) -> CarlemanWeightSet:
    """``sigma = s theta (e^{2 lam sup Psi} - |x|^2/2 - e^{lam Psi})``.

    ``lam`` is doubled until ``sigma`` is positive and its spatial minimum
    lies in the observation set.
    """
    if s <= 0 or lam <= 0:
        raise ValueError("s and lambda must be positive")
    half_x2 = 0.5 * grid.radius ** 2
    doublings = 0
    while True:
        spatial = [math.exp(2 * lam * psi.sup) - half_x2 - np.exp(lam * p) for p in psi.values]
        # lam must also be large enough for the weight to bottom out inside omega
        inside = all(om[np.argmin(sp)] for sp, om in zip(spatial, psi.sets))
        if inside and all(np.all(sp > 0) for sp in spatial):
            break
        if doublings >= max_doublings:
            raise LambdaEscalationFailure(f"sigma not positive after {max_doublings} doublings")
        lam *= 2.0
        doublings += 1
    mids = np.asarray(midpoints, dtype=float)
    th = theta_weight(mids, T)
    sigma = [s * th[:, None] * sp[None, :] for sp in spatial]
    smax = sigma[0] if len(sigma) == 1 else np.maximum(sigma[0], sigma[1])
    log_rho_inv2 = np.log(th)[:, None] - 2.0 * smax
    Phi = [np.exp(lam * p) for p in psi.values]
    return CarlemanWeightSet(s, lam, psi, Phi, th, sigma, log_rho_inv2, case_flag, T, mids, doublings)


def build_weight_set(scenario, s=None, lam=None, variant=None) -> CarlemanWeightSet:
    """Default weights for a scenario (case-dependent sets, midpoint times)."""
    grid, regions = scenario.grid, scenario.regions
    s = scenario.weights.get("s", 1.0) if s is None else s
    lam = scenario.weights.get("lambda", 1.0) if lam is None else lam
    variant = variant or ("single" if regions.case_flag == "shared" else "pair")
    if variant == "single":
        if regions.case_flag == "shared":
            w0 = default_sets(grid, regions)
        else:
            w0 = shrink(grid, regions.O & regions.O1d)
        psi = build_psi(grid, w0)
    else:
        Ot, w1, w2 = default_sets(grid, regions)
        psi = build_psi(grid, None, "pair", Ot, [w1, w2])
    flag = "shared" if variant == "single" else "distinct"
    return build_weights(psi, grid, s, lam, scenario.T, scenario.scheme.midpoints, flag)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class CarlemanReport:
    ratios: np.ndarray
    max_ratio: float
    terms: dict = field(default_factory=dict)  # LHS/RHS pieces of the worst sample


def carleman_terms(u_hat, g, weights: CarlemanWeightSet, grid, mu, mass, dt):
    """The five left-hand and two right-hand terms for one solution (shifted weights)."""
    s, lam = weights.s, weights.lam
    sig = weights.sigma[0]
    w = np.exp(np.maximum(-2.0 * (sig - sig.min()), LOG_FLOOR))
    th = weights.theta[:, None]
    Phi = weights.Phi[0][None, :]
    r = grid.radius[None, :]
    outer = (grid.radius > 1.0).astype(float)
    omega = weights.psi.sets[0].astype(float)
    grad2 = grid.gradient_norm(u_hat) ** 2
    u2 = u_hat * u_hat
    Q = lambda a, mask=None: inner_q(a, np.ones_like(a), mass, dt, mask)
    mu_star = hardy_constant(grid.dimension)
    lhs = {
        "x2": s ** 3 * Q(th ** 3 * w * r * r * u2),
        "outer": s ** 3 * lam ** 4 * Q(th ** 3 * Phi ** 3 * w * u2, outer),
        "inv_r": s * Q(th * w * u2 / r),
        "hardy": s * (mu_star - mu) * Q(th * w * u2 / (r * r)),
        "grad": s * lam ** 2 * Q(th * Phi * w * grad2, outer),
    }
    rhs = {
        "source": Q(w * g * g),
        "omega0": s ** 3 * lam ** 4 * Q(th ** 3 * Phi ** 3 * w * u2, omega),
    }
    return lhs, rhs


def carleman_ratio(scenario, weights: CarlemanWeightSet | None = None, n_samples=100,
                   seed=None) -> CarlemanReport:
    """LHS/RHS of the weighted Carleman inequality for random ``(u0, g)`` pairs."""
    if weights is None:
        weights = build_weight_set(scenario, variant="single")
    rng = scenario.rng(5) if seed is None else np.random.default_rng(seed)
    op, scheme, grid = scenario.op, scenario.scheme, scenario.grid
    st = Stepper(op, scheme)
    mass, dt = op.mass, scheme.dt
    out = np.empty(n_samples)
    worst = {}
    for k in range(n_samples):
        u0 = rng.standard_normal(grid.n_cells)
        u0 /= math.sqrt(np.dot(u0 * mass, u0))
        g = rng.standard_normal((scheme.n_steps, grid.n_cells))
        g /= math.sqrt(inner_q(g, g, mass, dt))
        u_hat = backward_interval(st.backward(u0, g), scheme.theta)
        lhs, rhs = carleman_terms(u_hat, g, weights, grid, scenario.mu, mass, dt)
        R = sum(rhs.values())
        if R < 1e-30:
            raise DegenerateRHS(f"right-hand side {R:.2e} vanishes")
        out[k] = sum(lhs.values()) / R
        if out[k] >= np.max(out[:k + 1]):
            worst = {**{"lhs_" + a: v for a, v in lhs.items()}, **{"rhs_" + a: v for a, v in rhs.items()}}
    return CarlemanReport(out, float(out.max()), worst)


@dataclass
class AdmissibilityReport:
    value: float
    log10: float
    warn: bool
    growth_log10: float


def target_admissibility(ybar_hat, y_d, weights: CarlemanWeightSet, mask, mass, dt) -> AdmissibilityReport:
    """``sum rho^2 |ybar - y_d|^2`` over ``mask x (0,T)``, computed in log space.

    ``warn`` is set when the spatial integrand at the last midpoint exceeds the
    mid-interval one by more than 10^6.
    """
    diff2 = (np.asarray(ybar_hat) - np.asarray(y_d)) ** 2 * np.asarray(mask, dtype=float)[None, :]
    with np.errstate(divide="ignore"):
        logd = np.log(diff2) + np.log(mass * dt)[None, :]
    log_int = -weights.log_rho_inv2 + logd  # rho^2 = 1 / rho^{-2}
    per_t = logsumexp(log_int, axis=1)
    total = float(logsumexp(per_t)) if np.isfinite(per_t).any() else -math.inf
    value = math.exp(total) if total < 709 else math.inf
    mid = per_t[len(per_t) // 2]
    last = per_t[-1]
    if not np.isfinite(last):
        growth = -math.inf
    elif not np.isfinite(mid):
        growth = math.inf
    else:
        growth = float(last - mid) / math.log(10)
    return AdmissibilityReport(value if total > -math.inf else 0.0,
                               total / math.log(10) if total > -math.inf else -math.inf,
                               bool(growth > 6.0), growth)
