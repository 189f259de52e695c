"""End-to-end acceptance checks; each prints one PASS/FAIL line in the summary."""
import math
import time

import numpy as np

from conftest import ACCEPTANCE, small_scenario
from hardynash.carleman import build_weight_set, carleman_ratio, carleman_terms
from hardynash.geometry import build_grid
from hardynash.leader import duality_residual, eps_sweep, eval_F_eps, grad_F_eps, hum_for, observability_ratio
from hardynash.nash import problem_for, solve_nash_cg, solve_nash_contraction, stationarity_residual
from hardynash.pde import TimeScheme, assemble, inner_m, solve_forward
from hardynash.semilinear import (
    Nonlinearity,
    equilibrium_probe,
    make_nonlinearity,
    semilinear_costs,
    semilinear_leader,
    semilinear_stationarity,
    semilinear_state,
    solve_quasi_nash,
)

ZERO = make_nonlinearity("zero")

def _zeros(y):
    return np.zeros_like(np.asarray(y, dtype=float))


# F = 0 but not flagged as such, so the general code path runs
GENERAL_ZERO = Nonlinearity("general-zero", 1.0, _zeros, _zeros, 0.0, 0.0, 0.0)


class Criterion:
    def __init__(self, number, title):
        self.number, self.title = number, title
        self.details = []
        self.ok = True
        self.t0 = time.perf_counter()

    def check(self, ok, detail):
        self.ok &= bool(ok)
        self.details.append(("" if ok else "!") + detail)

    def finish(self, limit_seconds=None):
        dt = time.perf_counter() - self.t0
        if limit_seconds is not None:
            self.check(dt <= limit_seconds, f"runtime {dt:.1f}s <= {limit_seconds}s")
        status = "PASS" if self.ok else "FAIL"
        line = f"{status} criterion {self.number} ({self.title}): " + "; ".join(self.details)
        ACCEPTANCE.append(line)
        print(line)
        assert self.ok, line


def test_criterion_1_duality(shared, tensor):
    c = Criterion(1, "discrete duality")
    for scn in (shared, tensor):
        s = hum_for(scn).sys
        rng = scn.rng(101)
        worst = max(duality_residual(scn, rng.standard_normal(s.interval_shape) * s.chi_O,
                                     rng.standard_normal(s.n_cells)) for _ in range(20))
        c.check(worst <= 1e-10, f"{scn.name} max {worst:.2e}")
    c.finish(60)


def _random_linear(rng, k):
    case = "shared" if k % 2 == 0 else "distinct"
    mu = float(rng.uniform(0.0, 0.24))
    a, b = sorted(rng.uniform(1.25, 1.75, 2))
    c1, c2 = rng.uniform(1.3, 1.7, 2)
    regions = {"case": case, "O": [1.2, 1.6], "O1": [1.0, 1.2], "O2": [1.6, 1.8]}
    if case == "shared":
        regions.update(O1d=[1.3, 1.7], O2d=[1.3, 1.7])
        data = {"y1d": f"ybar + 0.2*exp(-(r - {c1:.4f})**2/0.02)",
                "y2d": f"ybar + 0.2*exp(-(r - {c1:.4f})**2/0.02)"}
    else:
        regions.update(O1d=[1.25, max(a, 1.35)], O2d=[min(b, 1.5), 1.75])
        data = {"y1d": f"ybar + 0.2*exp(-(r - {c1:.4f})**2/0.02)",
                "y2d": f"ybar - 0.1*exp(-(r - {c2:.4f})**2/0.02)"}
    data["y0"] = f"{rng.uniform(0.5, 2):.4f}*mode(1) + {rng.uniform(-1, 1):.4f}*mode(2)"
    return small_scenario(regions=regions, data=data, model={"mu": mu, "alpha": [1e3, 1e3]},
                          seed=int(rng.integers(1 << 30)))


def test_criterion_2_nash_cross_validation():
    c = Criterion(2, "nash cross-validation")
    rng = np.random.default_rng(2)
    agree, stat, dense_err, dense_runs = 0.0, 0.0, 0.0, 0
    for k in range(5):
        scn = _random_linear(rng, k)
        p = problem_for(scn)
        s = p.sys
        f = scn.rng(3).standard_normal(s.interval_shape) * s.chi_O
        a = solve_nash_cg(f, scn)
        b = solve_nash_contraction(f, scn)
        for i in range(2):
            nv = s.qnorm(a.v[i], s.chi_ctrl[i])
            agree = max(agree, s.qnorm(a.v[i] - b.v[i], s.chi_ctrl[i]) / nv)
        za = s.fhat(a.z)
        agree = max(agree, s.qnorm(za - s.fhat(b.z)) / s.qnorm(za))
        for sol in (a, b):
            stat = max(stat, *(stationarity_residual(i, f, *sol.v, scn) for i in (1, 2)))
        n = sum(p._sizes)
        if n <= 512:
            A = np.column_stack([p.packed_operator().matvec(e) for e in np.eye(n)])
            x = np.linalg.solve(A, p.pack(p.rhs(f)))
            tight = p.solve_krylov(f, 1e-12)
            dense_err = max(dense_err, np.linalg.norm(p.pack(tight.v) - x) / np.linalg.norm(x))
            dense_runs += 1
    c.check(agree <= 1e-6, f"agreement {agree:.2e}")
    c.check(stat <= 1e-7, f"stationarity {stat:.2e}")
    c.check(dense_runs > 0 and dense_err <= 1e-8, f"dense {dense_err:.2e} on {dense_runs} instances")
    c.finish(300)


def test_criterion_3_coercivity_and_contraction(shared, distinct):
    c = Criterion(3, "coercivity and contraction")
    for scn in (shared, distinct):
        p = problem_for(scn)
        s = p.sys
        delta = p.coercivity()
        rng = scn.rng(303)
        worst = min(p.rayleigh([rng.standard_normal(s.interval_shape) * s.chi_ctrl[i] for i in range(2)])
                    for _ in range(50))
        c.check(delta > 0 and worst >= 0.99 * delta, f"{scn.name} rayleigh/delta {worst / delta:.4f}")
        cs = []
        for a in (1e2, 1e3, 1e4):
            fac = problem_for(scn.with_alpha((a, a))).contraction_factor(seed=11)
            cs.append(fac / (2.0 / a))
        med = float(np.median(cs))
        spread = max(abs(x / med - 1) for x in cs)
        c.check(spread <= 0.2, f"{scn.name} C {med:.3e} spread {spread:.1%}")
    c.finish()


def test_criterion_4_gradient(shared):
    c = Criterion(4, "leader gradient")
    h = hum_for(shared)
    rng = shared.rng(404)
    n = shared.grid.n_cells
    for penalty in ("quadratic", "exact"):
        worst = 0.0
        for _ in range(10):
            x = rng.standard_normal(n)
            x *= 1e-3 / h.norm(x)  # comparable to the minimizer, away from 0
            d = rng.standard_normal(n) * 1e-3 / math.sqrt(n)
            g = h.sys.m(grad_F_eps(x, 1e-2, shared, penalty), d)
            step = 1e-3
            fd = (eval_F_eps(x + step * d, 1e-2, shared, penalty)
                  - eval_F_eps(x - step * d, 1e-2, shared, penalty)) / (2 * step)
            worst = max(worst, abs(g - fd) / abs(fd))
        c.check(worst <= 1e-5, f"{penalty} {worst:.1e}")
    c.finish()


def test_criterion_5_approximate_null_control(shared):
    c = Criterion(5, "approximate null control")
    eps = [1e-1, 1e-2, 1e-3, 1e-4]
    res = eps_sweep(shared, eps, "exact")
    tn = [r.terminal_norm for r in res]
    c.check(all(b <= a for a, b in zip(tn, tn[1:])), "nonincreasing " + ",".join(f"{x:.1e}" for x in tn))
    c.check(all(r.terminal_norm <= r.eps * (1 + 1e-6) for r in res), "within eps")
    J3, J4 = res[-2].cost, res[-1].cost
    rel = abs(J4 - J3) / J3
    c.check(rel <= 0.1, f"J {J3:.4g} -> {J4:.4g} ({rel:.1%})")
    c.finish(600)


def test_criterion_6_observability(shared, distinct):
    c = Criterion(6, "observability ratio")
    for scn in (shared, distinct):
        a = observability_ratio(scn, 100)
        b = observability_ratio(scn, 200)
        finite = math.isfinite(a.max_ratio) and math.isfinite(b.max_ratio) and a.flagged == b.flagged == 0
        change = abs(b.max_ratio - a.max_ratio) / a.max_ratio
        c.check(finite and change < 0.5, f"{scn.name} {a.max_ratio:.3g}->{b.max_ratio:.3g} ({change:.0%})")
    c.finish()


def test_criterion_7_carleman(shared, distinct, tensor, rng):
    c = Criterion(7, "carleman ratio")
    for scn in (shared, distinct, tensor):
        a = carleman_ratio(scn, n_samples=100)
        b = carleman_ratio(scn, n_samples=200)
        finite = bool(np.all(np.isfinite(b.ratios)))
        change = abs(b.max_ratio - a.max_ratio) / a.max_ratio
        c.check(finite and change < 0.5, f"{scn.name} {a.max_ratio:.4g}->{b.max_ratio:.4g}")
    crit = small_scenario(model={"mu": 0.25})
    w = build_weight_set(crit)
    u = rng.standard_normal((crit.scheme.n_steps, crit.grid.n_cells))
    lhs, _ = carleman_terms(u, u, w, crit.grid, 0.25, crit.op.mass, crit.scheme.dt)
    c.check(lhs["hardy"] == 0.0, f"hardy term at mu=0.25 is {lhs['hardy']}")
    c.finish()


def test_criterion_8_semilinear(shared, semi):
    c = Criterion(8, "semilinear")
    # F = 0 against the linear modules, flagged and through the general path
    f = shared.leader_values()
    p = problem_for(shared)
    sol = p.solve_contraction(f, 1e-13)
    yb = shared.trajectory(nonlinear=False)
    ref = hum_for(shared).minimize_exact(1e-2)
    err = 0.0
    for zero in (ZERO, GENERAL_ZERO):
        st = solve_quasi_nash(f, shared, zero, tol=1e-13)
        err = max(err, np.abs(st.y - (yb + sol.z)).max() / np.abs(st.y).max())
        err = max(err, *(np.abs(st.v[i] - sol.v[i]).max() / np.abs(sol.v[i]).max() for i in range(2)))
        y = semilinear_state(f, st.v, shared, zero)
        err = max(err, np.abs(y - st.y).max() / np.abs(y).max())
        J, Jl = semilinear_costs(f, st.v, shared, zero), p.costs(f, sol.v).J
        err = max(err, *(abs(a - b) / abs(b) for a, b in zip(J, Jl)))
        err = max(err, *(abs(semilinear_stationarity(i, f, st.v, shared, zero) - p.stationarity(i, f, sol.v))
                         for i in (1, 2)))
        lead = semilinear_leader(shared, zero, eps=1e-2)
        err = max(err, np.abs(lead.leader.f - ref.f).max() / np.abs(ref.f).max())
        err = max(err, abs(lead.terminal_norm - ref.terminal_norm) / ref.terminal_norm)
        probe = equilibrium_probe(st, f, shared, n_dirs=2, nl=zero)
        err = max(err, abs(probe.slope - 2.0) if not probe.counterexample else 1.0)
    c.check(err <= 1e-8, f"F=0 reduction {err:.1e}")

    # tanh, kappa 0.5, alpha 1e3
    assert semi.nonlinearity.name == "tanh" and semi.nonlinearity.kappa == 0.5 and semi.alpha == (1e3, 1e3)
    fs = semi.leader_values()
    qs = solve_quasi_nash(fs, semi, tol=1e-12)
    tr = qs.trace
    c.check(all(b < a for a, b in zip(tr[1:], tr[2:])), f"quasi-nash {len(tr)} iterations, last {tr[-1]:.1e}")
    probe = equilibrium_probe(qs, fs, semi)
    c.check(probe.min_difference >= -1e-8 * probe.scale and abs(probe.slope - 2) <= 0.3,
            f"probe min {probe.min_difference:.1e} slope {probe.slope:.3f}")
    for eps in semi.eps:
        r = semilinear_leader(semi, eps=eps)
        r2 = semilinear_leader(semi, eps=eps, tol=semi.tol["outer"] / 2, leader_tol=semi.tol["leader"] / 2)
        m1, m2 = max(r.control_norms), max(r2.control_norms)
        c.check(r.converged and r.terminal_norm <= 2 * eps, f"eps {eps:g} |z(T)| {r.terminal_norm:.3e}")
        c.check(abs(m2 - m1) <= 0.2 * m1, f"max |f_z| {m1:.4g} vs {m2:.4g}")
    c.finish(1200)


def test_criterion_9_physics():
    c = Criterion(9, "solver physics")
    R = 2.0
    g = build_grid("radial3d", 128, R)
    op = assemble(g, 0.0)
    u0 = np.sin(math.pi * g.radius / R) / g.radius
    y = solve_forward(op, TimeScheme(0.5, 100, 0.5), u0)
    exact = math.exp(-(math.pi / R) ** 2 * 0.5) * u0
    err = math.sqrt(inner_m(y[-1] - exact, y[-1] - exact, op.mass) / inner_m(exact, exact, op.mass))
    c.check(err <= 1e-2, f"eigenmode decay {err:.1e}")

    def manufactured(n, steps):
        L = 1.5
        tg = build_grid("tensor", n, L, 2)
        top = assemble(tg, 0.0)
        k = math.pi / (2 * L)
        x, yy = tg.centers[:, 0], tg.centers[:, 1]
        shape = np.cos(k * x) * np.cos(k * yy) * (1 + x / 3)
        lap = (-2 * k * k * (1 + x / 3) - 2 * k / 3 * np.tan(k * x)) * np.cos(k * x) * np.cos(k * yy)
        sch = TimeScheme(0.5, steps, 0.5)
        src = np.exp(-sch.forward_times[:, None]) * (-shape - lap)
        u = solve_forward(top, sch, shape, src)
        d = u[-1] - math.exp(-0.5) * shape
        return math.sqrt(inner_m(d, d, top.mass))

    errs = [manufactured(n, n // 2) for n in (16, 32, 64)]
    rate = math.log2(errs[-2] / errs[-1])
    c.check(abs(rate - 2) <= 0.3, f"manufactured rate {rate:.2f}")
    lam = min(assemble(build_grid("radial3d", 128, 2.0), mu).smallest_eigenvalue()
              for mu in (0.0, 0.1, 0.2, 0.24))
    c.check(lam >= -1e-8, f"lambda_min {lam:.3e}")
    c.finish()
