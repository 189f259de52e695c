"""Command-line entry point ``hhctl``."""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import HardyNashError, ParseError, ValidationError
from .pde import Field, write_field_binary
from .scenario import bundled_scenario_path, load_scenario

log = logging.getLogger("hhctl")


class Run:
    """Output directory bookkeeping: files, timings and invariant results."""

    def __init__(self, out: Path, scenario, args):
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.scn = scenario
        self.args = args
        self.files = []
        self.timings = {}
        self.checks = []

    def timed(self, name):
        run = self

        class _T:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = run.timings.get(name, 0.0) + time.perf_counter() - self.t

        return _T()

    def check(self, name, ok, detail=""):
        ok = bool(ok)
        self.checks.append({"invariant": name, "pass": ok, "detail": str(detail)})
        log.info("%s %s %s", "PASS" if ok else "FAIL", name, detail)
        return ok

    def csv(self, name, header, rows):
        path = self.out / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.files.append(name)

    def field(self, name, values, kind):
        write_field_binary(Field(values, kind, self.scn.T), self.out / name)
        self.files.append(name)

    def manifest(self, command):
        data = {
            "tool": "hhctl",
            "version": __version__,
            "command": command,
            "scenario": self.scn.name,
            "scenario_hash": self.scn.config_hash,
            "seed": self.scn.seed,
            "timings_seconds": {k: round(v, 6) for k, v in self.timings.items()},
            "outputs": sorted(self.files),
            "invariants": self.checks,
            "passed": all(c["pass"] for c in self.checks),
        }
        fd, tmp = tempfile.mkstemp(dir=self.out, prefix=".manifest", suffix=".json")
        with os.fdopen(fd, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
        os.replace(tmp, self.out / "manifest.json")
        return data


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return v


# ---------------------------------------------------------------------------
# subcommands


def cmd_nash(run: Run):
    from .nash import problem_for

    scn = run.scn
    prob = problem_for(scn)
    f = scn.leader_values()
    with run.timed("nash_krylov"):
        a = prob.solve_krylov(f, scn.tol["nash"])
    with run.timed("nash_contraction"):
        b = prob.solve_contraction(f, scn.tol["contraction"])
    s = prob.sys
    za, zb = s.fhat(a.z), s.fhat(b.z)
    nz = s.qnorm(za)
    agree = s.qnorm(za - zb) / nz if nz > 0 else s.qnorm(za - zb)
    # z can be dominated by the free evolution, so compare the controls as well
    for i in range(2):
        nv = s.qnorm(a.v[i], s.chi_ctrl[i])
        dv = s.qnorm(a.v[i] - b.v[i], s.chi_ctrl[i])
        agree = max(agree, dv / nv if nv > 0 else dv)
    costs = prob.costs(f, a.v)
    run.csv("nash_summary.csv", ["method", "iterations", "residual", "r1", "r2", "v1_norm", "v2_norm"],
            [[sol.diagnostics["method"], sol.diagnostics["iterations"], sol.diagnostics["residual"],
              *sol.residuals, s.qnorm(sol.v[0], s.chi_ctrl[0]), s.qnorm(sol.v[1], s.chi_ctrl[1])]
             for sol in (a, b)])
    run.csv("nash_costs.csv", ["J1", "J2", "tracking1", "tracking2", "energy1", "energy2", "J_leader"],
            [[*costs.J, *costs.tracking, *costs.energy, costs.J_leader]])
    run.csv("nash_trace.csv", ["method", "iteration", "residual"],
            [[sol.diagnostics["method"], k + 1, r] for sol in (a, b)
             for k, r in enumerate(sol.diagnostics["trace"])])
    run.field("v1.field", a.v[0], "intervals")
    run.field("v2.field", a.v[1], "intervals")
    run.field("z.field", a.z, "levels")
    run.check("nash_agreement", agree <= 1e-6, f"{agree:.3e}")
    run.check("stationarity", max(*a.residuals, *b.residuals) <= 1e-7,
              f"{max(*a.residuals, *b.residuals):.3e}")


def cmd_leader(run: Run):
    from .leader import hum_for

    scn = run.scn
    eps = run.args.eps or list(scn.eps)
    hum = hum_for(scn)
    rows, results = [], []
    with run.timed("leader_sweep"):
        for e in eps:
            r = hum.minimize(e, scn.penalty, scn.tol["leader"])
            results.append(r)
            rows.append([e, r.terminal_norm, r.cost, r.iterations, r.branch, r.penalty])
    run.csv("eps_sweep.csv", ["eps", "terminal_norm", "cost", "iterations", "branch", "penalty"], rows)
    best = results[int(np.argmin(eps))]
    run.field("leader_f.field", best.f, "intervals")
    run.field("leader_z.field", best.z, "levels")
    order = np.argsort(eps)[::-1]
    tn = [results[k].terminal_norm for k in order]
    run.check("terminal_norm_nonincreasing", all(tn[k + 1] <= tn[k] * (1 + 1e-9) for k in range(len(tn) - 1)))
    if scn.penalty == "exact":
        worst = max(r.terminal_norm / r.eps for r in results)
        run.check("terminal_norm_le_eps", worst <= 1 + 1e-6, f"max |z(T)|/eps = {worst:.9f}")


def cmd_observability(run: Run):
    from .carleman import build_weight_set
    from .leader import observability_ratio

    scn = run.scn
    n = run.args.samples or 100
    with run.timed("observability"):
        w = build_weight_set(scn)
        a = observability_ratio(scn, n, w)
        b = observability_ratio(scn, 2 * n, w)
    run.csv("observability.csv", ["sample", "ratio"], [[k, v] for k, v in enumerate(b.ratios)])
    run.check("observability_finite", np.isfinite(b.max_ratio), f"max {b.max_ratio:.4e}")
    change = abs(b.max_ratio - a.max_ratio) / a.max_ratio
    run.check("observability_stable", change < 0.5, f"relative change {change:.3e}")


def cmd_carleman(run: Run):
    from .carleman import build_weight_set, carleman_ratio, target_admissibility

    scn = run.scn
    n = run.args.samples or 100
    with run.timed("carleman"):
        w = build_weight_set(scn, variant="single")
        a = carleman_ratio(scn, w, n)
        b = carleman_ratio(scn, w, 2 * n)
    run.csv("carleman.csv", ["sample", "ratio"], [[k, v] for k, v in enumerate(b.ratios)])
    run.csv("carleman_terms.csv", ["term", "value"], sorted(b.terms.items()))
    yb = scn.theta_hat(scn.trajectory())
    ys = scn.target_values()
    wa = build_weight_set(scn)
    adm = [target_admissibility(yb, ys[i], wa, scn.regions.target(i + 1), scn.op.mass, scn.scheme.dt)
           for i in range(2)]
    run.csv("admissibility.csv", ["follower", "value", "log10", "warn"],
            [[i + 1, r.value, r.log10, r.warn] for i, r in enumerate(adm)])
    run.check("carleman_finite", np.isfinite(b.max_ratio), f"max {b.max_ratio:.4e}")
    change = abs(b.max_ratio - a.max_ratio) / a.max_ratio
    run.check("carleman_stable", change < 0.5, f"relative change {change:.3e}")


def cmd_semilinear(run: Run):
    from .semilinear import equilibrium_probe, semilinear_leader, solve_quasi_nash

    scn = run.scn
    f = scn.leader_values()
    with run.timed("quasi_nash"):
        st = solve_quasi_nash(f, scn)
    run.csv("quasi_nash_trace.csv", ["iteration", "increment"], [[k + 1, v] for k, v in enumerate(st.trace)])
    with run.timed("probe"):
        pr = equilibrium_probe(st, f, scn, n_dirs=3)
    run.csv("probe.csv", ["follower", "direction", "eps", "difference"],
            [[i + 1, k, e, pr.differences[i, k, j]] for i in range(2)
             for k in range(pr.differences.shape[1]) for j, e in enumerate(pr.eps)])
    eps = (run.args.eps or [scn.eps[-1]])[-1]
    with run.timed("semilinear_leader"):
        lr = semilinear_leader(scn, eps=eps)
    run.csv("leader_outer_trace.csv", ["iteration", "increment", "control_norm"],
            [[k + 1, a, b] for k, (a, b) in enumerate(zip(lr.trace, lr.control_norms))])
    run.field("semilinear_y.field", st.y, "levels")
    run.field("semilinear_leader_f.field", lr.leader.f, "intervals")
    tr = st.trace
    run.check("quasi_nash_monotone", all(tr[k + 1] < tr[k] for k in range(2, len(tr) - 1)))
    run.check("probe_nonnegative", not pr.counterexample, f"min {pr.min_difference:.3e}")
    run.check("leader_terminal", lr.terminal_norm <= 2 * eps, f"|z(T)| = {lr.terminal_norm:.3e}")


def cmd_verify(run: Run):
    from .leader import duality_residual, hum_for
    from .nash import problem_for

    scn = run.scn
    rng = scn.rng(99)
    s = scn.system()
    with run.timed("duality"):
        worst = 0.0
        for _ in range(5):
            f = rng.standard_normal(s.interval_shape) * s.chi_O
            worst = max(worst, duality_residual(scn, f, rng.standard_normal(s.n_cells)))
    run.check("duality_residual", worst <= 1e-10, f"{worst:.3e}")
    prob = problem_for(scn)
    with run.timed("adjoint_pairing"):
        v = rng.standard_normal(s.interval_shape) * s.chi_ctrl[0]
        g = rng.standard_normal(s.interval_shape)
        lhs = s.q(prob.L(1, v), g)
        rhs = s.q(v, prob.L_star(1, g), s.chi_ctrl[0])
    run.check("adjoint_pairing", abs(lhs - rhs) <= 1e-12 * (1 + abs(lhs)), f"{abs(lhs - rhs):.3e}")
    with run.timed("nash"):
        f = rng.standard_normal(s.interval_shape) * s.chi_O
        a = prob.solve_krylov(f, 1e-11)
        b = prob.solve_contraction(f, 1e-13)
        za = s.fhat(a.z)
        agree = s.qnorm(za - s.fhat(b.z)) / s.qnorm(za)
    run.check("nash_agreement", agree <= 1e-6, f"{agree:.3e}")
    with run.timed("gradient"):
        hum = hum_for(scn)
        x = rng.standard_normal(s.n_cells)
        d = rng.standard_normal(s.n_cells)
        gr = s.m(hum.grad(x, 1e-2, "exact"), d)
        h = 1e-4
        fd = (hum.F(x + h * d, 1e-2, "exact") - hum.F(x - h * d, 1e-2, "exact")) / (2 * h)
        rel = abs(gr - fd) / max(abs(fd), 1e-300)
    run.check("gradient_fd", rel <= 1e-5, f"{rel:.3e}")
    lam = scn.op.smallest_eigenvalue()
    run.check("lambda_min_nonnegative", lam >= -1e-8, f"{lam:.6e}")
    with run.timed("leader"):
        rs = [hum.minimize_exact(e, scn.tol["leader"]) for e in scn.eps]
    ok = all(r.terminal_norm <= r.eps * (1 + 1e-6) for r in rs)
    run.check("leader_terminal_norm", ok, ",".join(f"{r.terminal_norm:.3e}" for r in rs))


def _sweep_point(payload):
    path, point, seed, workdir = payload
    from .leader import hum_for
    from .nash import problem_for
    from .scenario import parse_config_text, scenario_from_config

    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cfg = parse_config_text(Path(path).read_text(), path)
    model = cfg.setdefault("model", {})
    if point["mu"] is not None:
        model["mu"] = point["mu"]
    if point["alpha"] is not None:
        model["alpha"] = [point["alpha"], point["alpha"]]
    if point["cells"] is not None:
        cfg["grid"]["cells"] = point["cells"]
    t0 = time.perf_counter()
    scn = scenario_from_config(cfg, Path(path).parent, json.dumps(cfg, sort_keys=True))
    factor = problem_for(scn).contraction_factor(seed=seed)
    terminal = math.nan
    if point["eps"] is not None:
        terminal = hum_for(scn).minimize_exact(point["eps"], scn.tol["leader"]).terminal_norm
    row = [point["mu"], point["alpha"], point["eps"], point["cells"], factor, terminal]
    with open(workdir / "point.json", "w") as fh:
        json.dump({"point": point, "scenario_hash": scn.config_hash, "contraction_factor": factor,
                   "terminal_norm": None if math.isnan(terminal) else terminal,
                   "seconds": time.perf_counter() - t0}, fh, indent=2)
    return row


def cmd_sweep(run: Run):
    a = run.args
    axes = {
        "mu": a.mu or [None],
        "alpha": a.alpha or [None],
        "eps": a.eps or [None],
        "cells": a.cells or [None],
    }
    points = [dict(zip(axes, combo)) for combo in itertools.product(*axes.values())]
    # one seed for every point so the factors are comparable across the sweep
    payloads = [(str(a.scenario_path), p, run.scn.seed, str(run.out / "points" / f"{k:04d}"))
                for k, p in enumerate(points)]
    with run.timed("sweep"):
        if (a.workers or 1) > 1:
            with ProcessPoolExecutor(max_workers=a.workers) as ex:
                rows = list(ex.map(_sweep_point, payloads))
        else:
            rows = [_sweep_point(p) for p in payloads]
    run.csv("sweep.csv", ["mu", "alpha", "eps", "cells", "contraction_factor", "terminal_norm"], rows)
    run.check("contraction_below_one", all(r[4] < 1 for r in rows), f"max {max(r[4] for r in rows):.3e}")
    if a.alpha and len(a.alpha) > 1:
        groups = {}
        for r in rows:
            groups.setdefault((r[0], r[2], r[3]), []).append((r[1], r[4]))
        ok = all(all(x[1] > y[1] for x, y in zip(sorted(g), sorted(g)[1:])) for g in groups.values())
        run.check("contraction_decreases_in_alpha", ok)


COMMANDS = {
    "nash": cmd_nash,
    "leader": cmd_leader,
    "observability": cmd_observability,
    "carleman": cmd_carleman,
    "semilinear": cmd_semilinear,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
}


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser():
    p = argparse.ArgumentParser(prog="hhctl", description=__doc__)
    p.add_argument("--version", action="version", version=f"hhctl {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--scenario", required=True,
                        help="scenario file, or the name of a bundled scenario")
        sp.add_argument("--out", default=None, help="output directory (default: out/<command>)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--eps", type=_floats, default=None, help="comma-separated list")
        sp.add_argument("--samples", type=int, default=None)
        if name == "sweep":
            sp.add_argument("--mu", type=_floats, default=None)
            sp.add_argument("--alpha", type=_floats, default=None)
            sp.add_argument("--cells", type=_ints, default=None)
    return p


def _resolve_scenario(text):
    p = Path(text)
    if p.exists():
        return p
    return bundled_scenario_path(text)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("HHCTL_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        path = _resolve_scenario(args.scenario)
        scn = load_scenario(path)
    except FileNotFoundError as exc:
        print(json.dumps({"error": "FileNotFound", "failures": [str(exc)]}), file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(json.dumps({"error": "ValidationError", "failures": exc.violations}), file=sys.stderr)
        return 2
    except ParseError as exc:
        print(json.dumps({"error": "ParseError", "failures": [str(exc)],
                          "line": getattr(exc, "line", None)}), file=sys.stderr)
        return 2
    if args.seed is not None:
        scn.seed = args.seed
    args.scenario_path = path
    out = Path(args.out or Path("out") / args.command)
    run = Run(out, scn, args)
    try:
        COMMANDS[args.command](run)
    except HardyNashError as exc:
        run.check(f"{args.command}_completed", False, f"{type(exc).__name__}: {exc}")
    data = run.manifest(args.command)
    failures = [c for c in data["invariants"] if not c["pass"]]
    if failures:
        print(json.dumps({"error": "InvariantFailure", "failures": failures}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
