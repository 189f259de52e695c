import math

import numpy as np
import pytest

from conftest import small_scenario
from hardynash.carleman import (
    Profile,
    build_psi,
    build_weight_set,
    build_weights,
    carleman_ratio,
    carleman_terms,
    default_sets,
    erode,
    ray_coordinate,
    shrink,
    target_admissibility,
    theta_weight,
)
from hardynash.errors import CriticalPointLeak, LambdaEscalationFailure
from hardynash.geometry import build_grid


def test_erode_radial_and_tensor():
    g = build_grid("radial3d", 10, 2.0)
    m = np.zeros(10, bool)
    m[3:7] = True
    assert np.flatnonzero(erode(g, m)).tolist() == [4, 5]
    single = np.zeros(10, bool)
    single[4] = True
    assert np.array_equal(shrink(g, single), single)
    t = build_grid("tensor", 8, 1.5, 2)
    sq = (np.abs(t.centers) < 1.0).all(axis=1)
    inner = (np.abs(t.centers) < 1.0 - t.h).all(axis=1)
    assert np.array_equal(erode(t, sq), inner)


def test_ray_coordinate_tensor():
    g = build_grid("tensor", 16, 1.5, 2)
    c = ray_coordinate(g)
    ball = g.radius <= 1.0
    assert np.allclose(c[ball], g.radius[ball])
    assert c.max() < 1.5 and c.max() > 1.4
    # monotone along the diagonal ray
    diag = np.isclose(g.centers[:, 0], g.centers[:, 1]) & (g.centers[:, 0] > 0)
    order = np.argsort(g.radius[diag])
    assert np.all(np.diff(c[diag][order]) > 0)


def test_profile_is_c1_with_single_peak():
    p = Profile.build(1.3, 1.7, [1.5], 2.0)
    x = np.linspace(0.2, 2.0, 20001)
    y = p(x)
    dy = np.gradient(y, x)
    assert np.max(np.abs(np.diff(y))) < 1e-3  # continuous
    jumps = np.abs(np.diff(dy))
    assert jumps.max() < 5e-3  # derivative has no jumps at the knots
    assert x[np.argmax(y)] == pytest.approx(1.5, abs=1e-3)
    assert y[-1] == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(y[x <= 1], np.log(x[x <= 1]))
    inside = (x > 1.3) & (x < 1.7)
    assert np.all(np.abs(dy[~inside & (x > 0.3)]) > 1e-3)


def test_single_psi_peaks_inside_omega(shared):
    w0 = default_sets(shared.grid, shared.regions)
    psi = build_psi(shared.grid, w0)
    assert w0[np.argmax(psi.values[0])]
    assert psi.grad_lower[0] > 0
    assert psi.sup == pytest.approx(psi.values[0].max(), rel=0.05)


def test_pair_psi_share_pieces_outside_O_tilde(distinct):
    Ot, w1, w2 = default_sets(distinct.grid, distinct.regions)
    psi = build_psi(distinct.grid, None, "pair", Ot, [w1, w2])
    p1, p2 = psi.values
    a, b = psi.profile.a, psi.profile.b
    c = ray_coordinate(distinct.grid)
    out = (c <= a) | (c >= b)
    assert np.allclose(p1[out], p2[out])
    assert w1[np.argmax(p1)] and w2[np.argmax(p2)]
    assert p1.max() == pytest.approx(p2.max(), rel=0.05)


def test_set_reaching_boundary_is_rejected():
    g = build_grid("radial3d", 16, 2.0)
    with pytest.raises(CriticalPointLeak):
        build_psi(g, g.radius > 1.5)


def test_theta_weight():
    t = np.linspace(0.05, 0.95, 19)
    th = theta_weight(t, 1.0)
    assert np.allclose(th, th[::-1])
    assert np.argmin(th) == 9
    assert theta_weight(0.5, 1.0) == pytest.approx(64.0)


def test_weights_positive_and_minimal_in_omega(shared, distinct):
    for scn in (shared, distinct):
        w = build_weight_set(scn, variant="single")
        sig = w.sigma[0]
        assert np.all(sig > 0)
        assert np.all(w.psi.sets[0][np.argmin(sig, axis=1)])
        smax = np.maximum.reduce(w.sigma)
        assert np.allclose(w.log_rho_inv2, np.log(w.theta)[:, None] - 2 * smax)


def test_lambda_escalation(shared):
    w0 = default_sets(shared.grid, shared.regions)
    psi = build_psi(shared.grid, w0)
    w = build_weights(psi, shared.grid, 1.0, 0.5, shared.T, shared.scheme.midpoints)
    assert w.doublings >= 1 and w.lam == 0.5 * 2 ** w.doublings
    with pytest.raises(LambdaEscalationFailure):
        build_weights(psi, shared.grid, 1.0, 0.5, shared.T, shared.scheme.midpoints, max_doublings=0)
    with pytest.raises(ValueError):
        build_weights(psi, shared.grid, -1.0, 1.0, shared.T, shared.scheme.midpoints)


def test_rho_inv2_clamped(shared):
    w = build_weight_set(shared, s=50.0)
    assert np.all(w.rho_inv2 >= 1e-300)
    assert np.all(np.isfinite(w.log_rho_inv2))


def test_hardy_term_vanishes_at_critical_mu(rng):
    scn = small_scenario(model={"mu": 0.25})
    w = build_weight_set(scn, variant="single")
    u = rng.standard_normal((scn.scheme.n_steps, scn.grid.n_cells))
    lhs, rhs = carleman_terms(u, u, w, scn.grid, scn.mu, scn.op.mass, scn.scheme.dt)
    assert lhs["hardy"] == 0.0
    assert all(v > 0 for k, v in lhs.items() if k != "hardy")
    lhs2, _ = carleman_terms(u, u, w, scn.grid, 0.1, scn.op.mass, scn.scheme.dt)
    assert lhs2["hardy"] > 0


def test_carleman_ratio_finite_and_reproducible(tensor):
    a = carleman_ratio(tensor, n_samples=8)
    assert np.all(np.isfinite(a.ratios)) and a.max_ratio > 0
    assert set(a.terms) == {"lhs_x2", "lhs_outer", "lhs_inv_r", "lhs_hardy", "lhs_grad",
                            "rhs_source", "rhs_omega0"}
    assert np.array_equal(a.ratios, carleman_ratio(tensor, n_samples=8).ratios)


def test_admissibility_log_space_matches_direct(shared):
    w = build_weight_set(shared, s=1e-4)  # small s keeps the direct sum in range
    yb = shared.theta_hat(shared.trajectory())
    yd = shared.target_values()[0]
    mask = shared.regions.target(1)
    m, dt = shared.op.mass, shared.scheme.dt
    rep = target_admissibility(yb, yd, w, mask, m, dt)
    direct = dt * np.sum((yb - yd) ** 2 * mask * m / w.rho_inv2)
    assert np.isfinite(direct)
    assert rep.value == pytest.approx(direct, rel=1e-10)
    assert rep.log10 == pytest.approx(math.log10(direct), rel=1e-12)
    assert not rep.warn
    assert target_admissibility(yb, yb, w, mask, m, dt).value == 0.0


def test_admissibility_warns_on_late_mismatch(shared):
    w = build_weight_set(shared)
    yb = shared.theta_hat(shared.trajectory())
    late = yb.copy()
    late[-1] += 1.0  # mismatch in the last interval only
    rep = target_admissibility(yb, late, w, shared.regions.target(1), shared.op.mass, shared.scheme.dt)
    assert rep.warn and rep.growth_log10 == math.inf


def test_admissibility_warns_on_constant_offset(shared):
    w = build_weight_set(shared)
    yb = shared.theta_hat(shared.trajectory())
    rep = target_admissibility(yb, yb + 1.0, w, shared.regions.target(1), shared.op.mass, shared.scheme.dt)
    assert rep.warn and rep.growth_log10 > 6
    assert rep.value == math.inf and rep.log10 > 300  # reported in log10 beyond double range


def test_theta_symmetric_at_mirrored_midpoints(shared):
    w = build_weight_set(shared)
    assert np.allclose(w.theta, w.theta[::-1], rtol=1e-14)


def test_pair_sigmas_equal_outside_O_tilde_exactly(distinct):
    w = build_weight_set(distinct, variant="pair")
    c = ray_coordinate(distinct.grid)
    prof = w.psi.profile
    out = (c <= prof.a) | (c > prof.b)
    assert np.array_equal(w.sigma[0][:, out], w.sigma[1][:, out])


def test_weights_deterministic(distinct):
    a = build_weight_set(distinct)
    b = build_weight_set(distinct)
    assert a.log_rho_inv2.tobytes() == b.log_rho_inv2.tobytes()
