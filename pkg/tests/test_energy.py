import numpy as np
import pytest

from regsob.energy import (
    assemble,
    brute_force_seminorm,
    critical_p,
    el_residual,
    lp_norm,
    rayleigh_quotient,
    regional_laplacian,
    seminorm,
    weighted_seminorm,
)
from regsob.errors import NonCompactSupport, PointTooCloseToEdge, ZeroField
from regsob.field import (
    attach_tail_model,
    eval_u,
    make_grid,
    synthesize_profile,
)
from regsob.kernel import KernelParams, build_kernel_table


def bump_u(pts, sigma=0.75):
    """Analytic compactly supported profile on the half-space."""
    rho2 = np.sum(pts ** 2, axis=1)
    z = pts[:, -1]
    out = np.zeros(len(pts))
    inside = rho2 < 1.0
    out[inside] = z[inside] ** (2 * sigma - 1) * np.exp(
        1.0 - 1.0 / (1.0 - rho2[inside])
    )
    return out


@pytest.fixture(scope="module")
def setup4():
    g = make_grid(4, 1.05, 16, 16, (1.0, 1.0))
    tab = build_kernel_table(g, KernelParams.energy(4, 0.75))
    f = synthesize_profile("compact-bump", g, 0.75)
    return g, tab, f


@pytest.fixture(scope="module")
def setup_gamma0():
    g = make_grid(4, 1.05, 16, 16, (1.0, 1.0))
    tab = build_kernel_table(g, KernelParams.curvature(4, 0.75))
    f = synthesize_profile("compact-bump", g, 0.75)
    return g, tab, f


def test_zero_field_all_parts_zero(setup4):
    g, tab, f = setup4
    bd = seminorm(f.with_values(np.zeros(g.shape)), tab)
    assert bd.total == 0.0
    assert bd.far_part == 0.0
    assert bd.near_part == 0.0
    assert bd.tail_estimate == 0.0


def test_parts_nonnegative_and_sum(setup4):
    g, tab, f = setup4
    bd = seminorm(f, tab)
    assert bd.far_part >= 0 and bd.near_part >= 0
    assert bd.total == pytest.approx(
        bd.far_part + bd.near_part + bd.tail_estimate, rel=1e-15
    )
    assert bd.quad_error_estimate < 0.01 * bd.total


def test_bump_matches_oracle(setup4):
    g, tab, f = setup4

    def u(pts):
        r = np.linalg.norm(pts[:, :-1], axis=1)
        return eval_u(f, r, pts[:, -1])

    bd = seminorm(f, tab)
    est, err = brute_force_seminorm(u, 4, 0.75, 1.05, samples=1_500_000, seed=2)
    assert abs(bd.total - est) <= max(0.01 * est, 3 * err)


def test_scaling_invariance(setup4):
    g, tab, f = setup4
    n, sigma, lam = 4, 0.75, 2.0
    g2 = make_grid(n, g.R_max / lam, 16, 16, (1.0, 1.0))
    tab2 = build_kernel_table(g2, KernelParams.energy(n, sigma))
    scale = lam ** ((n - 2 * sigma) / 2.0 + 2 * sigma - 1.0)
    f2 = synthesize_profile("compact-bump", g2, sigma).with_values(
        scale * f.regular_values
    )
    e1 = seminorm(f, tab).total
    e2 = seminorm(f2, tab2).total
    assert e2 == pytest.approx(e1, rel=5e-3)


def test_oracle_seed_consistency():
    e1, s1 = brute_force_seminorm(bump_u, 3, 0.75, 1.0, samples=400_000, seed=1)
    e2, s2 = brute_force_seminorm(bump_u, 3, 0.75, 1.0, samples=400_000, seed=9)
    assert abs(e1 - e2) < 3 * np.hypot(s1, s2)


def test_oracle_variance_halving():
    _, s1 = brute_force_seminorm(bump_u, 3, 0.75, 1.0, samples=300_000, seed=4)
    _, s2 = brute_force_seminorm(bump_u, 3, 0.75, 1.0, samples=1_200_000, seed=4)
    assert s1 / s2 == pytest.approx(2.0, rel=0.35)


def test_oracle_zero_function_exact_zero():
    est, err = brute_force_seminorm(
        lambda p: np.zeros(len(p)), 3, 0.75, 1.0, samples=10_000, seed=0
    )
    assert est == 0.0 and err == 0.0


def test_oracle_refuses_noncompact():
    def envelope(pts):
        rho2 = np.sum(pts ** 2, axis=1)
        return pts[:, -1] ** 0.5 * (1 + rho2) ** -1.75

    with pytest.raises(NonCompactSupport):
        brute_force_seminorm(envelope, 3, 0.75, 1.0, samples=10_000)


def test_power_weight_zero_matches_seminorm(setup4):
    g, tab, f = setup4
    plain = seminorm(f, tab)
    weighted = weighted_seminorm(f, tab, ("power", 0.0))
    assert weighted.far_part == pytest.approx(plain.far_part, rel=1e-12)
    assert weighted.near_part == pytest.approx(plain.near_part, rel=1e-12)


def test_gamma0_weight_swap_symmetry(setup_gamma0):
    g, tab, f = setup_gamma0
    form = assemble(g, tab, 0.75, "gamma0")
    # the pair weight is invariant under swapping the two points, so the
    # assembled far matrix is symmetric and the form order-independent
    scale = np.max(np.abs(form.M))
    assert np.max(np.abs(form.M - form.M.T)) < 1e-12 * scale
    rng = np.random.default_rng(3)
    v = rng.uniform(-1, 1, g.shape)
    w = rng.uniform(-1, 1, g.shape)
    b1 = form.bilinear(v, w)
    b2 = form.bilinear(w, v)
    assert b1 == pytest.approx(b2, rel=1e-12)
    bd = weighted_seminorm(f, tab, "gamma0")
    assert np.isfinite(bd.total)


@pytest.mark.parametrize("gamma", [0.5, 1.0])
def test_exterior_power_weight_decay_exponent(gamma):
    # the scaling law needs lambda well inside the asymptotic regime and a
    # domain large enough that the truncation does not steepen the decay
    sigma = 0.75
    g = make_grid(4, 150.0, 32, 32, (2.0, 2.0))
    tab = build_kernel_table(g, KernelParams.energy(4, sigma))
    f = synthesize_profile("envelope", g, sigma)
    lams = np.geomspace(40.0, 140.0, 5)
    vals = [
        weighted_seminorm(f, tab, ("power", gamma), lam=l, exterior=True).total
        for l in lams
    ]
    slope = np.polyfit(np.log(lams), np.log(vals), 1)[0]
    want = gamma - 2 * sigma
    assert abs(slope - want) <= 0.15 * abs(want)


def test_lp_norm_homogeneity(setup4):
    g, tab, f = setup4
    p = critical_p(4, 0.75)
    assert p == pytest.approx(3.2)
    base = lp_norm(f, p)
    scaled = lp_norm(f.with_values(2.5 * f.regular_values), p)
    assert scaled == pytest.approx(2.5 * base, rel=1e-12)


def test_lp_norm_envelope_stable_under_domain_doubling():
    # N chosen so interpolation error (cell size ~ R/N^2) stays below the band
    vals = []
    for R in (12.0, 24.0):
        g = make_grid(4, R, 64, 64, (2.0, 2.0))
        f = attach_tail_model(synthesize_profile("envelope", g, 0.75))
        vals.append(lp_norm(f, critical_p(4, 0.75)))
    assert vals[1] == pytest.approx(vals[0], rel=0.01)


def test_rayleigh_homogeneity_exact(setup4):
    g, tab, f = setup4
    q1 = rayleigh_quotient(f, tab)
    q2 = rayleigh_quotient(f.with_values(3.7 * f.regular_values), tab)
    assert q2 == pytest.approx(q1, rel=1e-12)
    assert q1 > 0
    with pytest.raises(ZeroField):
        rayleigh_quotient(f.with_values(np.zeros(g.shape)), tab)


def test_rayleigh_dilation_invariance(setup4):
    g, tab, f = setup4
    n, sigma, lam = 4, 0.75, 2.0
    g2 = make_grid(n, g.R_max / lam, 16, 16, (1.0, 1.0))
    tab2 = build_kernel_table(g2, KernelParams.energy(n, sigma))
    scale = lam ** ((n - 2 * sigma) / 2.0 + 2 * sigma - 1.0)
    f2 = synthesize_profile("compact-bump", g2, sigma).with_values(
        scale * f.regular_values
    )
    assert rayleigh_quotient(f2, tab2) == pytest.approx(
        rayleigh_quotient(f, tab), rel=5e-3
    )


def test_regional_laplacian_constant_zero(setup4):
    g, tab, f = setup4
    zpos = np.where(g.z_nodes > 0, g.z_nodes, 1.0)
    const_u = f.with_values(
        np.broadcast_to(zpos ** (1 - 2 * 0.75), g.shape).copy()
    )
    val, err = regional_laplacian(const_u, (0.3, 0.55), tab, 0.05)
    ref, _ = regional_laplacian(f, (0.3, 0.55), tab, 0.05)
    assert abs(val) < 0.02 * abs(ref) + 5 * err


def test_regional_laplacian_linearity(setup4):
    g, tab, f = setup4
    rng = np.random.default_rng(8)
    other = f.with_values(rng.uniform(0, 1, g.shape))
    combo = f.with_values(2.0 * f.regular_values - 0.5 * other.regular_values)
    pt, eps = (0.3, 0.55), 0.05
    v1, _ = regional_laplacian(f, pt, tab, eps)
    v2, _ = regional_laplacian(other, pt, tab, eps)
    v3, _ = regional_laplacian(combo, pt, tab, eps)
    assert v3 == pytest.approx(2.0 * v1 - 0.5 * v2, rel=1e-10)


def test_regional_laplacian_positive_at_bump_max(setup4):
    g, tab, f = setup4
    zpow = np.where(g.z_nodes > 0, g.z_nodes, 1.0) ** 0.5
    zpow[g.z_nodes == 0.0] = 0.0
    U = f.regular_values * zpow[None, :]
    i, j = np.unravel_index(np.argmax(U), U.shape)
    val, _ = regional_laplacian(f, (g.r_nodes[i], g.z_nodes[j]), tab, 0.04)
    assert val > 0


def test_regional_laplacian_edge_guard(setup4):
    g, tab, f = setup4
    with pytest.raises(PointTooCloseToEdge):
        regional_laplacian(f, (0.3, 0.01), tab, 0.05)


def test_el_residual_zero_field(setup4):
    g, tab, f = setup4
    assert el_residual(f.with_values(np.zeros(g.shape)), tab) == 0.0
    assert el_residual(f, tab) > 0


def test_bilinear_symmetry_and_polarization():
    g = make_grid(4, 1.0, 8, 8, (1.0, 1.5))
    tab = build_kernel_table(g, KernelParams.energy(4, 0.75))
    form = assemble(g, tab, 0.75)
    rng = np.random.default_rng(0)
    v = rng.uniform(0.2, 1.0, g.shape)
    w = rng.uniform(-1, 1, g.shape)
    bil = form.bilinear(v, w)
    assert form.bilinear(w, v) == pytest.approx(bil, rel=1e-12)
    pol = 0.25 * (form.energy(v + w) - form.energy(v - w))
    assert pol == pytest.approx(bil, rel=1e-10)


def test_gradient_matches_finite_difference():
    g = make_grid(4, 1.0, 8, 8, (1.0, 1.5))
    tab = build_kernel_table(g, KernelParams.energy(4, 0.75))
    form = assemble(g, tab, 0.75)
    rng = np.random.default_rng(1)
    v = rng.uniform(0.2, 1.0, g.shape)
    w = rng.uniform(-1, 1, g.shape)
    h = 1e-6
    fd = (form.energy(v + h * w) - form.energy(v - h * w)) / (2 * h)
    assert float(form.grad(v) @ w.ravel()) == pytest.approx(fd, rel=1e-7)
