"""End-to-end acceptance checks, one per shipped claim.

Each test prints a single CRITERION line so the suite output doubles as a
verification report.  The full-space reference constant was computed from
the known full-space extremizer with the brute-force Monte Carlo oracle
before this suite was written and is quoted here as a plain number.
"""

import numpy as np
import pytest

from regsob.energy import (
    brute_force_seminorm,
    critical_p,
    seminorm,
)
from regsob.expansion import (
    BoundaryGraph,
    MCConfig,
    bounds_check,
    cw_cutoff_check,
    verify_upper_bound,
)
from regsob.field import (
    attach_tail_model,
    dilate_exact,
    eval_u,
    make_grid,
    synthesize_profile,
)
from regsob.gamma0 import (
    estimate_gamma0,
    interior_weighted_growth,
    tail_bound,
)
from regsob.kernel import KernelParams, build_kernel_table
from regsob.minimize import SolverConfig, solve_halfspace
from regsob.rearrange import (
    SliceProfile,
    rearrange_profile,
    rearrange_sharp,
    slice_interaction,
    slice_lp_norm,
)

# Sharp constant of the unconstrained full-space quotient in the same
# normalization, derived from the known full-space extremizer via the
# brute-force oracle and cross-checked against the closed form.
FULL_SPACE_CONSTANT = 126.877

SIGMA = 0.75


def report(num, ok, detail):
    print("CRITERION %d: %s  (%s)" % (num, "PASS" if ok else "FAIL", detail))


@pytest.fixture(scope="session")
def solved():
    """Two independent solver runs at the acceptance resolution."""
    base = dict(
        schedule=(16, 24, 32), R_max=20.0, max_iters=400, init="interior-bubble"
    )
    res_a = solve_halfspace(SolverConfig(seed=0, **base))
    res_b = solve_halfspace(SolverConfig(seed=11, init_noise=0.05, **base))
    return res_a, res_b


@pytest.fixture(scope="session")
def gamma0_report(solved):
    res_a, _ = solved
    return estimate_gamma0(res_a.theta, provenance="acceptance solver run A")


def test_criterion_1_kernel_reduction_vs_oracle():
    bad = []
    for n in (3, 4):
        g = make_grid(n, 1.05, 24, 24, (1.0, 1.0))
        tab = build_kernel_table(g, KernelParams.energy(n, SIGMA))
        f = synthesize_profile("compact-bump", g, SIGMA)
        total = seminorm(f, tab).total

        def u(pts, f=f):
            r = np.linalg.norm(pts[:, :-1], axis=1)
            return eval_u(f, r, pts[:, -1])

        est, err = brute_force_seminorm(
            u, n, SIGMA, 1.05, samples=1_500_000, seed=2
        )
        if abs(total - est) > max(0.01 * est, 3 * err):
            bad.append((n, total, est, err))
    report(1, not bad, "reduced kernel vs 2n-D Monte Carlo, n=3,4, 24x24")
    assert not bad, bad


def test_criterion_2_rearrangement_monotonicity():
    rng = np.random.default_rng(0)
    energy_bad = mass_bad = 0
    for n in (2, 3, 4):
        g = make_grid(n, 1.0, 10, 10, (1.0, 1.0))
        tab = build_kernel_table(g, KernelParams.energy(n, SIGMA))
        pc = critical_p(n, SIGMA)
        for _ in range(200):
            f = synthesize_profile("compact-bump", g, SIGMA).with_values(
                rng.random(g.shape)
            )
            fr = rearrange_sharp(f)
            e0 = seminorm(f, tab).total
            e1 = seminorm(fr, tab).total
            if e1 > e0 + 1e-8 * e0:
                energy_bad += 1
            for j in range(g.z_nodes.size):
                a = SliceProfile(g.r_nodes, f.regular_values[:, j], n - 2)
                b = SliceProfile(g.r_nodes, fr.regular_values[:, j], n - 2)
                for p in (1.0, 2.0, pc):
                    na, nb = slice_lp_norm(a, p), slice_lp_norm(b, p)
                    if abs(na - nb) > 1e-10 * max(na, 1e-30):
                        mass_bad += 1
    ok = energy_bad == 0 and mass_bad == 0
    report(
        2,
        ok,
        "600 random fields: %d energy, %d slice-norm violations"
        % (energy_bad, mass_bad),
    )
    assert ok


def test_criterion_3_riesz_interaction_monotonicity():
    rng = np.random.default_rng(7)
    radii = np.linspace(0.0, 1.0, 16)
    bad = 0
    for _ in range(100):
        vf = rng.uniform(0, 1, 16)
        vg = rng.uniform(0, 1, 16)
        vf[-1] = vg[-1] = 0.0
        f = SliceProfile(radii, vf, 2)
        g = SliceProfile(radii, vg, 2)
        t = rng.uniform(0.05, 0.5)
        j0 = slice_interaction(f, g, t, 4, SIGMA)
        j1 = slice_interaction(
            rearrange_profile(f), rearrange_profile(g), t, 4, SIGMA
        )
        if j1 > j0 * (1 + 1e-8):
            bad += 1
    report(3, bad == 0, "100 random profile pairs, %d violations" % bad)
    assert bad == 0


def test_criterion_4_halfspace_solver(solved):
    res_a, res_b = solved
    qa = res_a.grid_quotients
    tail_drift = abs(qa[-1] - qa[-2]) / qa[-1]
    init_drift = abs(res_a.s_estimate - res_b.s_estimate) / res_a.s_estimate
    tol = res_a.config.tol_residual
    ok = (
        tail_drift < 0.01
        and init_drift < 0.01
        and res_a.el_residual <= tol
        and res_b.el_residual <= tol
        and res_a.s_estimate < FULL_SPACE_CONSTANT
    )
    report(
        4,
        ok,
        "s=%.3f (<%.3f), schedule drift %.2e, init drift %.2e, resid %.3g"
        % (
            res_a.s_estimate,
            FULL_SPACE_CONSTANT,
            tail_drift,
            init_drift,
            res_a.el_residual,
        ),
    )
    assert ok


def test_criterion_5_decay_envelopes(solved):
    rep = solved[0].envelope_report
    ok_b = abs(rep.boundary_exponent - 0.5) <= 0.05
    ok_d = abs(rep.decay_exponent - 3.5) <= 0.35
    report(
        5,
        ok_b and ok_d,
        "boundary %.3f vs 0.5, far field %.3f vs 3.5"
        % (rep.boundary_exponent, rep.decay_exponent),
    )
    assert ok_b and ok_d


def test_criterion_6_weighted_energy_scalings():
    g = make_grid(4, 150.0, 32, 32, (2.0, 2.0))
    tab = build_kernel_table(g, KernelParams.energy(4, SIGMA))
    f = attach_tail_model(synthesize_profile("envelope", g, SIGMA))
    lams = np.geomspace(40.0, 140.0, 5)
    vals = np.array([tail_bound(f, l, 1.0, table=tab) for l in lams])
    ext_slope = np.polyfit(np.log(lams), np.log(vals), 1)[0]

    g2 = make_grid(4, 600.0, 40, 40, (2.5, 2.5))
    tab2 = build_kernel_table(g2, KernelParams.energy(4, SIGMA))
    f2 = attach_tail_model(synthesize_profile("envelope", g2, SIGMA))
    lams2 = np.geomspace(20.0, 400.0, 12)
    grow = np.array(
        [interior_weighted_growth(f2, l, 2.0, table=tab2) for l in lams2]
    )
    # the growth saturates to const + c * lambda^s; fit the exponent with
    # the constant in the model (differencing aliases against the graded
    # cap boxes)
    int_slope, best = 0.0, np.inf
    for s in np.linspace(0.05, 1.2, 231):
        A = np.column_stack([np.ones_like(lams2), lams2 ** s])
        c, *_ = np.linalg.lstsq(A, grow, rcond=None)
        r = float(np.sum((A @ c - grow) ** 2))
        if r < best:
            int_slope, best = s, r

    ok_e = abs(ext_slope + 0.5) <= 0.075
    ok_i = abs(int_slope - 0.5) <= 0.075
    report(
        6,
        ok_e and ok_i,
        "exterior slope %.3f vs -0.5, interior slope %.3f vs 0.5"
        % (ext_slope, int_slope),
    )
    assert ok_e and ok_i


def test_criterion_7_gamma0_dilation_covariance(solved, gamma0_report):
    theta = solved[0].theta
    half = estimate_gamma0(dilate_exact(theta, 2.0))
    ratio = gamma0_report.value / half.value
    ok = abs(ratio - 2.0) <= 0.06
    report(
        7,
        ok,
        "gamma0 %.4f, dilated %.4f, ratio %.4f vs 2"
        % (gamma0_report.value, half.value, ratio),
    )
    assert ok


def test_criterion_8_pointwise_chart_inequalities(solved):
    bg = BoundaryGraph(
        alpha=(0.05, 0.05, 0.05),
        g_kind="quadratic-taper",
        g_coeffs=(0.05,),
        epsilon0=0.05,
    )
    rep = bounds_check(bg, sample_count=100_000, seed=5)
    cw_bad = cw_cutoff_check(solved[0].theta, 2.0, sample_count=100_000, seed=5)
    ok = rep.total_violations == 0 and cw_bad == 0
    report(
        8,
        ok,
        "bounds %d violations, cutoff %d violations"
        % (rep.total_violations, cw_bad),
    )
    assert ok


def test_criterion_9_expansion_verdict(solved, gamma0_report):
    theta = solved[0].theta
    flat = BoundaryGraph(alpha=(0.0, 0.0, 0.0))
    cap = BoundaryGraph(alpha=(0.05, 0.05, 0.05))
    lams = (2.5, 3.5, 5.0, 7.0, 10.0)
    cfg_flat = MCConfig(batches=2, samples_per_batch=2000, seed=0, max_rel_stderr=1.0)
    cfg = MCConfig(batches=12, samples_per_batch=40_000, seed=0, max_rel_stderr=0.05)

    flat_v = verify_upper_bound(theta, gamma0_report, flat, lams, cfg_flat)
    # the flat kernel sampler only sees the deviation from the flat case,
    # so the flat verdict must reproduce the half-space grid quotient
    flat_ok = all(
        v.measured_stderr == 0.0
        and v.measured_quotient
        == pytest.approx(v.term_breakdown["flat_energy"], rel=1e-12)
        for v in flat_v
    )

    cap_v = verify_upper_bound(theta, gamma0_report, cap, lams, cfg)
    resid = np.array(
        [c.measured_quotient - f.measured_quotient for c, f in zip(cap_v, flat_v)]
    )
    lam = np.array(lams)
    A = np.column_stack([1.0 / lam, lam ** (-2.0 * SIGMA)])
    coef, *_ = np.linalg.lstsq(A, resid, rcond=None)
    fit = A @ coef
    ss_res = float(np.sum((resid - fit) ** 2))
    ss_tot = float(np.sum((resid - resid.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot
    all_pass = all(v.passed for v in cap_v)
    ok = flat_ok and r2 >= 0.95 and all_pass
    report(
        9,
        ok,
        "flat exact %s, cap R2 %.4f, verdicts %s"
        % (flat_ok, r2, [v.passed for v in cap_v]),
    )
    assert ok
