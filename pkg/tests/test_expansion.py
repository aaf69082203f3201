import numpy as np
import pytest

from regsob.errors import (
    CoincidentPoints,
    InvalidParams,
    MissingGamma0,
    OutsideChart,
    UnknownKind,
)
from regsob.expansion import (
    BoundaryGraph,
    ExpansionVerdict,
    MCConfig,
    a1_constant,
    bounds_check,
    build_test_function,
    correction_terms,
    curvature_term,
    cutoff,
    cw_cutoff_check,
    dilate_graph,
    flatten_map,
    graph_height,
    unflatten_map,
    verify_upper_bound,
)
from regsob.field import attach_tail_model, make_grid, synthesize_profile
from regsob.gamma0 import Gamma0Report


@pytest.fixture(scope="module")
def envelope16():
    g = make_grid(4, 16.0, 16, 16, (2.0, 2.0))
    return attach_tail_model(synthesize_profile("envelope", g, 0.75))


def make_report(value):
    return Gamma0Report(
        value=value,
        grid_extrapolation_error=0.1,
        truncation_tail_bound=0.2,
        lambda_schedule=(4.0, 8.0),
        sign_verdict="positive",
        theta_provenance="test",
    )


def test_graph_height_arithmetic():
    bg = BoundaryGraph(alpha=(0.1, 0.1, 0.1))
    assert graph_height(bg, np.array([1.0, 1.0, 1.0])) == pytest.approx(0.15)


def test_graph_validation():
    with pytest.raises(InvalidParams):
        BoundaryGraph(alpha=())
    with pytest.raises(UnknownKind):
        BoundaryGraph(alpha=(0.1,), g_kind="wiggle")
    with pytest.raises(InvalidParams):
        BoundaryGraph(alpha=(0.1,), R0=-1.0)


def test_flatten_identity_and_roundtrip():
    flat = BoundaryGraph(alpha=(0.0, 0.0, 0.0))
    x = np.array([0.5, -0.3, 0.2, 1.0])
    assert np.allclose(flatten_map(flat, x), x)
    bg = BoundaryGraph(alpha=(0.1, -0.05, 0.02), g_kind="quadratic-taper", g_coeffs=(0.03,))
    xi = flatten_map(bg, x)
    assert np.max(np.abs(unflatten_map(bg, xi) - x)) < 1e-15


def test_chart_errors():
    bg = BoundaryGraph(alpha=(0.1, 0.1, 0.1), R0=2.0)
    with pytest.raises(OutsideChart):
        graph_height(bg, np.array([2.0, 1.0, 0.0]))
    with pytest.raises(OutsideChart):
        flatten_map(bg, np.array([1.0, 0.0, 0.0, 0.01]))


def test_corrections_flat_and_equal_heights():
    flat = BoundaryGraph(alpha=(0.0, 0.0, 0.0))
    ct = correction_terms(flat, np.array([0.1, 0.2, 0.3, 0.4]), np.array([0.3, 0.1, 0.2, 0.5]))
    assert ct["B"] == ct["C"] == ct["D"] == 0.0
    assert ct["A_times_kernel"] == 1.0
    bg = BoundaryGraph(alpha=(0.1, 0.1, 0.1))
    ct = correction_terms(bg, np.array([0.1, 0.2, 0.3, 0.4]), np.array([0.3, 0.1, 0.2, 0.4]))
    assert ct["B"] == 0.0
    assert ct["C"] == 0.0
    with pytest.raises(CoincidentPoints):
        correction_terms(bg, np.ones(4), np.ones(4))


def test_a1_minimal_over_interval():
    q = (4 + 1.5) / 2.0
    a = np.linspace(-0.5, 0.5, 200001)
    a = a[a != 0]
    ratio = ((1.0 + a) ** -q - 1.0 + q * a) / a ** 2
    assert a1_constant(4, 0.75) == pytest.approx(ratio.max(), rel=1e-8)


def test_taylor_inequality_random_pairs():
    bg = BoundaryGraph(
        alpha=(0.05, 0.05, 0.05), g_kind="quadratic-taper", g_coeffs=(0.05,)
    )
    rng = np.random.default_rng(7)
    q = (4 + 1.5) / 2.0
    for _ in range(500):
        xi = rng.uniform(-2, 2, 4)
        zeta = rng.uniform(-2, 2, 4)
        xi[-1], zeta[-1] = abs(xi[-1]), abs(zeta[-1])
        ct = correction_terms(bg, xi, zeta)
        rhs = 1.0 - q * ct["B"] + ct["F"]
        assert ct["A_times_kernel"] <= rhs + 1e-12 * abs(rhs)


def test_bounds_check_zero_violations():
    bg = BoundaryGraph(
        alpha=(0.05, 0.05, 0.05), g_kind="quadratic-taper", g_coeffs=(0.05,)
    )
    assert bg.satisfies_smallness()
    rep = bounds_check(bg, sample_count=20000, seed=3)
    assert rep.total_violations == 0
    assert rep.worst_margin_B > 0
    assert rep.worst_margin_C > 0
    assert rep.worst_margin_D > 0


def test_bounds_check_flat_margins_are_full_bounds():
    flat = BoundaryGraph(alpha=(0.0, 0.0, 0.0), epsilon0=0.05, R0=2.0)
    rep = bounds_check(flat, sample_count=500, seed=0)
    assert rep.total_violations == 0
    assert rep.max_abs_E == 0.0


def test_cutoff_shape():
    rho = np.linspace(0, 4, 4001)
    eta = cutoff(rho)
    assert np.all((eta >= 0) & (eta <= 1))
    assert np.all(eta[rho <= 2.0] == 1.0)
    assert np.all(eta[rho >= 3.0] == 0.0)
    # C1 joins: finite-difference slope vanishes at both ends of the ramp
    h = 1e-6
    assert abs(cutoff(2.0 + h) - cutoff(2.0 - h)) / (2 * h) < 1e-5
    assert abs(cutoff(3.0 + h) - cutoff(3.0 - h)) / (2 * h) < 1e-5


def test_test_function_flat_chart(envelope16):
    flat = BoundaryGraph(alpha=(0.0, 0.0, 0.0))
    v = build_test_function(envelope16, 2.0, flat)
    inside = np.array([[0.3, 0.2, 0.1, 0.5]])
    assert v(inside) == pytest.approx(v.flat(inside))
    assert v.flat(np.array([[3.0, 1.0, 0.0, 1.0]])) == 0.0
    with pytest.raises(InvalidParams):
        build_test_function(envelope16, -1.0, flat)


def test_dilate_graph_scaling():
    bg = BoundaryGraph(alpha=(0.1, 0.1, 0.1), g_kind="quadratic-taper", g_coeffs=(0.04,))
    d = dilate_graph(bg, 2.0)
    assert d.curvatures == tuple(a / 2.0 for a in bg.alpha)
    assert d.R0 == 2.0 * bg.R0
    xp = np.array([0.5, 0.2, -0.3])
    assert graph_height(d, 2.0 * xp) == pytest.approx(2.0 * graph_height(bg, xp))


def test_curvature_term_basics(envelope16):
    rep = make_report(5.0)
    with pytest.raises(MissingGamma0):
        curvature_term(envelope16, 4.0, BoundaryGraph(alpha=(0.1,) * 3))
    flat = BoundaryGraph(alpha=(0.0, 0.0, 0.0))
    assert curvature_term(envelope16, 4.0, flat, rep).value == 0.0
    bg = BoundaryGraph(alpha=(0.06, 0.03, 0.03))
    c1 = curvature_term(envelope16, 4.0, bg, rep)
    c2 = curvature_term(envelope16, 8.0, bg, rep)
    assert c1.value == pytest.approx((5.5 / 2.0) * 0.04 * 5.0 / 4.0)
    assert c2.value == pytest.approx(c1.value / 2.0)
    assert float(c1) == c1.value


def test_cw_cutoff_zero_violations(envelope16):
    assert cw_cutoff_check(envelope16, 2.0, sample_count=20000, seed=1) == 0


def test_mc_config_validation():
    with pytest.raises(InvalidParams):
        MCConfig(batches=1)
    with pytest.raises(InvalidParams):
        MCConfig(samples_per_batch=10)


def test_verify_flat_matches_grid_quotient(envelope16):
    flat = BoundaryGraph(alpha=(0.0, 0.0, 0.0))
    rep = make_report(5.0)
    cfg = MCConfig(batches=2, samples_per_batch=2000, seed=0, max_rel_stderr=1.0)
    (v,) = verify_upper_bound(envelope16, rep, flat, (2.0,), cfg)
    assert isinstance(v, ExpansionVerdict)
    # the sampler only sees the deviation from the flat kernel, which is
    # identically zero here
    assert v.measured_stderr == 0.0
    assert v.measured_quotient == pytest.approx(v.term_breakdown["flat_energy"])
    assert v.term_breakdown["curvature_term"] == 0.0
    assert v.term_breakdown["taylor_violations"] == 0
    assert v.passed
    j = v.to_json()
    assert j["pass"] is True
