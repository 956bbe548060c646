import math

import numpy as np
import pytest

from kamflow.exceptions import BadInputError
from kamflow.twist import (Configuration, advance_orbit, check_conditions,
                           convergents, distance_generating_function,
                           gap_sequence, minimal_periodic_config, rotation_number,
                           standard_family, twist_cohomology)

GOLDEN = (math.sqrt(5) - 1) / 2


def _flat_metric(pts):
    out = np.zeros((len(pts), 2, 2))
    out[:, 0, 0] = 1.0
    out[:, 1, 1] = 1.0
    return out


@pytest.fixture(scope="module")
def flat_gf():
    return distance_generating_function(_flat_metric, resolution=128)


@pytest.fixture(scope="module")
def bump_gf():
    from kamflow.systems import bump_profile

    def metric(pts):
        phi = bump_profile(pts, strength=9.0, width=0.18)
        out = np.zeros((len(pts), 2, 2))
        out[:, 0, 0] = phi ** 2
        out[:, 1, 1] = phi ** 2
        return out

    return distance_generating_function(metric, resolution=96)


def test_conditions_standard_family():
    for k in (0.0, 0.5, 2.0):
        rep = check_conditions(standard_family(k))
        assert rep["periodicity"] <= 1e-10
        assert rep["coercive"]
        assert rep["twist_margin"] > 0


def test_integrable_exact_minimizer():
    gf = standard_family(0.0)
    conf = minimal_periodic_config(gf, 1, 3)
    assert conf.action == pytest.approx(1 / 6, abs=1e-12)
    assert np.max(np.abs(np.diff(conf.x) - 1 / 3)) <= 1e-10
    assert conf.residual <= 1e-9


def test_rotation_exact_on_linear_window():
    conf = Configuration(window=(0, 19), x=0.1 + 0.37 * np.arange(20), rotation=0.37)
    assert rotation_number(conf) == pytest.approx(0.37, abs=1e-13)


def test_rotation_forced_by_constraint():
    gf = standard_family(0.5)
    for (p, q) in ((1, 3), (1, 2), (2, 5)):
        conf = minimal_periodic_config(gf, p, q)
        assert rotation_number(conf) == pytest.approx(p / q, abs=1e-9)


def test_gcd_reduction():
    gf = standard_family(0.5)
    conf = minimal_periodic_config(gf, 2, 4)
    assert (conf.p, conf.q) == (1, 2)


def test_action_matches_bruteforce():
    gf = standard_family(0.5)
    conf = minimal_periodic_config(gf, 1, 2)
    xs = np.arange(0, 1, 1e-3)
    X0, X1 = np.meshgrid(xs, xs, indexing="ij")
    brute = float(np.min(gf.h(X0, X1) + gf.h(X1, X0 + 1)))
    assert conf.action == pytest.approx(brute, abs=1e-4)


def test_orbit_cyclically_ordered():
    gf = standard_family(2.0)
    conf = minimal_periodic_config(gf, 34, 55)
    frac = conf.x[:55] % 1.0
    order = np.argsort(frac)
    # successive orbit points advance by a fixed index stride mod q
    strides = np.diff(np.argsort(order)) % 55
    assert np.all(strides == strides[0])


def test_convergents_golden():
    conv = convergents(GOLDEN, 233)
    assert (34, 55) in conv and (144, 233) in conv
    for p, q in conv[2:]:
        assert abs(p / q - GOLDEN) <= 1.0 / q ** 2


def test_gap_sequence_integrable_constant():
    gf = standard_family(0.0)
    seq = gap_sequence(gf, GOLDEN, (0.1, 0.2), 40,
                       prev=(0.1 - GOLDEN, 0.2 - GOLDEN))
    widths = np.array([b - a for a, b in seq])
    assert np.max(np.abs(widths - 0.1)) <= 1e-9


def test_gap_sequence_partial_sums_and_disjointness():
    gf = standard_family(2.0)
    conf = minimal_periodic_config(gf, 34, 55)
    frac = np.sort(conf.x[:55] % 1.0)
    gaps_all = np.diff(np.concatenate([frac, [frac[0] + 1.0]]))
    j = int(np.argmax(gaps_all))
    x0, y0 = float(frac[j]), float(frac[j] + gaps_all[j])
    seq = gap_sequence(gf, GOLDEN, (x0, y0), 54)
    widths = np.array([b - a for a, b in seq])
    assert np.sum(widths) <= 1.0 + 1e-6
    ivals = sorted((a % 1.0, (a % 1.0) + w) for (a, _), w in zip(seq, widths))
    overlap = 0.0
    for (a1, b1), (a2, b2) in zip(ivals[:-1], ivals[1:]):
        overlap = max(overlap, b1 - a2)
    assert overlap <= 1e-10


def test_gap_sequence_needs_orbit_endpoints():
    gf = standard_family(2.0)
    with pytest.raises(BadInputError):
        gap_sequence(gf, GOLDEN, (0.123456, 0.234567), 5)


def test_orbit_recursion_consistency():
    gf = standard_family(2.0)
    conf = minimal_periodic_config(gf, 34, 55)
    ext = conf.extended()
    mid = len(ext) // 2
    nxt = advance_orbit(gf, ext[mid - 1], ext[mid])
    assert nxt == pytest.approx(ext[mid + 1], abs=1e-6)


def test_flat_distance_matches_hypotenuse(flat_gf):
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, 300)
    y = x + rng.uniform(-1, 1, 300)
    err = np.abs(flat_gf.h(x, y) - np.sqrt(1 + (y - x) ** 2))
    assert err.max() <= 2e-2


def test_distance_gf_conditions(flat_gf):
    rep = check_conditions(flat_gf, n_samples=100)
    assert rep["periodicity"] <= 1e-8
    assert rep["twist_margin"] > 0


def test_distance_gf_symmetry(flat_gf, bump_gf):
    x = np.array([0.1, 0.3, 0.6])
    y = x + np.array([0.2, -0.4, 0.7])
    for gf in (flat_gf, bump_gf):
        assert np.max(np.abs(gf.h(x, y) - gf.h(-x, -y))) <= 1e-6


def test_bump_raises_crossing_cost(flat_gf, bump_gf):
    # crossing the strip at the bump latitude costs strictly more than flat
    h_flat = float(flat_gf.h(0.5, 0.5))
    h_bump = float(bump_gf.h(0.5, 0.5))
    assert h_flat == pytest.approx(1.0, abs=2e-2)
    assert h_bump > h_flat + 0.2


def test_distance_config_residual(flat_gf):
    conf = minimal_periodic_config(flat_gf, 34, 55, multistart=4)
    assert conf.residual <= 1e-4
    assert rotation_number(conf) == pytest.approx(34 / 55, abs=1e-9)


def test_twist_cohomology_flat(flat_gf):
    c, conf = twist_cohomology(flat_gf, GOLDEN)
    expected = np.array([1.0, GOLDEN]) / math.sqrt(1 + GOLDEN ** 2)
    assert np.max(np.abs(c - expected)) <= 2e-2


def test_sing_near_aubry_flat_reports_no_singularities(ctx):
    from kamflow.twist import sing_near_aubry_check
    spec = ctx.system("free", dim=2, grid=64)
    report = sing_near_aubry_check(spec, c=[1.0, 0.0], resolution=64,
                                   solver_kwargs={"tol_fix": 1e-8})
    assert report.note == "no singularities"
    assert report.passed
