import numpy as np
import pytest

from kamflow.action import (build_action_table, discrete_action, dy_fundamental_solution,
                            fundamental_solution, knot_count, t0_estimate,
                            torus_fundamental_solution)
from kamflow.exceptions import AmbiguousMinimizerError, StepTooSmallError
from kamflow.geometry import TorusGeometry
from kamflow.systems import SystemSpec, make_system

from oracles import pendulum_u0


@pytest.fixture(scope="module")
def pendulum():
    return make_system("pendulum")


@pytest.fixture(scope="module")
def free():
    return make_system("free")


def test_free_parabolic_action(free):
    v, curve = fundamental_solution(free, 0.0, 0.3, 0.5)
    assert v == pytest.approx(0.09, abs=1e-9)
    assert curve.converged


def test_pendulum_rest_at_maximum(pendulum):
    for t in (0.25, 1.0, 2.0):
        v, curve = fundamental_solution(pendulum, 0.0, 0.0, t)
        assert abs(v) <= 1e-12
        assert curve.el_residual <= 1e-8


def test_kappa1_upper_bound(pendulum):
    # A_t(x,y) <= t kappa1(|y-x|/t); with |y-x| = t the bound is t kappa1(1)
    v, _ = fundamental_solution(pendulum, 0.0, 0.1, 0.1)
    assert v <= 0.1 * 2.5 + 1e-12


def test_minimizer_curve_invariants(pendulum):
    x, y, t = 0.1, 0.42, 0.3
    v, curve = fundamental_solution(pendulum, x, y, t, alpha=0.2)
    assert curve.knots[0] == pytest.approx(x, abs=0)
    assert curve.knots[-1] == pytest.approx(y, abs=0)
    # action self-consistency: recompute the discrete action from the knots
    paths = curve.knots.reshape(1, -1, 1)
    a0 = discrete_action(pendulum, paths, t / (len(curve.knots) - 1))[0]
    shifted = a0 - pendulum.c[0] * (y - x) + 0.2 * t
    assert curve.action == pytest.approx(shifted, abs=1e-12)
    # Legendre consistency of the end momentum
    v_end = curve.end_velocity
    assert curve.end_momentum == pytest.approx(v_end - pendulum.c[0], abs=1e-10)


def test_knot_count_rule():
    assert knot_count(0.05) == 8
    assert knot_count(0.5) == 50


def test_step_too_small(pendulum):
    with pytest.raises(StepTooSmallError):
        fundamental_solution(pendulum, 0.0, 0.1, 1e-8)


def test_torus_lift_selection(pendulum):
    v, (x_lift, y_lift), _ = torus_fundamental_solution(pendulum, 0.9, 0.1, 0.1)
    assert y_lift == pytest.approx(1.1, abs=1e-12)
    assert x_lift == pytest.approx(0.9, abs=1e-12)


def test_torus_matches_direct_for_near_classes(pendulum):
    # with t <= t0 and d([x],[y]) < t the in-domain representatives realize the inf
    t0 = t0_estimate(pendulum)
    x, y, t = 0.40, 0.45, 0.2
    assert t <= t0 + 1e-12 and abs(y - x) < t
    v_torus, _, _ = torus_fundamental_solution(pendulum, x, y, t)
    v_direct, _ = fundamental_solution(pendulum, x, y, t)
    assert v_torus == pytest.approx(v_direct, abs=1e-10)


def test_free_torus_uses_shortest_displacement(free):
    v, _, _ = torus_fundamental_solution(free, 0.9, 0.1, 0.5)
    assert v == pytest.approx(0.2 ** 2 / (2 * 0.5), abs=1e-9)


def test_t0_values(pendulum, free):
    assert t0_estimate(free) == pytest.approx(0.5, abs=1e-12)
    assert t0_estimate(pendulum) == pytest.approx(0.25, abs=1e-9)
    for name in ("free", "pendulum", "separable_pendulum", "nearly_integrable"):
        spec = make_system(name, grid=32 if name == "separable_pendulum" else None)
        assert 0 < t0_estimate(spec) < 1


def test_dy_free(free):
    p = dy_fundamental_solution(free, 0.0, 0.2, 0.5)
    assert p == pytest.approx(0.4, abs=1e-6)


def test_dy_pendulum_rest(pendulum):
    p = dy_fundamental_solution(pendulum, 0.0, 0.0, 0.2)
    assert abs(p) <= 1e-6


def test_dy_matches_finite_differences(pendulum):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        t = rng.uniform(0.05, 0.25)
        x = rng.uniform(0, 1)
        y = x + rng.uniform(-0.8, 0.8) * t
        p = dy_fundamental_solution(pendulum, x, y, t, check=False)
        h = 1e-5
        vp, _ = fundamental_solution(pendulum, x, y + h, t, multistart=False)
        vm, _ = fundamental_solution(pendulum, x, y - h, t, multistart=False)
        worst = max(worst, abs(p - (vp - vm) / (2 * h)))
    assert worst <= 1e-4


def test_lower_bound_and_subadditivity(pendulum):
    rng = np.random.default_rng(5)
    for _ in range(30):
        t = rng.uniform(0.1, 0.5)
        x = rng.uniform(0, 1)
        y = x + rng.uniform(-1, 1)
        v, _ = fundamental_solution(pendulum, x, y, t)
        assert v >= pendulum.C1 * abs(y - x) - t * pendulum.C2 - 1e-9
    for _ in range(20):
        t, s = rng.uniform(0.1, 0.4, 2)
        x, z = rng.uniform(0, 1, 2)
        y = 0.5 * (x + z) + rng.uniform(-0.1, 0.1)
        v_xz, _ = fundamental_solution(pendulum, x, z, t + s)
        v_xy, _ = fundamental_solution(pendulum, x, y, t)
        v_yz, _ = fundamental_solution(pendulum, y, z, s)
        assert v_xz <= v_xy + v_yz + 1e-6


def test_end_velocity_vanishes_linearly(pendulum):
    # closed loops z -> z have end speed O(tau): log-log slope at least 0.9
    taus = np.array([0.2, 0.1, 0.05, 0.025])
    speeds = []
    for t in taus:
        _, curve = fundamental_solution(pendulum, 0.3, 0.3, t)
        speeds.append(abs(curve.end_velocity))
    slope = np.polyfit(np.log(taus), np.log(np.maximum(speeds, 1e-16)), 1)[0]
    assert slope >= 0.9


def test_ambiguity_flag_on_symmetric_detours():
    # crossing a conformal bump head-on: the two mirror detours around it are
    # distinct minimizers of equal action, which must raise the ambiguity flag
    spec = make_system("bump_metric", grid=64)
    with pytest.raises(AmbiguousMinimizerError):
        dy_fundamental_solution(spec, [0.2, 0.5], [0.8, 0.5], 1.0, check=False)


def test_el_residual_reported(pendulum):
    _, curve = fundamental_solution(pendulum, 0.2, 0.6, 0.4)
    assert curve.el_residual <= 1e-7


def test_action_table_symmetry(pendulum):
    table = build_action_table(pendulum.regrid(64), 0.125, 0.25)
    flat = table.values.reshape(64, -1)
    # A(x, x+d) equals A(x+d, x) read through the inverse offset
    for o in range(table.n_offsets):
        io = table.inv_index[o]
        shifted = np.roll(flat[:, io], -table.offsets[o, 0])
        assert np.max(np.abs(flat[:, o] - shifted)) < 1e-12
