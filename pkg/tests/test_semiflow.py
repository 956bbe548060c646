import numpy as np
import pytest

from kamflow.exceptions import BadInputError, MonotonicityError
from kamflow.fields import ScalarField
from kamflow.semiflow import (estimate_lam0, flow_points, integrate, omega_limit,
                              step_intrinsic, step_selection_ode)
from kamflow.superdiff import SelectionField
from kamflow.systems import make_system

from oracles import pendulum_flow, pendulum_flow_ivp


def test_stationary_at_kink(pendulum_result):
    u, spec = pendulum_result.u, pendulum_result.spec
    assert step_intrinsic(spec, u, 0.5, 0.01) == pytest.approx(0.5, abs=1e-9)
    assert step_selection_ode(spec, u, 0.5, 0.01) == pytest.approx(0.5, abs=1e-9)


def test_smooth_step_matches_ode_oracle(pendulum_result):
    u, spec = pendulum_result.u, pendulum_result.spec
    target = pendulum_flow_ivp(0.25, 0.01)
    assert target == pytest.approx(pendulum_flow(0.25, 0.01), abs=1e-10)
    y_int = step_intrinsic(spec, u, 0.25, 0.01)
    assert y_int == pytest.approx(target, abs=2e-4)
    y_sel = step_selection_ode(spec, u, 0.25, 0.01)
    assert y_sel == pytest.approx(target, abs=2e-4)


def test_free_drift_exact(free_c1_result):
    u, spec = free_c1_result.u, free_c1_result.spec
    assert step_intrinsic(spec, u, 0.3, 0.01) == pytest.approx(0.31, abs=1e-12)
    assert step_selection_ode(spec, u, 0.3, 0.01) == pytest.approx(0.31, abs=1e-12)


def test_cross_method_second_order(pendulum_result):
    u, spec = pendulum_result.u, pendulum_result.spec
    for tau in (0.02, 0.01):
        a = step_intrinsic(spec, u, 0.25, tau)
        b = step_selection_ode(spec, u, 0.25, tau)
        assert abs(a - b) <= 5.0 * tau ** 2


def test_integrate_pendulum_reaches_kink(pendulum_result):
    u, spec = pendulum_result.u, pendulum_result.spec
    traj = integrate(spec, u, 0.25, 10.0, tau=0.01, method="intrinsic")
    assert abs(traj.points[-1, 0] - 0.5) <= 1e-2
    p_norm = np.linalg.norm(traj.selected_p, axis=-1)
    sel = SelectionField(spec, u)
    dv = np.diff(traj.v_values)
    active = p_norm[:-1] > sel.crit_tol
    assert np.all(dv[active] > 0)          # strictly increasing off Crit
    assert dv.min() >= -1e-9               # never decreasing


def test_integrate_constant_at_critical(pendulum_result):
    u, spec = pendulum_result.u, pendulum_result.spec
    traj = integrate(spec, u, 0.0, 5.0, tau=0.01, method="intrinsic")
    assert np.max(np.abs(traj.lift_points)) <= 1e-12


def test_singularity_persistence_separable(separable_closed_form):
    spec = make_system("separable_pendulum")
    sel = SelectionField(spec, separable_closed_form)
    traj = integrate(spec, separable_closed_form, np.array([0.5, 0.25]), 3.0,
                     tau=0.01, method="selection-ode")
    diams = sel.diameters(traj.points)
    assert np.all(diams > sel.sing_tol)
    # slides along the kink line toward the double kink
    assert abs(traj.points[-1, 0] - 0.5) <= 2 / 128
    assert abs(traj.points[-1, 1] - 0.5) <= 2e-2


def test_monotonicity_error_on_defective_field(pendulum_result):
    # a field with downward jumps is not a weak KAM solution: crossing a jump
    # makes the recorded values decrease, which integrate must reject
    spec = pendulum_result.spec
    x = np.arange(512) / 512
    vals = 0.3 * np.sin(2 * np.pi * x) + 0.05 * np.sign(np.sin(2 * np.pi * 17 * x))
    bad = ScalarField(spec.geometry, vals, "defective")
    with pytest.raises(MonotonicityError):
        integrate(spec, bad, 0.11, 2.0, tau=0.01, method="selection-ode")


def test_omega_stationary(pendulum_result):
    u, spec = pendulum_result.u, pendulum_result.spec
    traj = integrate(spec, u, 0.25, 10.0, tau=0.01, method="intrinsic")
    rep = omega_limit(traj)
    assert rep.kind == "stationary"
    assert np.max(np.abs(rep.support.ravel() - 0.5)) <= 3 / 512


def test_omega_closed_free_2d(ctx):
    res = ctx.solve("free", c=[1.0, 0.0], dim=2, grid=64)
    traj = integrate(res.spec, res.u, np.array([0.2, 0.7]), 14.0, tau=0.01,
                     method="selection-ode")
    rep = omega_limit(traj)
    assert rep.kind == "closed"
    assert rep.period_estimate == pytest.approx(1.0, abs=0.011)


def test_omega_irrational_recurrent(ctx):
    c = [1.0, np.sqrt(2.0)]
    res = ctx.solve("free", c=c, dim=2, grid=64)
    traj = integrate(res.spec, res.u, np.array([0.1, 0.3]), 60.0, tau=0.01,
                     method="selection-ode")
    rep = omega_limit(traj)
    assert rep.kind == "recurrent-unbounded-return"
    # support spreads: cluster count grows with the horizon
    traj_short = integrate(res.spec, res.u, np.array([0.1, 0.3]), 15.0, tau=0.01,
                           method="selection-ode")
    rep_short = omega_limit(traj_short)
    assert len(rep.support) > len(rep_short.support)


def test_omega_needs_enough_samples(pendulum_result):
    u, spec = pendulum_result.u, pendulum_result.spec
    traj = integrate(spec, u, 0.25, 0.05, tau=0.01)
    with pytest.raises(BadInputError):
        omega_limit(traj, burn_in=0.9)


def test_method_swap_stability(pendulum_result):
    u, spec = pendulum_result.u, pendulum_result.spec
    kinds = []
    for method in ("intrinsic", "selection-ode"):
        traj = integrate(spec, u, 0.25, 10.0, tau=0.01, method=method)
        kinds.append(omega_limit(traj).kind)
    assert kinds[0] == kinds[1] == "stationary"


def test_lipschitz_dependence(pendulum_result):
    u, spec = pendulum_result.u, pendulum_result.spec
    rng = np.random.default_rng(3)
    worst = 0.0
    starts = rng.uniform(0.02, 0.98, 50)
    d0 = 1e-3
    a = flow_points(spec, u, starts.reshape(-1, 1), 1.0, 0.01)
    b = flow_points(spec, u, (starts + d0).reshape(-1, 1), 1.0, 0.01)
    ratios = np.abs(a - b).ravel() / d0
    worst = ratios.max()
    assert np.isfinite(worst) and worst <= 1e4


def test_derivative_identity_median(pendulum_result):
    u, spec = pendulum_result.u, pendulum_result.spec
    traj = integrate(spec, u, 0.25, 0.2, tau=0.005, method="intrinsic")
    sel = SelectionField(spec, u)
    p = traj.selected_p
    A = spec.a_at(traj.points[:, 0])
    qAq = np.einsum("ni,nij,nj->n", p, A, p)
    dv = np.diff(traj.v_values) / traj.tau
    active = np.linalg.norm(p[:-1], axis=-1) > sel.crit_tol
    rel = np.abs(dv[active] - qAq[:-1][active]) / np.maximum(np.abs(qAq[:-1][active]), 1e-12)
    assert np.median(rel) <= 0.05


def test_lam0_estimate(pendulum_result):
    u, spec = pendulum_result.u, pendulum_result.spec
    lam0 = estimate_lam0(spec, u, 0.01)
    assert 1.5 <= lam0 <= 2.5
