import numpy as np
import pytest

from kamflow.aubry import (aubry_set, calibration_residual, get_barrier_context,
                           peierls_barrier, sing_to_aubry_distance)
from kamflow.exceptions import BadInputError
from kamflow.fields import ScalarField
from kamflow.systems import make_system

from oracles import mane_pendulum_half_loop


@pytest.fixture(scope="module")
def pend_ctx(pendulum_result):
    res = pendulum_result
    return get_barrier_context(res.spec, res.alpha)


def test_free_diagonal_vanishes():
    free = make_system("free", grid=64)
    ctx = get_barrier_context(free, 0.0, t_max=12)
    assert np.max(np.abs(ctx.diagonal())) <= 1e-6


def test_free_aubry_is_everything():
    free = make_system("free", grid=64)
    pts = aubry_set(free, 0.0, grid=64, t_max=12)
    assert len(pts) == 64


def test_pendulum_barrier_values(pendulum_result, pend_ctx):
    res = pendulum_result
    h00 = peierls_barrier(res.spec, 0.0, 0.0, res.alpha)
    assert abs(h00) <= 1e-3
    hh = peierls_barrier(res.spec, 0.5, 0.5, res.alpha)
    assert hh == pytest.approx(2 * mane_pendulum_half_loop(), abs=2e-2)
    assert hh == pytest.approx(4 / np.pi, abs=2e-2)
    assert hh > 1.0


def test_barrier_requires_long_horizon(pendulum_result):
    with pytest.raises(BadInputError):
        get_barrier_context(pendulum_result.spec, 0.0, t_max=5)


def test_pendulum_aubry_set(pendulum_result):
    res = pendulum_result
    pts = aubry_set(res.spec, res.alpha, grid=64)
    assert len(pts) == 1
    assert pts[0] == pytest.approx(0.0, abs=1 / 64)


def test_barrier_table_running_min(pendulum_result, pend_ctx):
    table = pend_ctx.table_for(0.5)
    run = table.liminf_estimate.ravel()
    assert np.all(np.diff(run) <= 1e-12)
    assert run[-1] == pytest.approx(4 / np.pi, abs=2e-2)
    assert np.all(np.diff(table.times) == pytest.approx(1.0))


def test_diagonal_lower_bound(pend_ctx):
    assert pend_ctx.diagonal().min() >= -2e-3


def test_triangle_inequality(pend_ctx):
    rng = np.random.default_rng(17)
    n = pend_ctx.H.shape[0]
    for _ in range(200):
        i, j, k = rng.integers(0, n, 3)
        assert pend_ctx.H[i, k] <= pend_ctx.H[i, j] + pend_ctx.H[j, k] + 2e-3


def test_separable_aubry_origin(separable_result):
    res = separable_result
    pts = aubry_set(res.spec, res.alpha, grid=32, dp_grid=32, t_max=20)
    assert len(pts) == 1
    assert np.max(np.abs(res.spec.geometry.torus_delta(pts[0], np.zeros(2)))) <= 1 / 32


def test_calibration_at_rest_point(pendulum_result):
    res = pendulum_result
    rep = calibration_residual(res.spec, res.u, 0.0, res.alpha, horizon=10.0)
    assert rep.residual <= 1e-6
    assert not rep.truncated


def test_calibration_backward_converges(pendulum_result):
    res = pendulum_result
    rep = calibration_residual(res.spec, res.u, 0.25, res.alpha, horizon=10.0)
    assert rep.residual <= 1e-2
    assert np.max(np.abs(rep.endpoint)) <= 1e-2     # backward curve reaches 0
    assert not rep.truncated


def test_calibration_free(free_c1_result):
    res = free_c1_result
    rep = calibration_residual(res.spec, res.u, 0.3, res.alpha, horizon=5.0)
    assert rep.residual <= 1e-6


def test_calibration_rejects_singular_start(pendulum_result):
    res = pendulum_result
    with pytest.raises(BadInputError):
        calibration_residual(res.spec, res.u, 0.5, res.alpha)


def test_calibration_truncates_on_kink_entry(pendulum_result):
    # a semiconvex corner attracts the backward field; entering it truncates
    spec = pendulum_result.spec
    x = np.arange(512) / 512
    vals = 0.25 * np.abs(np.sin(np.pi * (x - 0.3)))
    bad = ScalarField(spec.geometry, vals - vals.max(), "corner")
    rep = calibration_residual(spec, bad, 0.45, 0.0, horizon=8.0)
    assert rep.truncated


def test_aubry_points_are_calibrated(pendulum_result):
    res = pendulum_result
    for p in aubry_set(res.spec, res.alpha, grid=64):
        rep = calibration_residual(res.spec, res.u, p, res.alpha, horizon=10.0)
        assert rep.residual <= 5e-3


def test_sing_to_aubry_pendulum(pendulum_result):
    res = pendulum_result
    report = sing_to_aubry_distance(res.spec, res.u, res.alpha, [0.5],
                                    horizon=10.0, aubry_grid=64)
    assert report.omega_kinds == ["stationary"]
    assert report.min_distance == pytest.approx(0.5, abs=2e-2)


def test_sing_to_aubry_separable(separable_result):
    res = separable_result
    report = sing_to_aubry_distance(res.spec, res.u, res.alpha,
                                    [np.array([0.5, 0.25])], horizon=12.0,
                                    aubry_grid=32, t_max=20, dp_grid=32)
    # the characteristic slides along the singular line to (1/2, 1/2)
    assert report.min_distance == pytest.approx(np.hypot(0.5, 0.5), abs=5e-2)
