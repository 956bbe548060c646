import numpy as np
import pytest

from kamflow.conley import (build_chain_graph, chain_recurrent_set,
                            critical_values_histogram, preattractor_check)
from kamflow.exceptions import BadInputError
from kamflow.semiflow import lift_value
from kamflow.superdiff import critical_set
from kamflow.systems import make_system


@pytest.fixture(scope="module")
def pendulum_graph(pendulum_result):
    res = pendulum_result
    return build_chain_graph(res.spec, res.u, ((0.0, 1.0),), 0.01, 1.0,
                             cells_per_axis=(64,), alpha=res.alpha)


def test_edge_directions_pendulum(pendulum_result, pendulum_graph):
    g = pendulum_graph
    centers = g.cell_centers().ravel()
    has_self = {i for i, j in g.edges if i == j}
    near_fixed = {i for i in range(g.n_cells)
                  if min(abs(centers[i]), abs(centers[i] - 0.5), abs(centers[i] - 1)) <= 1 / 64}
    assert near_fixed & has_self
    # interior cells of (0, 1/2) only move right
    for i, j in g.edges:
        if 0.1 < centers[i] < 0.4 and j < g.n_cells:
            assert centers[j] > centers[i]


def test_every_cell_has_outgoing(pendulum_graph):
    sources = set(pendulum_graph.edges[:, 0].tolist())
    assert sources == set(range(pendulum_graph.n_cells))


def test_witness_respects_fattening(pendulum_graph):
    g = pendulum_graph
    cell = float(np.max(g.cell_size()))
    inside = g.edges[:, 1] < g.n_cells
    assert np.all(g.witness[inside] <= g.epsilon + cell + 1e-12)


def test_epsilon_floor_enforced(pendulum_result):
    res = pendulum_result
    with pytest.raises(BadInputError):
        build_chain_graph(res.spec, res.u, ((0.0, 1.0),), 1e-4, 1.0)


def test_recurrent_matches_critical_pendulum(pendulum_result, pendulum_graph):
    rec = chain_recurrent_set(pendulum_graph)
    centers = pendulum_graph.cell_centers(rec).ravel()
    crit = np.array([0.0, 0.5, 1.0])
    cell = float(np.max(pendulum_graph.cell_size()))
    assert len(rec) > 0
    for c in centers:
        assert np.min(np.abs(crit - c)) <= 1.01 * cell
    for c in (0.0, 0.5):
        assert np.min(np.abs(centers - c)) <= 1.01 * cell


def test_free_drift_graph(free_c1_result):
    res = free_c1_result
    g = build_chain_graph(res.spec, res.u, ((0.0, 3.0),), 0.01, 1.0,
                          cells_per_axis=(96,), alpha=res.alpha)
    assert chain_recurrent_set(g) == []
    centers = g.cell_centers().ravel()
    for i, j in g.edges:
        assert i != j
        if j < g.n_cells:
            assert centers[j] > centers[i]
    # terminal cells exit through the outflow sink
    out_sources = {i for i, j in g.edges if j == g.n_cells}
    assert out_sources
    assert max(out_sources) == g.n_cells - 1


def test_nearly_integrable_recurrent_empty(ni_result):
    res = ni_result
    g = build_chain_graph(res.spec, res.u, ((0.0, 2.0),), 0.01, 1.0,
                          cells_per_axis=(128,), alpha=res.alpha)
    assert chain_recurrent_set(g) == []


def test_separable_edges_point_to_cross(separable_closed_form):
    spec = make_system("separable_pendulum")
    g = build_chain_graph(spec, separable_closed_form, ((0.0, 1.0), (0.0, 1.0)),
                          0.025, 0.5, cells_per_axis=(32, 32))
    centers = g.cell_centers()
    moved_closer = 0
    total = 0
    for i, j in g.edges:
        if j >= g.n_cells or i == j:
            continue
        ci, cj = centers[i], centers[j]
        if 0.1 < min(abs(ci[0] - 0.5), abs(ci[1] - 0.5)):
            d_i = min(abs(ci[0] - 0.5), abs(ci[1] - 0.5))
            d_j = min(abs(cj[0] - 0.5), abs(cj[1] - 0.5))
            total += 1
            moved_closer += d_j < d_i + 1e-12
    assert total > 0 and moved_closer / total > 0.95


def test_shrinking_epsilon_monotone(pendulum_result):
    res = pendulum_result
    recs = {}
    for eps in (0.02, 0.01):
        g = build_chain_graph(res.spec, res.u, ((0.0, 1.0),), eps, 1.0,
                              cells_per_axis=(64,), alpha=res.alpha)
        recs[eps] = set(chain_recurrent_set(g))
    assert recs[0.01] <= recs[0.02]


def test_monotone_exclusion(pendulum_result, pendulum_graph):
    # a recurrent cell must own a sample whose T-flow gains at most eps*Lip(v)
    # in value: the recurrence witness is nearly stationary
    from kamflow.semiflow import flow_points
    res = pendulum_result
    g = pendulum_graph
    rec = chain_recurrent_set(g)
    centers = g.cell_centers(rec)
    h = g.cell_size()
    offsets = np.array([-0.5, 0.0, 0.5]).reshape(-1, 1) * h
    lip = res.u.lipschitz() + float(np.linalg.norm(res.spec.c))
    for c in centers:
        samples = c + offsets
        ends = flow_points(res.spec, res.u, samples, g.T, 0.01, alpha=res.alpha)
        dv = lift_value(res.spec, res.u, ends) - lift_value(res.spec, res.u, samples)
        assert dv.min() <= g.epsilon * lip + 1e-9


def test_preattractor_regular_value(pendulum_result):
    res = pendulum_result
    v_min = float(res.u.values.min())
    verdict = preattractor_check(res.spec, res.u, v_min + 1 / np.pi, [0.5, 1.0],
                                 alpha=res.alpha)
    assert verdict.passed and not verdict.flagged_fixed_point
    assert verdict.worst_margin > 0


def test_preattractor_critical_value_flagged(pendulum_result):
    res = pendulum_result
    verdict = preattractor_check(res.spec, res.u, 0.0, [0.5], alpha=res.alpha)
    assert verdict.flagged_fixed_point


def test_preattractor_free_passes(free_c1_result):
    res = free_c1_result
    for r in (0.1, 0.4):
        verdict = preattractor_check(res.spec, res.u, r, [0.5], alpha=res.alpha)
        assert verdict.passed


def test_histogram_pendulum(pendulum_result):
    hist = critical_values_histogram(pendulum_result.u, pendulum_result.spec)
    vals = [v for v, _ in hist]
    assert len(hist) == 2
    assert vals[0] == pytest.approx(0.0, abs=1e-9)
    assert vals[1] == pytest.approx(2 / np.pi, abs=2e-3)


def test_histogram_free_empty(free_c1_result):
    assert critical_values_histogram(free_c1_result.u, free_c1_result.spec) == []


def test_histogram_separable(separable_closed_form):
    spec = make_system("separable_pendulum")
    hist = critical_values_histogram(separable_closed_form, spec)
    vals = [v for v, _ in hist]
    mults = [m for _, m in hist]
    assert len(hist) == 3
    assert vals[0] == pytest.approx(0.0, abs=1e-9)
    assert vals[1] == pytest.approx(2 / np.pi, abs=5e-3)
    assert vals[2] == pytest.approx(4 / np.pi, abs=5e-3)
    assert mults == [1, 2, 1]
