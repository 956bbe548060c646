"""The acceptance suite: quantitative checks on closed-form examples.

Each criterion is a function returning a CriterionResult; the CLI report
command and the test suite share these implementations.  Heavy artifacts
(solved fields) are cached in a SuiteContext so criteria can run in any
order without repeating solves.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import aubry as aubry_mod
from . import conley as conley_mod
from . import semiflow as semiflow_mod
from . import superdiff as superdiff_mod
from . import twist as twist_mod
from . import weakkam as weakkam_mod
from .action import fundamental_solution
from .systems import make_system


@dataclass
class CriterionResult:
    cid: int
    name: str
    passed: bool
    details: dict
    runtime: float

    def line(self):
        mark = "PASS" if self.passed else "FAIL"
        return f"criterion {self.cid:2d} [{mark}] {self.name} ({self.runtime:.1f}s)"


class SuiteContext:
    """Lazily solved shared artifacts."""

    def __init__(self):
        self._cache = {}

    def system(self, name, c=None, grid=None, **params):
        key = ("sys", name, tuple(np.atleast_1d(c).tolist()) if c is not None else None,
               grid, tuple(sorted(params.items())))
        if key not in self._cache:
            self._cache[key] = make_system(name, c=c, grid=grid, **params)
        return self._cache[key]

    def solve(self, name, c=None, grid=None, solver=None, **params):
        key = ("solve", name, tuple(np.atleast_1d(c).tolist()) if c is not None else None,
               grid, tuple(sorted(params.items())),
               tuple(sorted((solver or {}).items())))
        if key not in self._cache:
            spec = self.system(name, c=c, grid=grid, **params)
            self._cache[key] = weakkam_mod.solve_cell_problem(spec, **(solver or {}))
        return self._cache[key]

    def pendulum(self):
        return self.solve("pendulum")

    def separable(self):
        return self.solve("separable_pendulum", solver={"tol_fix": 1e-7})


def _hausdorff(a, b, geometry):
    a = np.atleast_2d(np.asarray(a, dtype=float).reshape(len(a), -1))
    b = np.atleast_2d(np.asarray(b, dtype=float).reshape(len(b), -1))
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        return np.inf
    d_ab = max(np.min(np.linalg.norm(geometry.torus_delta(p, b), axis=-1)) for p in a)
    d_ba = max(np.min(np.linalg.norm(geometry.torus_delta(p, a), axis=-1)) for p in b)
    return max(d_ab, d_ba)


def _pendulum_closed_form(n):
    x = np.arange(n) / n
    u = np.where(x <= 0.5, (2 / np.pi) * (1 - np.cos(np.pi * x)),
                 (2 / np.pi) * (1 - np.cos(np.pi * (1 - x))))
    return u - u.max()


def criterion_1(ctx: SuiteContext):
    """Pendulum alpha-transition at c* = 4/pi."""
    t0 = time.time()
    spec = ctx.system("pendulum")
    cstar = 4 / np.pi
    flat = {}
    for c in [0.0, 0.6, 1.0, 1.2, cstar]:
        flat[c] = weakkam_mod.compute_alpha(spec, c=[c])
    pos = {}
    for c in [cstar + 0.05, 1.5, 2.0]:
        pos[c] = weakkam_mod.compute_alpha(spec, c=[c])
    ok_flat = all(abs(a) <= 1e-3 for a in flat.values())
    ok_pos = all(a > 1e-3 for a in pos.values())

    def crosses(c):
        return weakkam_mod.compute_alpha(spec, c=[c]) > 5e-4

    lo, hi = 1.2, 1.35
    for _ in range(5):
        mid = 0.5 * (lo + hi)
        if crosses(mid):
            hi = mid
        else:
            lo = mid
    c_found = 0.5 * (lo + hi)
    ok_bisect = abs(c_found - cstar) <= 1e-2
    rt = time.time() - t0
    passed = ok_flat and ok_pos and ok_bisect and rt <= 120
    return CriterionResult(1, "pendulum alpha transition", passed, {
        "alpha_flat": {f"{c:.4f}": a for c, a in flat.items()},
        "alpha_positive": {f"{c:.4f}": a for c, a in pos.items()},
        "c_star_found": c_found, "c_star_true": cstar,
        "bisection_error": abs(c_found - cstar),
    }, rt)


def criterion_2(ctx: SuiteContext):
    """Pendulum weak KAM solution vs the closed form; Sing and Crit located."""
    t0 = time.time()
    res = ctx.pendulum()
    spec = res.spec
    n = spec.geometry.sizes[0]
    sup_err = float(np.max(np.abs(res.u.values - _pendulum_closed_form(n))))
    comps = superdiff_mod.singular_set(res.u, spec)
    h = 1.0 / n
    sing_pts = [c.cells.ravel() / n for c in comps]
    ok_sing = (len(comps) == 1
               and np.all(np.abs(spec.geometry.torus_delta(0.5, sing_pts[0])) <= h + 1e-12))
    crit = superdiff_mod.critical_set(res.u, spec)
    ok_crit = (len(crit) == 2
               and abs(crit[0] - 0.0) <= h and abs(crit[1] - 0.5) <= h)
    rt = time.time() - t0
    passed = sup_err <= 2e-2 and ok_sing and ok_crit and rt <= 60
    return CriterionResult(2, "pendulum weak KAM solution", passed, {
        "sup_error": sup_err, "critical_points": [float(c) for c in crit],
        "singular_components": [p.tolist() for p in sing_pts],
    }, rt)


def criterion_3(ctx: SuiteContext):
    """Free system: exact parabolic action, quadratic alpha, empty Crit."""
    t0 = time.time()
    spec = ctx.system("free")
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(0, 1)
        y = x + rng.uniform(-1.2, 1.2)
        t = rng.uniform(0.05, 1.0)
        v, _ = fundamental_solution(spec, x, y, t)
        worst = max(worst, abs(v - (y - x) ** 2 / (2 * t)))
    alphas = {c: weakkam_mod.compute_alpha(spec, c=[c]) for c in (0.5, 1.0, 2.0)}
    ok_alpha = all(abs(a - c * c / 2) <= 1e-3 for c, a in alphas.items())
    res = ctx.solve("free", c=[1.0])
    crit = superdiff_mod.critical_set(res.u, res.spec)
    rt = time.time() - t0
    passed = worst <= 1e-6 and ok_alpha and len(crit) == 0
    return CriterionResult(3, "free system exactness", passed, {
        "action_worst_error": worst, "alphas": alphas, "crit_size": len(crit),
    }, rt)


def criterion_4(ctx: SuiteContext):
    """Semiflow identities: monotone v, derivative identity, method agreement."""
    t0 = time.time()
    res = ctx.pendulum()
    spec, u = res.spec, res.u
    mono_ok = True
    runs = [(0.25, 10.0, "intrinsic"), (0.25, 10.0, "selection-ode"),
            (0.05, 5.0, "intrinsic")]
    for x0, T, method in runs:
        traj = semiflow_mod.integrate(spec, u, x0, T, tau=0.01, method=method,
                                      alpha=res.alpha)
        if np.diff(traj.v_values).min() < -1e-6:
            mono_ok = False

    traj = semiflow_mod.integrate(spec, u, 0.25, 0.2, tau=0.005, method="intrinsic",
                                  alpha=res.alpha)
    sel = superdiff_mod.SelectionField(spec, u)
    p = traj.selected_p
    A = spec.a_at(traj.points[:, 0] if spec.geometry.dim == 1 else traj.points)
    qAq = np.einsum("ni,nij,nj->n", p, A, p)
    dv = np.diff(traj.v_values) / traj.tau
    active = np.linalg.norm(p[:-1], axis=-1) > sel.crit_tol
    rel = np.abs(dv[active] - qAq[:-1][active]) / np.maximum(np.abs(qAq[:-1][active]), 1e-12)
    med_rel = float(np.median(rel))

    errs = {}
    for tau in (0.02, 0.01, 0.005):
        y_int = semiflow_mod.flow_points(spec, u, [[0.05]], 0.24, tau,
                                         method="intrinsic", alpha=res.alpha)
        y_sel = semiflow_mod.flow_points(spec, u, [[0.05]], 0.24, tau,
                                         method="selection-ode")
        errs[tau] = float(np.abs(y_int - y_sel).max())
    taus = np.array(sorted(errs))
    ee = np.array([errs[t] for t in taus])
    slope = float(np.polyfit(np.log(taus), np.log(np.maximum(ee, 1e-16)), 1)[0])
    c_fit = float(np.max(ee / taus))
    rt = time.time() - t0
    passed = mono_ok and med_rel <= 0.05 and slope >= 0.9 and np.isfinite(c_fit)
    return CriterionResult(4, "semiflow identity suite", passed, {
        "monotone": mono_ok, "derivative_identity_median_rel": med_rel,
        "method_gap_by_tau": {f"{t:g}": errs[t] for t in errs},
        "order_slope": slope, "C_fit": c_fit,
    }, rt)


def _conley_case(res, window, epsilon, T, cells_per_axis):
    spec, u = res.spec, res.u
    graph = conley_mod.build_chain_graph(spec, u, window, epsilon, T,
                                         cells_per_axis=cells_per_axis,
                                         alpha=res.alpha)
    rec = conley_mod.chain_recurrent_set(graph)
    centers = graph.cell_centers(rec) if rec else np.zeros((0, spec.geometry.dim))
    crit = superdiff_mod.critical_set(u, spec)
    # critical points replicated over the lift window
    reps = []
    d = spec.geometry.dim
    los = [w[0] for w in window]
    his = [w[1] for w in window]
    for p in crit:
        p = np.atleast_1d(p)
        shifts = [np.arange(math.floor(los[a] - 1), math.ceil(his[a]) + 1) for a in range(d)]
        mesh = np.meshgrid(*shifts, indexing="ij")
        cand = p + np.stack([m.ravel() for m in mesh], axis=-1)
        keep = np.all((cand >= np.array(los) - 1e-9) & (cand <= np.array(his) + 1e-9), axis=1)
        reps.extend(cand[keep])
    reps = np.array(reps).reshape(-1, d)
    cell = float(np.max(graph.cell_size()))
    if len(rec) == 0 and len(reps) == 0:
        return True, 0.0, 0
    if len(rec) == 0 or len(reps) == 0:
        return False, np.inf, len(rec)
    d_ab = max(np.min(np.linalg.norm(centers - q, axis=-1)) for q in reps)
    d_ba = max(np.min(np.linalg.norm(reps - q2, axis=-1)) for q2 in centers)
    h = max(d_ab, d_ba)
    return h <= 1.01 * cell, h, len(rec)


def criterion_5(ctx: SuiteContext):
    """Conley identity: chain-recurrent cells match critical cells."""
    t0 = time.time()
    ok1, h1, n1 = _conley_case(ctx.pendulum(), ((0.0, 2.0),), 0.01, 1.0, (128,))
    res_free = ctx.solve("free", c=[1.0])
    g_free = conley_mod.build_chain_graph(res_free.spec, res_free.u, ((0.0, 3.0),),
                                          0.01, 1.0, cells_per_axis=(96,),
                                          alpha=res_free.alpha)
    rec_free = conley_mod.chain_recurrent_set(g_free)
    res_ni = ctx.solve("nearly_integrable", c=[1.0], eps=1e-3)
    g_ni = conley_mod.build_chain_graph(res_ni.spec, res_ni.u, ((0.0, 2.0),),
                                        0.01, 1.0, cells_per_axis=(128,),
                                        alpha=res_ni.alpha)
    rec_ni = conley_mod.chain_recurrent_set(g_ni)
    t2d = time.time()
    res2 = ctx.separable()
    eps2 = 2.1 * math.sqrt(2) / 128
    ok2, h2, n2 = _conley_case(res2, ((0.0, 2.0), (0.0, 2.0)), eps2, 1.0, (64, 64))
    rt2d = time.time() - t2d
    rt = time.time() - t0
    passed = ok1 and ok2 and not rec_free and not rec_ni and rt2d <= 600
    return CriterionResult(5, "Conley recurrent = critical", passed, {
        "pendulum_hausdorff": h1, "pendulum_recurrent_cells": n1,
        "separable_hausdorff": h2, "separable_recurrent_cells": n2,
        "free_recurrent": len(rec_free), "nearly_integrable_recurrent": len(rec_ni),
        "runtime_2d": rt2d,
    }, rt)


def _fixed_point_case(res, samples_per_axis, tau=0.01):
    spec, u = res.spec, res.u
    g = spec.geometry
    d = g.dim
    axes = [np.arange(samples_per_axis) / samples_per_axis for _ in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    ends = semiflow_mod.flow_points(spec, u, pts, 1.0, tau, alpha=res.alpha)
    moved = np.linalg.norm(ends - pts, axis=-1)
    cluster_tol = 3.0 * float(np.max(g.spacings))
    fixed = pts[moved <= cluster_tol]
    crit = np.atleast_2d(np.array(superdiff_mod.critical_set(u, spec),
                                  dtype=float).reshape(-1, d))
    h = _hausdorff(fixed, crit, g)
    return h <= 1.0 / samples_per_axis + 1e-9, float(h), len(fixed)


def criterion_6(ctx: SuiteContext):
    """Fixed points of the time-1 map coincide with the critical cells."""
    t0 = time.time()
    ok1, h1, n1 = _fixed_point_case(ctx.pendulum(), 64)
    ok2, h2, n2 = _fixed_point_case(ctx.separable(), 32)
    rt = time.time() - t0
    return CriterionResult(6, "time-1 fixed points = critical cells", ok1 and ok2, {
        "pendulum_hausdorff": h1, "pendulum_fixed": n1,
        "separable_hausdorff": h2, "separable_fixed": n2,
    }, rt)


def criterion_7(ctx: SuiteContext):
    """Nearly-integrable scaling: Lip(u) ~ sqrt(eps), Crit empty at c=(1,0)."""
    t0 = time.time()
    lips = {}
    crits = {}
    for eps in (1e-4, 1e-3, 1e-2):
        res = ctx.solve("nearly_integrable", c=[1.0, 0.0], eps=eps, dim=2, grid=64,
                        solver={"tol_fix": 1e-7, "max_iter": 4000, "plateau_tol": 3e-4})
        lips[eps] = res.u.lipschitz()
        crits[eps] = len(superdiff_mod.critical_set(res.u, res.spec))
    es = np.array(sorted(lips))
    ls = np.array([lips[e] for e in es])
    s = float(np.polyfit(np.log(es), np.log(ls), 1)[0])
    rt = time.time() - t0
    passed = abs(s - 0.5) <= 0.1 and all(v == 0 for v in crits.values())
    return CriterionResult(7, "nearly-integrable sqrt(eps) scaling", passed, {
        "lipschitz": {f"{e:g}": float(lips[e]) for e in lips},
        "fitted_exponent": s, "crit_sizes": {f"{e:g}": crits[e] for e in crits},
    }, rt)


def criterion_8(ctx: SuiteContext):
    """Peierls barrier values, Aubry set, and the triangle inequality."""
    t0 = time.time()
    res = ctx.pendulum()
    spec, alpha = res.spec, res.alpha
    h00 = aubry_mod.peierls_barrier(spec, 0.0, 0.0, alpha)
    hhh = aubry_mod.peierls_barrier(spec, 0.5, 0.5, alpha)
    aset = aubry_mod.aubry_set(spec, alpha, grid=64)
    ok_aset = len(aset) >= 1 and all(
        np.min(np.abs(spec.geometry.torus_delta(p, np.array([0.0])))) <= 1 / 64 + 1e-12
        for p in aset)
    ctx8 = aubry_mod.get_barrier_context(spec, alpha)
    rng = np.random.default_rng(3)
    n = ctx8.H.shape[0]
    worst = -np.inf
    for _ in range(200):
        i, j, k = rng.integers(0, n, 3)
        worst = max(worst, ctx8.H[i, k] - ctx8.H[i, j] - ctx8.H[j, k])
    rt = time.time() - t0
    passed = (abs(h00) <= 1e-3 and abs(hhh - 4 / np.pi) <= 2e-2 and ok_aset
              and worst <= 2e-3)
    return CriterionResult(8, "Peierls barrier and Aubry set", passed, {
        "h_00": h00, "h_half_half": hhh, "target": 4 / np.pi,
        "aubry_set": [float(p) for p in aset], "triangle_worst": float(worst),
    }, rt)


def criterion_9(ctx: SuiteContext):
    """Window-bounded singular components contain critical cells."""
    t0 = time.time()
    checks = {}
    for label, res in (("pendulum", ctx.pendulum()), ("separable", ctx.separable())):
        spec, u = res.spec, res.u
        comps = superdiff_mod.singular_set(u, spec)
        crit = np.atleast_2d(np.array(superdiff_mod.critical_set(u, spec),
                                      dtype=float).reshape(-1, spec.geometry.dim))
        sizes = spec.geometry.sizes
        all_ok = len(comps) > 0
        for comp in comps:
            if comp.closure_flag:
                continue
            hit = False
            for p in crit:
                idx = np.round(p * sizes).astype(int) % sizes
                if np.any(np.all(np.abs(comp.cells - idx) <= 1, axis=1)) or np.any(
                        np.all(np.abs(comp.cells - idx) >= sizes - 1, axis=1)):
                    hit = True
                    break
            all_ok &= hit
        checks[label] = all_ok
    rt = time.time() - t0
    return CriterionResult(9, "bounded singular components meet Crit",
                           all(checks.values()), checks, rt)


def criterion_10(ctx: SuiteContext):
    """Twist module: exact rotations, oracle action, gap sums, flat distance."""
    t0 = time.time()
    gf0 = twist_mod.standard_family(k=0.0)
    conf_lin = twist_mod.Configuration(window=(0, 19),
                                       x=0.1 + 0.37 * np.arange(20), rotation=0.37)
    rot_exact = abs(twist_mod.rotation_number(conf_lin) - 0.37) <= 1e-12
    conf13 = twist_mod.minimal_periodic_config(gf0, 1, 3)
    rot13 = abs(twist_mod.rotation_number(conf13) - 1 / 3) <= 1e-9

    gf = twist_mod.standard_family(k=0.5)
    conf12 = twist_mod.minimal_periodic_config(gf, 1, 2)
    xs = np.arange(0, 1, 1e-3)
    X0, X1 = np.meshgrid(xs, xs, indexing="ij")
    brute = float(np.min(gf.h(X0, X1) + gf.h(X1, X0 + 1)))
    act_ok = abs(conf12.action - brute) <= 1e-4

    gf2 = twist_mod.standard_family(k=2.0)
    conf = twist_mod.minimal_periodic_config(gf2, 34, 55)
    frac = np.sort(conf.x[:55] % 1.0)
    gaps_all = np.diff(np.concatenate([frac, [frac[0] + 1.0]]))
    j = int(np.argmax(gaps_all))
    x0, y0 = float(frac[j]), float(frac[j] + gaps_all[j])
    seq = twist_mod.gap_sequence(gf2, (math.sqrt(5) - 1) / 2, (x0, y0), 54)
    widths = np.array([b - a for a, b in seq])
    gap_ok = float(np.sum(widths)) <= 1.0 + 1e-6

    def flat(pts):
        out = np.zeros((len(pts), 2, 2))
        out[:, 0, 0] = 1.0
        out[:, 1, 1] = 1.0
        return out

    gfd = twist_mod.distance_generating_function(flat, resolution=256)
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 1, 400)
    y = x + rng.uniform(-1, 1, 400)
    flat_err = float(np.max(np.abs(gfd.h(x, y) - np.sqrt(1 + (y - x) ** 2))))
    rt = time.time() - t0
    passed = rot_exact and rot13 and act_ok and gap_ok and flat_err <= 2e-2
    return CriterionResult(10, "twist suite", passed, {
        "rotation_exact": rot_exact, "rotation_13": rot13,
        "action_vs_bruteforce": abs(conf12.action - brute),
        "gap_partial_sum": float(np.sum(widths)), "flat_distance_error": flat_err,
    }, rt)


def criterion_11(ctx: SuiteContext):
    """Bump-metric end-to-end: Sing(u_c) approaches the minimal-set proxy."""
    t0 = time.time()
    spec = ctx.system("bump_metric", grid=128)
    report = twist_mod.sing_near_aubry_check(
        spec, epsilon=0.05, resolution=128,
        solver_kwargs={"tol_fix": 1e-6, "max_iter": 6000, "plateau_tol": 3e-4})
    rt = time.time() - t0
    passed = report.passed and rt <= 1800
    return CriterionResult(11, "singularities near the Aubry proxy", passed, {
        "distance": report.distance, "c": np.asarray(report.c).tolist(),
        "omega": report.omega, "n_singular_cells": report.n_singular_cells,
        "note": report.note,
    }, rt)


ALL_CRITERIA = {i: f for i, f in enumerate(
    [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
     criterion_6, criterion_7, criterion_8, criterion_9, criterion_10,
     criterion_11], start=1)}


def run_suite(ids=None, ctx=None, verbose=True):
    ctx = ctx or SuiteContext()
    ids = sorted(ALL_CRITERIA if ids is None else ids)
    results = []
    for i in ids:
        res = ALL_CRITERIA[i](ctx)
        results.append(res)
        if verbose:
            print(res.line())
    return results
