"""Peierls barrier, projected Aubry set, and calibration diagnostics.

The barrier h(x,y) = liminf_t [A_t(x,y) + alpha t] is estimated by dynamic
programming: a short-time action table is composed by min-plus squaring up to
t = 1, then multiplied out along the arithmetic sequence t_k = k Delta,
keeping the running minimum.  The projected Aubry set is read off the
diagonal, {x : h(x,x) <= tol}; a point is declared calibrated when the value
increments along its backward characteristic match the integrated Lagrangian
over every sub-arc.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .exceptions import BadInputError
from .fields import ScalarField
from .semiflow import integrate, omega_limit
from .superdiff import SelectionField
from .systems import SystemSpec, eval_lagrangian_c
from .weakkam import (_BIG, default_tau, get_action_table, minplus_square,
                      torus_pair_matrix)

_CTX_CACHE = OrderedDict()
_CTX_CACHE_MAX = 3


def minplus_product(A, B, refine=True, chunk_rows=64):
    """C[i,j] = min_y A[i,y] + B[y,j] with gated sub-node refinement."""
    from .weakkam import _gated_parabola_correction
    n = A.shape[0]
    BT = np.ascontiguousarray(B.T)
    out = np.empty_like(A)
    for r0 in range(0, n, chunk_rows):
        r1 = min(n, r0 + chunk_rows)
        S = A[r0:r1, None, :] + BT[None, :, :]
        arg = S.argmin(axis=2)

        def at(shift):
            return np.take_along_axis(S, ((arg + shift) % n)[:, :, None], axis=2)[:, :, 0]

        val = np.take_along_axis(S, arg[:, :, None], axis=2)[:, :, 0]
        if refine:
            val = val - _gated_parabola_correction(at(-2), at(-1), val, at(1), at(2))
        out[r0:r1] = val
    np.minimum(out, _BIG, out=out)
    return out


@dataclass
class BarrierTable:
    """Diagonal barrier data along the arithmetic time sequence."""

    times: np.ndarray          # t_k = k * delta
    diag_values: np.ndarray    # (n_times, n_nodes): A_{t_k}(x,x) + alpha t_k
    liminf_estimate: np.ndarray  # running minimum over the tail, per node

    def running_min(self):
        return np.minimum.accumulate(self.diag_values, axis=0)


class BarrierContext:
    """All-pairs barrier estimates on a chosen grid for one (system, c, alpha)."""

    def __init__(self, spec: SystemSpec, alpha, grid=None, t_max=50.0, delta=1.0):
        if t_max < 10:
            raise BadInputError("t_max must be at least 10")
        self.spec = spec if grid is None else spec.regrid(grid)
        self.alpha = float(alpha)
        self.delta = float(delta)
        g = self.spec.geometry
        tau = default_tau(self.spec)
        table = get_action_table(self.spec, tau)
        M = torus_pair_matrix(self.spec, table)
        # compose the dyadic tau up to one time unit
        levels = int(round(math.log2(1.0 / tau)))
        for _ in range(levels):
            M = minplus_square(M)
        unit = M + self.alpha * self.delta
        n_steps = int(round(t_max / self.delta))
        self.times = self.delta * np.arange(1, n_steps + 1)
        diag = [np.diagonal(unit).copy()]
        H = unit.copy()
        B = unit
        for _ in range(1, n_steps):
            B = minplus_product(B, unit)
            np.minimum(H, B, out=H)
            diag.append(np.diagonal(B).copy())
        self.H = H
        self.diag = np.array(diag)
        self.nodes = g.nodes()

    def node_of(self, x):
        return int(self.spec.geometry.node_index(np.asarray(x, dtype=float))[0])

    def barrier(self, x, y):
        return float(self.H[self.node_of(x), self.node_of(y)])

    def diagonal(self):
        return self.diag.min(axis=0)

    def table_for(self, x):
        i = self.node_of(x)
        vals = self.diag[:, i]
        return BarrierTable(times=self.times.copy(), diag_values=vals.reshape(-1, 1),
                            liminf_estimate=np.minimum.accumulate(vals).reshape(-1, 1))


def get_barrier_context(spec: SystemSpec, alpha, grid=None, t_max=50.0, delta=1.0):
    key = (spec.content_key(), round(float(alpha), 9), grid, t_max, delta)
    if key in _CTX_CACHE:
        _CTX_CACHE.move_to_end(key)
        return _CTX_CACHE[key]
    ctx = BarrierContext(spec, alpha, grid=grid, t_max=t_max, delta=delta)
    _CTX_CACHE[key] = ctx
    while len(_CTX_CACHE) > _CTX_CACHE_MAX:
        _CTX_CACHE.popitem(last=False)
    return ctx


def peierls_barrier(spec: SystemSpec, x, y, alpha, t_max=50.0, grid=None):
    """min over t_k in {1, 1+Delta, ..., t_max} of A_{t_k}(x,y) + alpha t_k."""
    ctx = get_barrier_context(spec, alpha, grid=grid, t_max=t_max)
    return ctx.barrier(x, y)


def aubry_set(spec: SystemSpec, alpha, grid, t_max=50.0, tol_aubry=1e-3,
              dp_grid=None):
    """Points of the decision grid whose diagonal barrier is below tolerance."""
    ctx = get_barrier_context(spec, alpha, grid=dp_grid, t_max=t_max)
    g = ctx.spec.geometry
    diag = ctx.diagonal().reshape(tuple(g.sizes))
    stride = np.maximum(g.sizes // np.broadcast_to(np.asarray(grid, dtype=int),
                                                   (g.dim,)), 1)
    if g.dim == 1:
        sub = diag[::stride[0]]
        pts = (np.nonzero(sub <= tol_aubry)[0] * stride[0]) / g.sizes[0]
        return [float(p) for p in np.sort(pts)]
    sub = diag[::stride[0], ::stride[1]]
    ii, jj = np.nonzero(sub <= tol_aubry)
    pts = np.stack([ii * stride[0] / g.sizes[0], jj * stride[1] / g.sizes[1]], axis=-1)
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    return [pts[k] for k in order]


@dataclass
class CalibrationReport:
    residual: float
    truncated: bool
    horizon_reached: float
    endpoint: np.ndarray


def calibration_residual(spec: SystemSpec, u: ScalarField, x, alpha,
                         horizon=10.0, dt=None):
    """Worst sub-arc defect of u against the integrated Lagrangian along the
    backward characteristic from x (smooth cells only; singular entry truncates).
    """
    g = spec.geometry
    d = g.dim
    sel = SelectionField(spec, u)
    dt = min(0.0025, default_tau(spec) / 4) if dt is None else dt
    x = np.asarray(x, dtype=float).reshape(1, d)
    if sel.diameters(g.wrap(x) if d == 2 else g.wrap(x)[:, 0])[0] > sel.sing_tol:
        raise BadInputError("calibration starts must be smooth points")

    def field(pts):
        w = g.wrap(pts)
        grad = u.gradient(w if d == 2 else w[:, 0])
        q = np.atleast_2d(grad).reshape(-1, d) + spec.c
        A = spec.a_at(w)
        return -np.einsum("nij,nj->ni", A, q)

    n_steps = int(round(horizon / dt))
    knots = [x[0].copy()]
    truncated = False
    cur = x.copy()
    for _ in range(n_steps):
        k1 = field(cur)
        k2 = field(cur + 0.5 * dt * k1)
        k3 = field(cur + 0.5 * dt * k2)
        k4 = field(cur + dt * k3)
        nxt = cur + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        w = g.wrap(nxt)
        if sel.diameters(w if d == 2 else w[:, 0])[0] > sel.sing_tol:
            truncated = True
            break
        cur = nxt
        knots.append(cur[0].copy())
    ys = np.array(knots[::-1])            # forward order, gamma(-T) .. gamma(0)=x
    w = g.wrap(ys)
    uy = np.atleast_1d(u(w if d == 2 else w[:, 0]))
    grad = np.atleast_2d(u.gradient(w if d == 2 else w[:, 0])).reshape(-1, d)
    q = grad + spec.c
    A = spec.a_at(w)
    vel = np.einsum("nij,nj->ni", A, q)
    lag = eval_lagrangian_c(spec, w, vel, alpha)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * dt * (lag[1:] + lag[:-1]))])
    defect = (uy - uy[0]) - cum
    residual = float(defect.max() - defect.min())
    return CalibrationReport(residual=residual, truncated=truncated,
                             horizon_reached=dt * (len(ys) - 1), endpoint=ys[0])


@dataclass
class SingToAubryReport:
    distances: list
    omega_kinds: list
    min_distance: float
    median_distance: float


def sing_to_aubry_distance(spec: SystemSpec, u: ScalarField, alpha, starts,
                           horizon=20.0, tau=None, aubry_grid=32,
                           method="selection-ode", t_max=50.0, tol_aubry=1e-3,
                           dp_grid=None):
    """Distance from each singular start's omega-limit support to the Aubry set."""
    targets = aubry_set(spec, alpha, aubry_grid, t_max=t_max, tol_aubry=tol_aubry,
                        dp_grid=dp_grid)
    tgt = np.atleast_2d(np.array(targets, dtype=float).reshape(len(targets), -1))
    dists = []
    kinds = []
    g = spec.geometry
    for s in starts:
        traj = integrate(spec, u, s, horizon, tau=tau, method=method, alpha=alpha)
        rep = omega_limit(traj)
        kinds.append(rep.kind)
        support = np.atleast_2d(rep.support)
        dmin = np.inf
        for p in support:
            dd = np.linalg.norm(g.torus_delta(p, tgt), axis=-1)
            dmin = min(dmin, float(dd.min()))
        dists.append(dmin)
    return SingToAubryReport(distances=dists, omega_kinds=kinds,
                             min_distance=float(np.min(dists)),
                             median_distance=float(np.median(dists)))
