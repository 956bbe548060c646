"""Discrete Aubry-Mather machinery for monotone twist maps.

A generating function h(x,y) with h(x+1,y+1) = h(x,y), coercive in y - x and
satisfying the twist (cross-difference) inequality defines minimal
configurations: sequences minimizing every finite segment of sum h(x_i,
x_{i+1}).  Periodic minimal configurations of type (p,q) are computed by
red-black Gauss-Seidel on the stationarity conditions with multistart; gap
sequences advance interval endpoints with the second-order recursion; the
distance generating function realizes h as a shortest-path length across one
period strip of a Riemannian torus metric.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .exceptions import BadInputError, ConvergenceError
from .geometry import TorusGeometry


@dataclass
class GeneratingFunction:
    """h(x,y) with analytic or tabulated-distance backing and partials."""

    kind: str
    h: callable
    d1: callable
    d2: callable
    params: dict = field(default_factory=dict)

    def __call__(self, x, y):
        return self.h(np.asarray(x, dtype=float), np.asarray(y, dtype=float))


def standard_family(k=0.5):
    """h = (y-x)^2/2 + (k/4 pi^2) cos(2 pi x), the kicked-rotor generating function."""
    two_pi = 2 * np.pi

    def h(x, y):
        return 0.5 * (y - x) ** 2 + (k / (4 * np.pi ** 2)) * np.cos(two_pi * x)

    def d1(x, y):
        return -(y - x) - (k / two_pi) * np.sin(two_pi * x)

    def d2(x, y):
        return (y - x)

    return GeneratingFunction("analytic", h, d1, d2, {"k": k})


def check_conditions(gf: GeneratingFunction, n_samples=200, span=4.0, seed=0):
    """Sampled margins for periodicity (h1), coercivity (h2), twist (h3)."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 2, n_samples)
    y = x + rng.uniform(-2, 2, n_samples)
    per = float(np.max(np.abs(gf.h(x + 1, y + 1) - gf.h(x, y))))
    base = gf.h(x, x)
    far_plus = gf.h(x, x + span)
    far_minus = gf.h(x, x - span)
    coercive = bool(np.all(far_plus > base) and np.all(far_minus > base))
    x1 = rng.uniform(0, 1, n_samples)
    x2 = x1 + rng.uniform(0.05, 0.9, n_samples)
    y1 = rng.uniform(0, 1, n_samples)
    y2 = y1 + rng.uniform(0.05, 0.9, n_samples)
    cross = gf.h(x1, y2) + gf.h(x2, y1) - gf.h(x1, y1) - gf.h(x2, y2)
    return {"periodicity": per, "coercive": coercive,
            "twist_margin": float(np.min(cross))}


@dataclass
class Configuration:
    """A finite window of a (periodic) minimal configuration."""

    window: tuple            # (i_lo, i_hi) inclusive index range
    x: np.ndarray            # values x_i for i in the window
    rotation: float
    p: int = None
    q: int = None
    action: float = None
    residual: float = None

    def extended(self, n_periods=1):
        """Periodic extension by (p, q) on both sides."""
        if self.p is None:
            return self.x
        xs = [self.x[:-1] + k * self.p for k in range(-n_periods, n_periods + 1)]
        return np.concatenate(xs + [[self.x[-1] + n_periods * self.p]])


def _stationarity_residual(gf, xs):
    """max |d2 h(x_{i-1}, x_i) + d1 h(x_i, x_{i+1})| over interior points."""
    if len(xs) < 3:
        return 0.0
    mid = gf.d2(xs[:-2], xs[1:-1]) + gf.d1(xs[1:-1], xs[2:])
    return float(np.max(np.abs(mid)))


def _site_newton(gf, left, z, right, rounds=4):
    """Solve d2 h(left, z) + d1 h(z, right) = 0 for z, batched and damped."""
    fd = 1e-6
    for _ in range(rounds):
        g = gf.d2(left, z) + gf.d1(z, right)
        gp = (gf.d2(left, z + fd) + gf.d1(z + fd, right)
              - gf.d2(left, z - fd) - gf.d1(z - fd, right)) / (2 * fd)
        step = np.where(np.abs(gp) > 1e-12, -g / np.where(np.abs(gp) > 1e-12, gp, 1.0), 0.0)
        step = np.clip(step, -0.25, 0.25)
        z = z + step
    return z


def minimal_periodic_config(gf: GeneratingFunction, p: int, q: int,
                            multistart=8, max_sweeps=400, tol=None):
    """Minimize sum_{i<q} h(x_i, x_{i+1}) subject to x_q = x_0 + p.

    Red-black Gauss-Seidel on the stationarity conditions, with multistart
    phase offsets; returns the best run as a Configuration (indices 0..q).
    """
    g = math.gcd(p, q)
    p, q = p // g, q // g
    tol = (1e-9 if gf.kind == "analytic" else 1e-6) if tol is None else tol
    best = None
    for m in range(multistart):
        xs = np.arange(q + 1) * (p / q) + m / multistart
        xs = _relax_config(gf, xs, p, max_sweeps, tol)
        action = float(np.sum(gf.h(xs[:-1], xs[1:])))
        if best is None or action < best[0] - 1e-14:
            best = (action, xs)
    action, xs = best
    res = _periodic_residual(gf, xs, p)
    rotation = p / q
    return Configuration(window=(0, q), x=xs, rotation=rotation, p=p, q=q,
                         action=action, residual=res)


def _periodic_residual(gf, xs, p):
    q = len(xs) - 1
    left = np.concatenate([[xs[q - 1] - p], xs[:-2]])
    right = xs[1:q + 1]
    mid = xs[:q]
    return float(np.max(np.abs(gf.d2(left, mid) + gf.d1(mid, right))))


def _relax_config(gf, xs, p, max_sweeps, tol):
    q = len(xs) - 1
    for sweep in range(max_sweeps):
        for parity in (0, 1):
            idx = np.arange(parity, q, 2)
            left = xs[(idx - 1) % q] - p * (idx == 0)
            right = xs[np.minimum(idx + 1, q)]
            xs[idx] = _site_newton(gf, left, xs[idx], right)
            xs[q] = xs[0] + p
        if sweep % 8 == 7 and _periodic_residual(gf, xs, p) < tol:
            break
    return xs


def rotation_number(config: Configuration):
    """Least-squares slope of x_i against i over the (extended) window."""
    xs = config.extended() if config.q is not None and config.q < 16 else config.x
    if len(xs) < 16:
        xs = config.extended(n_periods=max(1, int(np.ceil(16 / max(len(config.x), 1)))))
    i = np.arange(len(xs), dtype=float)
    i -= i.mean()
    return float(np.dot(i, xs) / np.dot(i, i))


def advance_orbit(gf: GeneratingFunction, x_prev, x_cur):
    """Next point of the configuration recursion:
    solve d1 h(x_cur, z) = -d2 h(x_prev, x_cur) (unique by the twist condition)."""
    target = -gf.d2(np.asarray(x_prev, dtype=float), np.asarray(x_cur, dtype=float))
    z = 2 * np.asarray(x_cur, dtype=float) - np.asarray(x_prev, dtype=float)
    for _ in range(60):
        g = gf.d1(x_cur, z) - target
        fd = 1e-6
        gp = (gf.d1(x_cur, z + fd) - gf.d1(x_cur, z - fd)) / (2 * fd)
        step = np.where(np.abs(gp) > 1e-14, -g / np.where(np.abs(gp) > 1e-14, gp, 1.0), 0.0)
        step = np.clip(step, -0.5, 0.5)
        z = z + step
        if np.max(np.abs(g)) < 1e-12:
            break
    return z


def convergents(omega, q_max=233):
    """Continued-fraction convergents p/q of omega with q <= q_max."""
    a = []
    x = float(omega)
    out = []
    p_prev, q_prev, p_cur, q_cur = 1, 0, int(math.floor(x)), 1
    out.append((p_cur, q_cur))
    frac = x - math.floor(x)
    for _ in range(64):
        if frac < 1e-14:
            break
        x = 1.0 / frac
        a_k = int(math.floor(x))
        frac = x - a_k
        p_next = a_k * p_cur + p_prev
        q_next = a_k * q_cur + q_prev
        if q_next > q_max:
            break
        out.append((p_next, q_next))
        p_prev, q_prev, p_cur, q_cur = p_cur, q_cur, p_next, q_next
    return out


def gap_sequence(gf: GeneratingFunction, omega, interval, iterations,
                 prev=None, q_min=50, q_max=233):
    """Advance both endpoints of a complementary interval under the recursion.

    The endpoints must sit on neighboring minimal configurations; when prev
    is not given they are matched to points of the internal (p,q) minimal
    configuration for the convergent of omega with q >= q_min.
    """
    x0, y0 = float(interval[0]), float(interval[1])
    if prev is None:
        cands = [pq for pq in convergents(omega, q_max) if pq[1] >= q_min]
        if not cands:
            raise BadInputError(f"no convergent of {omega} with q >= {q_min}")
        p, q = cands[0]
        conf = minimal_periodic_config(gf, p, q)
        prev = []
        for e in (x0, y0):
            frac = conf.x[:q] - np.floor(conf.x[:q])
            j = int(np.argmin(np.abs(((frac - e) + 0.5) % 1.0 - 0.5)))
            shift = e - frac[j]
            if min(abs(shift), 1 - abs(shift)) > 1e-5:
                raise BadInputError(
                    f"endpoint {e} is not a point of the internal minimal configuration")
            lift_shift = (conf.x[j] - e)
            prev.append(conf.x[(j - 1) % q] - conf.p * (j == 0) - lift_shift)
        prev = tuple(prev)
    xs = [np.array([x0, y0])]
    cur = np.array([x0, y0])
    before = np.array(prev, dtype=float)
    out = [(x0, y0)]
    for _ in range(iterations):
        nxt = advance_orbit(gf, before, cur)
        before, cur = cur, nxt
        if cur[1] - cur[0] < 1e-12:
            break
        out.append((float(cur[0]), float(cur[1])))
    return out


# -- distance generating function --------------------------------------------

_DIRECTIONS = sorted({(a, b) for a in range(0, 5) for b in range(-4, 5)
                      if (a, b) != (0, 0) and math.gcd(a, abs(b)) == 1 and (a > 0 or b > 0)})


def _metric_sampler(metric, resolution):
    if callable(metric):
        return metric
    arr = np.asarray(metric, dtype=float)
    if arr.ndim != 4:
        raise BadInputError("metric grid must have shape (n, n, 2, 2)")
    n1, n2 = arr.shape[:2]

    def sample(pts):
        w = pts - np.floor(pts)
        i = np.clip(np.round(w[:, 0] * n1).astype(int) % n1, 0, n1 - 1)
        j = np.clip(np.round(w[:, 1] * n2).astype(int) % n2, 0, n2 - 1)
        return arr[i, j]

    return sample


def distance_generating_function(metric, resolution=256, w_max=1.25,
                                 x_margin=0.25, table_points=None):
    """h(x,y) = shortest-path length from (0,x) to (1,y) on the lifted strip.

    The strip [-x_margin, 1+x_margin] x [lo, hi] is discretized at the given
    resolution; edges follow coprime direction vectors up to range 4 with
    Simpson-sampled Riemannian lengths sqrt(<M(p) t, t>), and a Dijkstra pass
    per source column tabulates h for |y - x| <= w_max.
    """
    sampler = _metric_sampler(metric, resolution)
    hstep = 1.0 / resolution
    s_lo, s_hi = -x_margin, 1.0 + x_margin
    ns = int(round((s_hi - s_lo) / hstep)) + 1
    y_lo, y_hi = -w_max - 0.5, 1.0 + w_max + 0.5
    ny = int(round((y_hi - y_lo) / hstep)) + 1
    si = np.arange(ns) * hstep + s_lo
    yi = np.arange(ny) * hstep + y_lo

    def node_id(a, b):
        return a * ny + b

    rows, cols, weights = [], [], []
    gs, gy = np.meshgrid(np.arange(ns), np.arange(ny), indexing="ij")
    base = np.stack([si[gs.ravel()], yi[gy.ravel()]], axis=-1)
    for (da, db) in _DIRECTIONS:
        ok = (gs + da < ns) & (gy + db >= 0) & (gy + db < ny)
        a0 = gs[ok].ravel()
        b0 = gy[ok].ravel()
        pa = np.stack([si[a0], yi[b0]], axis=-1)
        pb = np.stack([si[a0 + da], yi[b0 + db]], axis=-1)
        tvec = pb - pa
        mid = 0.5 * (pa + pb)

        def ln(pts):
            M = sampler(pts)
            return np.sqrt(np.einsum("ni,nij,nj->n", tvec, M, tvec))

        wgt = (ln(pa) + 4.0 * ln(mid) + ln(pb)) / 6.0
        rows.append(node_id(a0, b0))
        cols.append(node_id(a0 + da, b0 + db))
        weights.append(wgt)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    weights = np.concatenate(weights)
    graph = csr_matrix((weights, (rows, cols)), shape=(ns * ny, ns * ny))

    x_nodes = np.arange(resolution) / resolution
    src_col = int(round((0.0 - s_lo) / hstep))
    tgt_col = int(round((1.0 - s_lo) / hstep))
    if table_points is None:
        table_points = resolution
    w_nodes = np.linspace(-w_max, w_max, int(round(2 * w_max * resolution)) + 1)
    table = np.empty((len(x_nodes), len(w_nodes)))
    src_ids = []
    for x in x_nodes:
        b = int(round((x - y_lo) / hstep))
        src_ids.append(node_id(src_col, b))
    dist = dijkstra(graph, directed=False, indices=src_ids)
    for i, x in enumerate(x_nodes):
        ys = x + w_nodes
        bs = np.clip(np.round((ys - y_lo) / hstep).astype(int), 0, ny - 1)
        table[i] = dist[i, tgt_col * ny + bs]

    from scipy.interpolate import RectBivariateSpline
    x_ext = np.concatenate([x_nodes - 1.0, x_nodes, x_nodes + 1.0])
    t_ext = np.vstack([table, table, table])
    spl = RectBivariateSpline(x_ext, w_nodes, t_ext, kx=3, ky=3)

    def h(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xw = x - np.floor(x)
        return spl.ev(xw, np.clip(y - x, -w_max, w_max))

    def d1(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xw = x - np.floor(x)
        w = np.clip(y - x, -w_max, w_max)
        return spl.ev(xw, w, dx=1) - spl.ev(xw, w, dy=1)

    def d2(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xw = x - np.floor(x)
        return spl.ev(xw, np.clip(y - x, -w_max, w_max), dy=1)

    return GeneratingFunction("distance-grid", h, d1, d2,
                              {"resolution": resolution, "w_max": w_max})


@dataclass
class SingNearAubryReport:
    passed: bool
    distance: float
    c: np.ndarray
    omega: float
    rotation_proxy: float
    n_singular_cells: int
    note: str = ""


def mean_action_per_step(gf, p, q):
    conf = minimal_periodic_config(gf, p, q)
    return conf.action / conf.q, conf


def twist_cohomology(gf: GeneratingFunction, omega, q_max=233):
    """c = (B - omega B', B') from the minimal mean action B over convergents.

    B(w) is the stable-norm value of direction (1, w); its supporting
    covector at the target rotation gives the cohomology class whose Aubry
    set carries that rotation.
    """
    conv = [pq for pq in convergents(omega, q_max) if pq[1] >= 21]
    if len(conv) < 2:
        raise BadInputError("need at least two convergents with q >= 21")
    (p1, q1), (p2, q2) = conv[-2], conv[-1]
    b1, _ = mean_action_per_step(gf, p1, q1)
    b2, conf2 = mean_action_per_step(gf, p2, q2)
    w1, w2 = p1 / q1, p2 / q2
    bprime = (b2 - b1) / (w2 - w1)
    b_omega = b2 + bprime * (omega - w2)
    return np.array([b_omega - omega * bprime, bprime]), conf2


def sing_near_aubry_check(spec2d, c=None, epsilon=0.05, omega=None,
                          resolution=None, q_max=233, solver_kwargs=None):
    """End-to-end check that Sing(u_c) comes within epsilon of the recurrent
    minimal-set proxy (accumulation points of long minimal configurations).
    """
    from .superdiff import singular_set
    from .weakkam import solve_cell_problem

    if spec2d.geometry.dim != 2:
        raise BadInputError("this check needs a 2D geodesic-type system")
    omega = float(omega if omega is not None else (math.sqrt(5) - 1) / 2)
    resolution = resolution or int(spec2d.geometry.sizes[0])

    nodes = spec2d.geometry.nodes()
    from .systems import mat_inv
    metric_grid = mat_inv(spec2d.a_at(nodes)).reshape(
        tuple(spec2d.geometry.sizes) + (2, 2))
    gf = distance_generating_function(metric_grid, resolution=resolution)

    c_vec, conf = (np.asarray(c, dtype=float), None)if c is not None else (None, None)
    if c_vec is None:
        c_vec, conf = twist_cohomology(gf, omega, q_max=q_max)
    if conf is None:
        _, conf = twist_cohomology(gf, omega, q_max=q_max)

    kwargs = dict(solver_kwargs or {})
    res = solve_cell_problem(spec2d, c=c_vec, **kwargs)
    comps = singular_set(res.u, spec2d)
    n_sing = sum(len(cmp.cells) for cmp in comps)
    proxy = np.stack([np.zeros(conf.q), (conf.x[:conf.q] - np.floor(conf.x[:conf.q]))],
                     axis=-1)
    if n_sing == 0:
        return SingNearAubryReport(passed=True, distance=float("nan"), c=c_vec,
                                   omega=omega, rotation_proxy=conf.rotation,
                                   n_singular_cells=0, note="no singularities")
    g = spec2d.geometry
    cells = np.concatenate([cmp.cells for cmp in comps], axis=0)
    centers = cells * g.spacings
    dmin = np.inf
    for pt in proxy:
        dd = np.linalg.norm(g.torus_delta(pt, centers), axis=-1)
        dmin = min(dmin, float(dd.min()))
    return SingNearAubryReport(passed=bool(dmin <= epsilon), distance=dmin,
                               c=c_vec, omega=omega, rotation_proxy=conf.rotation,
                               n_singular_cells=int(n_sing))
