"""Superdifferentials of semiconcave fields, singular/critical sets, and the
minimal-energy covector selection.

In 1D the superdifferential at x is the interval [right slope, left slope]
from upwind 3-point stencils; in 2D it is the convex hull of clustered
limiting gradients gathered from the 3x3 node neighborhood (k-means with at
most 4 centers, centers merged below the singularity tolerance).  The
singularity tolerance separates true kinks from interpolation noise:
4 * spacing * (a robust Lipschitz constant of the numerical gradient), with
a small absolute floor so constant fields stay regular.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import BadInputError
from .fields import ScalarField
from .systems import SystemSpec

_SING_FLOOR = 1e-7


def singularity_tolerance(u: ScalarField):
    """4 h Lip(grad u) with a robust (0.9 quantile) gradient Lipschitz bound."""
    g = u.node_gradients()
    jumps = []
    for ax in range(u.geometry.dim):
        h = u.geometry.spacings[ax]
        d = np.abs(np.roll(g, -1, axis=ax) - g) / h
        jumps.append(d.reshape(-1))
    lip = float(np.quantile(np.concatenate(jumps), 0.9))
    h = float(np.max(u.geometry.spacings))
    return max(4.0 * h * lip, _SING_FLOOR)


@dataclass
class ConvexCovectorSet:
    """Approximation of D+ u at a point: an interval (1D) or polygon (2D)."""

    vertices: np.ndarray
    base_point: np.ndarray
    sing_tol: float = _SING_FLOOR

    def diameter(self):
        v = self.vertices
        if len(v) <= 1:
            return 0.0
        d = np.linalg.norm(v[:, None, :] - v[None, :, :], axis=-1)
        return float(d.max())

    def is_singleton(self):
        return self.diameter() <= self.sing_tol

    @property
    def p_plus(self):
        """1D: the right derivative (lower endpoint under semiconcavity)."""
        return float(self.vertices[:, 0].min())

    @property
    def p_minus(self):
        return float(self.vertices[:, 0].max())


@dataclass
class SingularComponent:
    """A face-connected component of singular grid cells."""

    cells: np.ndarray           # (m, dim) integer cell indices
    component_id: int
    closure_flag: bool = False  # True when the closure meets a window boundary
    contains_critical: bool = field(default=False)

    def centers(self, geometry):
        return (self.cells + 0.0) * geometry.spacings


# -- 1D one-sided slopes ------------------------------------------------------

def _one_sided_slopes(u: ScalarField, x):
    """(right slope, left slope) by upwind quadratic stencils, vectorized."""
    n = u.geometry.sizes[0]
    h = 1.0 / n
    vals = u.values
    t = np.asarray(x, dtype=float).reshape(-1) * n
    i0 = np.floor(t + 1e-9).astype(int)
    frac = t - i0
    on_node = frac < 1e-9

    jr = np.where(on_node, i0, i0 + 1)
    xi_r = t - jr
    u0, u1, u2 = vals[jr % n], vals[(jr + 1) % n], vals[(jr + 2) % n]
    s_right = ((u1 - u0) + (xi_r - 0.5) * (u2 - 2 * u1 + u0)) / h

    jl = i0
    xi_l = t - (jl - 2)
    w0, w1, w2 = vals[(jl - 2) % n], vals[(jl - 1) % n], vals[jl % n]
    s_left = ((w1 - w0) + (xi_l - 0.5) * (w2 - 2 * w1 + w0)) / h
    return s_right, s_left


# -- 2D gradient clustering ---------------------------------------------------

_RING = np.array([(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)])


def _gradient_cloud(u: ScalarField, x):
    """Limiting gradients from the 3x3 node neighborhood of each point, (n,9,2)."""
    g = u.node_gradients()
    n1, n2 = u.geometry.sizes
    pts = np.atleast_2d(x)
    base = np.round(pts * [n1, n2]).astype(int)
    ii = (base[:, None, 0] + _RING[None, :, 0]) % n1
    jj = (base[:, None, 1] + _RING[None, :, 1]) % n2
    return g[ii, jj]


def _kmeans_merge(cloud, tol, iters=8):
    """k<=4 clustering of (n,9,2) point clouds, merging centers closer than tol.

    Returns centroids (n,4,2), valid mask (n,4), counts (n,4).
    """
    n = cloud.shape[0]
    rows = np.arange(n)
    cent = np.empty((n, 4, 2))
    cent[:, 0] = cloud[rows, np.argmax(
        np.linalg.norm(cloud - cloud.mean(axis=1, keepdims=True), axis=-1), axis=1)]
    dmin = np.linalg.norm(cloud - cent[:, None, 0], axis=-1)
    for k in range(1, 4):
        cent[:, k] = cloud[rows, np.argmax(dmin, axis=1)]
        dmin = np.minimum(dmin, np.linalg.norm(cloud - cent[:, None, k], axis=-1))
    for _ in range(iters):
        dist = np.linalg.norm(cloud[:, :, None, :] - cent[:, None, :, :], axis=-1)
        assign = dist.argmin(axis=2)
        onehot = assign[..., None] == np.arange(4)
        counts = onehot.sum(axis=1)
        sums = np.einsum("npk,npd->nkd", onehot.astype(float), cloud)
        nz = counts > 0
        cent = np.where(nz[..., None], sums / np.maximum(counts, 1)[..., None], cent)
    # merge centers whose distance is below tol (label propagation on 4 nodes)
    dist_c = np.linalg.norm(cent[:, :, None, :] - cent[:, None, :, :], axis=-1)
    near = (dist_c < tol) & (counts[:, :, None] > 0) & (counts[:, None, :] > 0)
    labels = np.broadcast_to(np.arange(4), (n, 4)).copy()
    labels[counts == 0] = -1
    for _ in range(3):
        lab_mat = np.where(near, labels[:, None, :], 4)
        labels = np.where(labels >= 0, np.minimum(labels, lab_mat.min(axis=2)), -1)
    merged = np.zeros_like(cent)
    mcounts = np.zeros((n, 4))
    for k in range(4):
        sel = (labels == k) & (counts > 0)
        w = np.where(sel, counts, 0).astype(float)
        tot = w.sum(axis=1)
        mcounts[:, k] = tot
        safe = np.maximum(tot, 1.0)
        merged[:, k] = np.einsum("nk,nkd->nd", w, cent) / safe[:, None]
    valid = mcounts > 0
    return merged, valid, mcounts


def _cloud_diameter(cent, valid):
    d = np.linalg.norm(cent[:, :, None, :] - cent[:, None, :, :], axis=-1)
    mask = valid[:, :, None] & valid[:, None, :]
    return np.where(mask, d, 0.0).max(axis=(1, 2))


def _min_quad_over_hull(cands, valid, A):
    """argmin <A q, q> over the convex hull of candidate points, batched.

    The minimizer lies on a vertex or on a segment between two candidates,
    so scanning all pairs is exact.  A is (n,2,2) or a single (2,2).
    """
    n, m, d = cands.shape
    if A.ndim == 2:
        A = np.broadcast_to(A, (n, d, d))
    Aq = np.einsum("nij,nmj->nmi", A, cands)
    val_pts = np.einsum("nmi,nmi->nm", cands, Aq)
    val_pts = np.where(valid, val_pts, np.inf)
    best = val_pts.min(axis=1)
    pick = val_pts.argmin(axis=1)
    q_best = cands[np.arange(n), pick]
    for a in range(m):
        for b in range(a + 1, m):
            ok = valid[:, a] & valid[:, b]
            qa, qb = cands[:, a], cands[:, b]
            dq = qb - qa
            Adq = np.einsum("nij,nj->ni", A, dq)
            denom = np.einsum("ni,ni->n", dq, Adq)
            num = -np.einsum("ni,ni->n", qa, Adq)
            s = np.clip(np.where(denom > 1e-14, num / np.maximum(denom, 1e-14), 0.0), 0.0, 1.0)
            q = qa + s[:, None] * dq
            v = np.einsum("ni,nij,nj->n", q, A, q)
            take = ok & (v < best)
            best = np.where(take, v, best)
            q_best = np.where(take[:, None], q, q_best)
    return q_best, best


class SelectionField:
    """Batched minimal-selection machinery bound to a (system, solution) pair.

    selection(x) returns the full covector q in c + D+ u(x) minimizing
    <A(x) q, q>; velocity(x) returns A(x) q, the right derivative of the
    generalized characteristic.
    """

    def __init__(self, spec: SystemSpec, u: ScalarField, sing_tol=None):
        self.spec = spec
        self.u = u
        self.sing_tol = singularity_tolerance(u) if sing_tol is None else sing_tol
        self.crit_tol = 0.5 * self.sing_tol
        self._near_kink = None

    def _kink_mask(self):
        """Per-node mask of cells near a fat superdifferential, dilated one cell."""
        if self._near_kink is None:
            diam = _diameter_field(self.u, self.spec, self.sing_tol)
            mask = diam > self.sing_tol
            fat = mask.copy()
            for ax in range(mask.ndim):
                fat |= np.roll(mask, 1, axis=ax) | np.roll(mask, -1, axis=ax)
            self._near_kink = fat
        return self._near_kink

    def diameters(self, x):
        if self.spec.geometry.dim == 1:
            s_r, s_l = _one_sided_slopes(self.u, x)
            return np.abs(s_l - s_r)
        cent, valid, _ = _kmeans_merge(_gradient_cloud(self.u, x), self.sing_tol)
        return _cloud_diameter(cent, valid)

    def selection(self, x):
        c = self.spec.c
        if self.spec.geometry.dim == 1:
            pts = np.asarray(x, dtype=float).reshape(-1)
            s_r, s_l = _one_sided_slopes(self.u, pts)
            smooth = np.abs(s_l - s_r) <= self.sing_tol
            lo = np.minimum(s_r, s_l) + c[0]
            hi = np.maximum(s_r, s_l) + c[0]
            q = np.clip(0.0, lo, hi)
            q_smooth = self.u.gradient(pts) + c[0]
            return np.where(smooth, q_smooth, q).reshape(-1, 1)
        pts = np.atleast_2d(x)
        # spline gradients away from kinks; the full hull machinery only near them
        g = self.spec.geometry
        fat = self._kink_mask()
        base = np.round(pts * g.sizes).astype(int) % g.sizes
        slow = fat[base[:, 0], base[:, 1]]
        out = np.empty_like(pts)
        if (~slow).any():
            out[~slow] = np.atleast_2d(self.u.gradient(pts[~slow])) + c
        if slow.any():
            sub = pts[slow]
            cent, valid, _ = _kmeans_merge(_gradient_cloud(self.u, sub), self.sing_tol)
            diam = _cloud_diameter(cent, valid)
            A = self.spec.a_at(sub)
            q, _ = _min_quad_over_hull(cent + c, valid, A)
            q_smooth = np.atleast_2d(self.u.gradient(sub)) + c
            out[slow] = np.where((diam <= self.sing_tol)[:, None], q_smooth, q)
        return out

    def velocity(self, x):
        dim = self.spec.geometry.dim
        q = self.selection(x)
        pts, _ = np.atleast_2d(np.asarray(x, dtype=float)), None
        if dim == 1:
            A = self.spec.a_at(np.asarray(x, dtype=float).reshape(-1))
            return A[:, 0, 0][:, None] * q
        A = self.spec.a_at(np.atleast_2d(x))
        return np.einsum("nij,nj->ni", A, q)


def superdifferential(u: ScalarField, spec: SystemSpec, x) -> ConvexCovectorSet:
    """D+ u at a single point, as an interval (1D) or polygon (2D)."""
    if not np.all(np.isfinite(x)):
        raise BadInputError("non-finite query point")
    tol = singularity_tolerance(u)
    xw = u.geometry.wrap(np.asarray(x, dtype=float))
    if spec.geometry.dim == 1:
        s_r, s_l = _one_sided_slopes(u, xw)
        s_r, s_l = float(s_r[0]), float(s_l[0])
        if abs(s_l - s_r) <= tol:
            verts = np.array([[float(u.gradient(xw))]])
        else:
            verts = np.array([[min(s_r, s_l)], [max(s_r, s_l)]])
        return ConvexCovectorSet(verts, np.atleast_1d(xw), tol)
    cent, valid, _ = _kmeans_merge(_gradient_cloud(u, xw), tol)
    diam = _cloud_diameter(cent, valid)[0]
    if diam <= tol:
        verts = np.atleast_2d(u.gradient(xw))
    else:
        pts = cent[0][valid[0]]
        verts = _convex_hull_2d(pts)
    return ConvexCovectorSet(verts, np.atleast_1d(xw), tol)


def _convex_hull_2d(pts):
    """Convex polygon vertices (CCW) of a small planar point set."""
    pts = np.unique(np.round(pts, 12), axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def half(points):
        out = []
        for p in points:
            while len(out) >= 2 and np.cross(out[-1] - out[-2], p - out[-2]) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(list(pts))
    upper = half(list(pts[::-1]))
    return np.array(lower[:-1] + upper[:-1])


def _diameter_field(u: ScalarField, spec: SystemSpec, tol):
    g = u.geometry
    if g.dim == 1:
        x = g.axes()[0]
        s_r, s_l = _one_sided_slopes(u, x)
        return np.abs(s_l - s_r)
    nodes = g.nodes()
    cent, valid, _ = _kmeans_merge(_gradient_cloud(u, nodes), tol)
    return _cloud_diameter(cent, valid).reshape(tuple(g.sizes))


def singular_set(u: ScalarField, spec: SystemSpec, window=None):
    """Face-connected components of cells where D+ u is not a singleton.

    With window=None connectivity wraps around the torus and no component
    touches a boundary; with a lift window ((lo,hi),...) in cell units the
    closure_flag marks components meeting the window boundary.
    """
    tol = singularity_tolerance(u)
    diam = _diameter_field(u, spec, tol)
    mask = diam > tol
    g = u.geometry
    if g.dim == 1:
        mask = mask.reshape(-1, 1)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    labels, n = ndimage.label(mask, structure=structure)
    # merge labels across the periodic seam
    parent = {k: k for k in range(1, n + 1)}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for ax in range(mask.ndim):
        lo = np.take(labels, 0, axis=ax)
        hi = np.take(labels, -1, axis=ax)
        both = (lo > 0) & (hi > 0)
        for a, b in zip(np.atleast_1d(lo[both]).ravel(), np.atleast_1d(hi[both]).ravel()):
            union(int(a), int(b))

    roots = {}
    comps = []
    idx = np.argwhere(labels > 0)
    lab = labels[labels > 0]
    for cell, l in zip(idx, lab):
        r = find(int(l))
        roots.setdefault(r, []).append(cell[:g.dim])
    for cid, r in enumerate(sorted(roots)):
        cells = np.array(roots[r])
        comps.append(SingularComponent(cells=cells, component_id=cid, closure_flag=False))
    return comps


def critical_set(u: ScalarField, spec: SystemSpec, refine=True):
    """Points where 0 lies in c + D+ u (within crit_tol), refined along axes."""
    g = u.geometry
    tol = singularity_tolerance(u)
    crit_tol = 0.5 * tol
    sel = SelectionField(spec, u, sing_tol=tol)
    nodes = g.nodes()
    q = sel.selection(nodes if g.dim == 2 else nodes[:, 0])
    norm = np.linalg.norm(q, axis=-1)
    mask = norm <= crit_tol
    pts = nodes[mask]
    if len(pts) == 0:
        return []
    # group neighbouring hits and refine each group representative
    groups = _cluster_points(pts, 1.6 * float(np.max(g.spacings)), g)
    out = []
    for grp in groups:
        center = _circular_mean(grp, g)
        if refine:
            center = _refine_critical(u, spec, sel, center, crit_tol)
        center = np.atleast_1d(center)
        center[center > 1.0 - 1e-9] = 0.0
        out.append(center)
    out.sort(key=lambda p: tuple(np.atleast_1d(p)))
    return [p if g.dim == 2 else float(p[0]) for p in out]


def _cluster_points(pts, radius, g):
    """Single-linkage periodic clustering (transitive growth), deterministic."""
    groups = []
    used = np.zeros(len(pts), dtype=bool)
    for i in range(len(pts)):
        if used[i]:
            continue
        member = np.zeros(len(pts), dtype=bool)
        member[i] = True
        frontier = [i]
        while frontier:
            j = frontier.pop()
            d = np.linalg.norm(g.torus_delta(pts[j], pts), axis=-1)
            new = (d <= radius) & ~member & ~used
            for k in np.nonzero(new)[0]:
                member[k] = True
                frontier.append(int(k))
        used |= member
        groups.append(pts[member])
    return groups


def _circular_mean(grp, g):
    ref = grp[0]
    return g.wrap(ref + g.torus_delta(ref, grp).mean(axis=0))


def _refine_critical(u, spec, sel, center, crit_tol):
    """Bisection along each axis on the smooth derivative component, when it
    flips sign; kink-supported criticality keeps the cell-scale location."""
    g = u.geometry
    h = float(np.max(g.spacings))
    x = np.atleast_1d(np.array(center, dtype=float))
    for ax in range(g.dim):
        e = np.zeros(g.dim)
        e[ax] = 1.0

        def deriv(s):
            p = g.wrap(x + s * e)
            grad = np.atleast_1d(u.gradient(p if g.dim == 2 else p[ax if g.dim == 1 else 0]))
            gval = grad if g.dim == 1 else grad[ax]
            return float(gval + spec.c[ax])

        a, b = -h, h
        fa, fb = deriv(a), deriv(b)
        if fa == 0.0 and fb == 0.0:
            continue
        if fa * fb < 0 and sel.diameters(g.wrap(x) if g.dim == 2 else g.wrap(x)[0])[0] <= sel.sing_tol:
            for _ in range(40):
                m = 0.5 * (a + b)
                fm = deriv(m)
                if fa * fm <= 0:
                    b, fb = m, fm
                else:
                    a, fa = m, fm
            x = x + 0.5 * (a + b) * e
    return g.wrap(x)


def minimal_selection(u: ScalarField, spec: SystemSpec, x):
    """argmin of <A(x) q, q> over q in c + D+ u(x)."""
    st = SelectionField(spec, u)
    q = st.selection(np.atleast_2d(x) if spec.geometry.dim == 2 else np.asarray(x, dtype=float).reshape(-1))
    return q[0] if spec.geometry.dim == 2 else float(q[0, 0])


def cell_report(u: ScalarField, spec: SystemSpec):
    """Per-cell rows (x, diameter, is_singular, is_critical, component_id)."""
    g = u.geometry
    tol = singularity_tolerance(u)
    diam = _diameter_field(u, spec, tol).reshape(-1)
    comps = singular_set(u, spec)
    comp_id = np.full(g.n_nodes, -1, dtype=int)
    for comp in comps:
        flat = comp.cells[:, 0]
        if g.dim == 2:
            flat = comp.cells[:, 0] * g.sizes[1] + comp.cells[:, 1]
        comp_id[flat] = comp.component_id
    sel = SelectionField(spec, u, sing_tol=tol)
    nodes = g.nodes()
    q = sel.selection(nodes if g.dim == 2 else nodes[:, 0])
    crit = np.linalg.norm(q, axis=-1) <= sel.crit_tol
    rows = []
    for i, node in enumerate(nodes):
        rows.append(tuple(node) + (diam[i], bool(diam[i] > tol), bool(crit[i]), int(comp_id[i])))
    return rows
