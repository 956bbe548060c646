"""Grid Conley analysis of the lifted semiflow: chain graphs and recurrence.

Cells of a lift window are connected by an edge i -> j when the time-T image
of one of the cell's samples lands within epsilon of cell j (epsilon is a
constant function here).  Chain-recurrent cells are those on a cycle of this
fattened graph: a nontrivial strongly connected component or a self-loop.
Images leaving the window feed a virtual outflow sink, which has no outgoing
edges and therefore never lies on a cycle.
"""

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .exceptions import BadInputError
from .fields import ScalarField
from .semiflow import default_step, flow_points, lift_value
from .superdiff import critical_set
from .systems import SystemSpec


@dataclass
class ChainGraph:
    """Directed cell graph of epsilon-fattened time-T transitions."""

    window: tuple               # ((lo, hi),) per axis, lift coordinates
    cells_per_axis: np.ndarray
    epsilon: float
    T: float
    edges: np.ndarray           # (m, 2) int, target == n_cells means outflow
    witness: np.ndarray         # (m,) witnessed landing distance per edge
    n_cells: int

    @property
    def outflow(self):
        return self.n_cells

    def cell_size(self):
        spans = np.array([hi - lo for lo, hi in self.window])
        return spans / self.cells_per_axis

    def cell_centers(self, idx=None):
        dims = len(self.window)
        sizes = self.cells_per_axis
        idx = np.arange(self.n_cells) if idx is None else np.asarray(idx)
        coords = []
        rem = idx
        for ax in range(dims - 1, -1, -1):
            coords.append(rem % sizes[ax])
            rem = rem // sizes[ax]
        coords = np.stack(coords[::-1], axis=-1)
        h = self.cell_size()
        lo = np.array([w[0] for w in self.window])
        return lo + (coords + 0.5) * h


def _cell_index(coords, sizes):
    flat = coords[..., 0]
    for ax in range(1, coords.shape[-1]):
        flat = flat * sizes[ax] + coords[..., ax]
    return flat


def build_chain_graph(spec: SystemSpec, u: ScalarField, window, epsilon, T,
                      samples_per_cell=None, cells_per_axis=None, tau=None,
                      method="selection-ode", alpha=0.0) -> ChainGraph:
    """Integrate 3^dim samples per cell for time T and record fattened edges."""
    d = spec.geometry.dim
    window = tuple((float(lo), float(hi)) for lo, hi in window)
    if len(window) != d:
        raise BadInputError("window must give (lo, hi) per axis")
    tau = default_step(spec) if tau is None else tau
    if T < tau:
        raise BadInputError(f"T={T} must be at least tau={tau}")
    h_sol = float(np.max(spec.geometry.spacings))
    if epsilon < 2 * h_sol:
        raise BadInputError(f"epsilon={epsilon} below two solution cells {2*h_sol:.4g}")
    spans = np.array([hi - lo for lo, hi in window])
    if cells_per_axis is None:
        cells_per_axis = np.maximum(4, np.floor(spans / max(epsilon, np.max(spans) / 64)).astype(int))
    else:
        cells_per_axis = np.broadcast_to(np.asarray(cells_per_axis, dtype=int), (d,)).copy()
    h = spans / cells_per_axis
    n_cells = int(np.prod(cells_per_axis))
    lo = np.array([w[0] for w in window])

    # 3^dim corner/center samples per cell
    fracs = np.array([0.0, 0.5, 1.0])
    if d == 1:
        offs = fracs.reshape(-1, 1)
    else:
        fx, fy = np.meshgrid(fracs, fracs, indexing="ij")
        offs = np.stack([fx.ravel(), fy.ravel()], axis=-1)
    if samples_per_cell is not None and samples_per_cell != len(offs):
        raise BadInputError(f"samples_per_cell is fixed at {len(offs)} (corners+center)")

    cell_ids = np.arange(n_cells)
    coords = ChainGraph(window, cells_per_axis, epsilon, T, None, None, n_cells).cell_centers()
    corners = coords[:, None, :] - 0.5 * h + offs[None, :, :] * h
    starts = corners.reshape(-1, d)
    ends = flow_points(spec, u, starts, T, tau, method=method, alpha=alpha)

    src = np.repeat(cell_ids, len(offs))
    inside = np.all((ends >= lo) & (ends <= lo + spans), axis=1)

    edge_map = {}
    out_ends = ends[~inside]
    for i in src[~inside]:
        key = (int(i), n_cells)
        if key not in edge_map:
            edge_map[key] = 0.0
    zin = ends[inside]
    sin = src[inside]
    reach = np.ceil(epsilon / h).astype(int)
    ranges = [np.arange(-r, r + 1) for r in reach]
    if d == 1:
        cand_offs = ranges[0].reshape(-1, 1)
    else:
        cx, cy = np.meshgrid(*ranges, indexing="ij")
        cand_offs = np.stack([cx.ravel(), cy.ravel()], axis=-1)
    base = np.floor((zin - lo) / h).astype(int)
    for off in cand_offs:
        cc = base + off
        ok = np.all((cc >= 0) & (cc < cells_per_axis), axis=1)
        if not ok.any():
            continue
        cello = lo + cc * h
        gap = np.maximum(np.maximum(cello - zin, zin - (cello + h)), 0.0)
        dist = np.linalg.norm(gap, axis=-1)
        hit = ok & (dist <= epsilon)
        tgt = _cell_index(cc[hit], cells_per_axis)
        for s, t, dd in zip(sin[hit], tgt, dist[hit]):
            key = (int(s), int(t))
            cur = edge_map.get(key)
            if cur is None or dd < cur:
                edge_map[key] = float(dd)

    keys = sorted(edge_map)
    edges = np.array(keys, dtype=int).reshape(-1, 2)
    witness = np.array([edge_map[k] for k in keys])
    return ChainGraph(window, cells_per_axis, epsilon, T, edges, witness, n_cells)


def chain_recurrent_set(graph: ChainGraph):
    """Cells on a cycle of the fattened graph (nontrivial SCC or self-loop)."""
    e = graph.edges
    mask = e[:, 1] < graph.n_cells
    rows, cols = e[mask, 0], e[mask, 1]
    loops = set(map(int, rows[rows == cols]))
    data = np.ones(len(rows))
    adj = csr_matrix((data, (rows, cols)), shape=(graph.n_cells, graph.n_cells))
    n_comp, labels = connected_components(adj, directed=True, connection="strong")
    counts = np.bincount(labels, minlength=n_comp)
    recurrent = set(np.nonzero(counts[labels] >= 2)[0].tolist()) | loops
    return sorted(recurrent)


@dataclass
class PreattractorVerdict:
    passed: bool
    flagged_fixed_point: bool
    worst_margin: float
    n_samples: int


def preattractor_check(spec: SystemSpec, u: ScalarField, r, times, alpha=0.0,
                       tau=None, layer=None, samples_per_axis=None):
    """Verify that the superlevel set {v > r} flows into itself.

    Boundary-adjacent samples (|v - r| small) are flowed for each listed time;
    the check passes when every sample starting above level r stays above it.
    A near-fixed sample sitting on the level set flags the critical-value case.
    """
    g = spec.geometry
    d = g.dim
    tau = default_step(spec) if tau is None else tau
    if samples_per_axis is None:
        samples_per_axis = 256 if d == 1 else 64
    axes = [np.arange(samples_per_axis) / samples_per_axis for _ in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    v = lift_value(spec, u, pts)
    if layer is None:
        lip = u.lipschitz() + float(np.linalg.norm(spec.c))
        layer = 2.0 * lip / samples_per_axis
    sel = np.abs(v - r) <= layer
    if not sel.any():
        sel = np.argsort(np.abs(v - r))[:8]
        band = pts[sel]
        v_band = v[sel]
    else:
        band = pts[sel]
        v_band = v[sel]
    above = v_band > r
    worst = np.inf
    flagged = False
    cluster = 3.0 * float(np.max(g.spacings))
    for t in times:
        ends = flow_points(spec, u, band, t, tau, alpha=alpha)
        v_end = lift_value(spec, u, ends)
        moved = np.linalg.norm(ends - band, axis=-1)
        flagged |= bool(np.any((moved <= cluster) & (np.abs(v_band - r) <= layer)))
        if above.any():
            worst = min(worst, float((v_end[above] - r).min()))
    passed = bool(worst > 0) if above.any() else True
    return PreattractorVerdict(passed=passed, flagged_fixed_point=flagged,
                               worst_margin=float(worst if np.isfinite(worst) else 0.0),
                               n_samples=int(len(band)))


def critical_values_histogram(u: ScalarField, spec: SystemSpec, resolution=1e-6):
    """(value, multiplicity) of v at critical points, relative to the least one."""
    pts = critical_set(u, spec)
    if not pts:
        return []
    vals = np.array([lift_value(spec, u, np.atleast_1d(p)) for p in pts], dtype=float)
    vals = vals - vals.min()
    vals = np.sort(vals)
    out = []
    for v in vals:
        if out and abs(v - out[-1][0]) <= resolution:
            out[-1] = (out[-1][0], out[-1][1] + 1)
        else:
            out.append((float(v), 1))
    return out
