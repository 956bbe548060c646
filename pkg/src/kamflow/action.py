"""Fundamental solution A_t(x,y) by direct minimization of the action.

The minimal action between lift points over a fixed time is computed on
broken-line curves with uniformly spaced knots, midpoint-rule quadrature,
and a damped Newton descent on the interior knots (kinetic-part Hessian,
which is block tridiagonal and SPD).  The cohomology term and the alpha
shift integrate exactly along any curve, so every minimization runs on the
plain Lagrangian and the c-level value is recovered by

    A^c_t(x,y) = A^0_t(x,y) - <c, y-x> + alpha t.

Short-time actions between a node and its near lattice of neighbors are
precomputed into offset tables; these drive the Lax-Oleinik sweeps and the
long-time dynamic programming elsewhere.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import AmbiguousMinimizerError, StepTooSmallError
from .systems import SystemSpec, mat_inv, quad_form

_FD_STEP = 1e-5
_EL_TOL = 1e-8
_AMBIGUITY_RTOL = 1e-9


def t0_estimate(spec: SystemSpec):
    """Safe single-step horizon C1 / (kappa1(1) + C2 + C1), strictly in (0,1)."""
    return spec.C1 / (spec.kappa1(1.0) + spec.C2 + spec.C1)


def knot_count(t):
    return int(max(8, np.ceil(t / 0.01)))


def _potential(spec, pts_flat):
    if spec.v_const is not None:
        return np.full(len(pts_flat), spec.v_const)
    return np.asarray(spec._v_raw(spec.geometry.wrap(pts_flat)), dtype=float) - spec.v_shift


def _kinetic_quad(spec, pts_flat, vels_flat):
    """1/2 <A^{-1}(x)v, v> rowwise."""
    if spec.a_const is not None:
        return 0.5 * np.einsum("ni,ij,nj->n", vels_flat, spec.a_inv_const, vels_flat)
    Ainv = mat_inv(np.asarray(spec._a_raw(spec.geometry.wrap(pts_flat)), dtype=float))
    return 0.5 * quad_form(Ainv, vels_flat)


def _ainv_at(spec, pts_flat):
    if spec.a_const is not None:
        return np.broadcast_to(spec.a_inv_const, (len(pts_flat),) + spec.a_inv_const.shape)
    return mat_inv(np.asarray(spec._a_raw(spec.geometry.wrap(pts_flat)), dtype=float))


def _force(spec, mids_flat, vels_flat):
    """L_x at midpoints: analytic when the system provides it, else central FD."""
    if spec._force_raw is not None:
        return np.asarray(spec._force_raw(spec.geometry.wrap(mids_flat), vels_flat))
    if spec.a_const is not None and spec._v_grad_raw is not None:
        return -np.asarray(spec._v_grad_raw(spec.geometry.wrap(mids_flat)))
    d = spec.geometry.dim
    out = np.zeros_like(mids_flat)
    kinetic_varies = spec.a_const is None
    potential_varies = spec.v_const is None
    for ax in range(d):
        e = np.zeros(d)
        e[ax] = _FD_STEP
        f_p = np.zeros(len(mids_flat))
        f_m = np.zeros(len(mids_flat))
        if kinetic_varies:
            f_p += _kinetic_quad(spec, mids_flat + e, vels_flat)
            f_m += _kinetic_quad(spec, mids_flat - e, vels_flat)
        if potential_varies:
            f_p -= _potential(spec, mids_flat + e)
            f_m -= _potential(spec, mids_flat - e)
        out[:, ax] = (f_p - f_m) / (2 * _FD_STEP)
    return out


def discrete_action(spec, paths, dt):
    """Midpoint-rule action of the plain Lagrangian along (B,K,d) paths."""
    B, K, d = paths.shape
    mids = 0.5 * (paths[:, 1:, :] + paths[:, :-1, :])
    vels = (paths[:, 1:, :] - paths[:, :-1, :]) / dt
    mf = mids.reshape(-1, d)
    seg = _kinetic_quad(spec, mf, vels.reshape(-1, d)) - _potential(spec, mf)
    return dt * seg.reshape(B, K - 1).sum(axis=1)


def _grad_and_hess(spec, paths, dt, want_hess=True):
    """Gradient of the discrete action at interior knots, plus kinetic Hessian blocks."""
    B, K, d = paths.shape
    mids = 0.5 * (paths[:, 1:, :] + paths[:, :-1, :])
    vels = (paths[:, 1:, :] - paths[:, :-1, :]) / dt
    mf = mids.reshape(-1, d)
    vf = vels.reshape(-1, d)
    if spec.a_const is not None:
        Lv = (vf @ spec.a_inv_const.T).reshape(B, K - 1, d)
        Ainv = None
    else:
        Ainv = _ainv_at(spec, mf)
        Lv = np.einsum("nij,nj->ni", Ainv, vf).reshape(B, K - 1, d)
    Lx = _force(spec, mf, vf).reshape(B, K - 1, d)
    grad = 0.5 * dt * (Lx[:, :-1, :] + Lx[:, 1:, :]) + (Lv[:, :-1, :] - Lv[:, 1:, :])
    if not want_hess or spec.a_const is not None:
        return grad, None, None
    Ainv_seg = Ainv.reshape(B, K - 1, d, d)
    diag = (Ainv_seg[:, :-1] + Ainv_seg[:, 1:]) / dt
    off = -Ainv_seg[:, 1:-1] / dt
    return grad, diag, off


def _inv_block(M):
    d = M.shape[-1]
    if d == 1:
        return 1.0 / M
    out = np.empty_like(M)
    a, b, c2, e = M[..., 0, 0], M[..., 0, 1], M[..., 1, 0], M[..., 1, 1]
    det = a * e - b * c2
    out[..., 0, 0] = e / det
    out[..., 0, 1] = -b / det
    out[..., 1, 0] = -c2 / det
    out[..., 1, 1] = a / det
    return out


def solve_block_tridiag(diag, off, rhs):
    """Solve the SPD block-tridiagonal system (symmetric off blocks)."""
    B, M, d, _ = diag.shape
    C = np.empty_like(diag)
    y = np.empty_like(rhs)
    C[:, 0] = diag[:, 0]
    y[:, 0] = rhs[:, 0]
    Cinv = np.empty_like(diag)
    Cinv[:, 0] = _inv_block(C[:, 0])
    for j in range(1, M):
        L = np.einsum("bij,bjk->bik", off[:, j - 1], Cinv[:, j - 1])
        C[:, j] = diag[:, j] - np.einsum("bij,bjk->bik", L, off[:, j - 1])
        Cinv[:, j] = _inv_block(C[:, j])
        y[:, j] = rhs[:, j] - np.einsum("bij,bj->bi", L, y[:, j - 1])
    x = np.empty_like(rhs)
    x[:, M - 1] = np.einsum("bij,bj->bi", Cinv[:, M - 1], y[:, M - 1])
    for j in range(M - 2, -1, -1):
        r = y[:, j] - np.einsum("bij,bj->bi", off[:, j], x[:, j + 1])
        x[:, j] = np.einsum("bij,bj->bi", Cinv[:, j], r)
    return x


def minimize_batch(spec, x0, x1, t, K=None, multistart=True, tol_el=_EL_TOL,
                   max_iter=40):
    """Minimize the discrete plain action for a batch of endpoint pairs.

    Returns dict with knots (B,K,d), action0, el_residual, converged and,
    when multistart is on, the runner-up action for ambiguity detection.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    B, d = x0.shape
    K = knot_count(t) if K is None else K
    dt = t / (K - 1)

    lam = np.linspace(0.0, 1.0, K).reshape(1, K, 1)
    straight = x0[:, None, :] + lam * (x1 - x0)[:, None, :]
    straight[:, 0, :] = x0
    straight[:, -1, :] = x1
    seeds = [straight]
    if multistart:
        bump = 0.5 * np.sin(np.pi * lam)
        if d == 1:
            direction = np.ones((B, 1, 1))
        else:
            chord = x1 - x0
            nrm = np.linalg.norm(chord, axis=1, keepdims=True)
            perp = np.stack([-chord[:, 1], chord[:, 0]], axis=1)
            perp = np.where(nrm > 1e-12, perp / np.maximum(nrm, 1e-12), [[1.0, 0.0]])
            direction = perp[:, None, :]
        seeds.append(straight + bump * direction)
        seeds.append(straight - bump * direction)

    results = []
    for seed in seeds:
        seed = seed.copy()
        seed[:, 0, :] = x0
        seed[:, -1, :] = x1
        results.append(_newton_descent(spec, seed, dt, tol_el, max_iter))

    actions = np.stack([r["action0"] for r in results], axis=0)
    order = np.argsort(actions, axis=0)
    best = order[0]
    pick = np.arange(B)
    knots = np.stack([r["knots"] for r in results], axis=0)[best, pick]
    out = {
        "knots": knots,
        "action0": actions[best, pick],
        "el_residual": np.stack([r["el_residual"] for r in results], axis=0)[best, pick],
        "converged": np.stack([r["converged"] for r in results], axis=0)[best, pick],
        "dt": dt,
    }
    if multistart and len(seeds) > 1:
        second = order[1]
        gap = actions[second, pick] - actions[best, pick]
        sep = np.max(np.abs(knots - np.stack([r["knots"] for r in results], axis=0)[second, pick]),
                     axis=(1, 2))
        out["ambiguous"] = (gap <= _AMBIGUITY_RTOL * np.maximum(1.0, np.abs(actions[best, pick]))) \
            & (sep > 1e-4)
    else:
        out["ambiguous"] = np.zeros(B, dtype=bool)
    return out


def _chain_inverse(M):
    """Inverse of the second-difference matrix tridiag(-1, 2, -1) of size M."""
    T = 2.0 * np.eye(M) - np.eye(M, k=1) - np.eye(M, k=-1)
    return np.linalg.inv(T)


def _newton_descent(spec, paths, dt, tol_el, max_iter):
    B, K, d = paths.shape
    S = discrete_action(spec, paths, dt)
    if K <= 2:
        return {"knots": paths, "action0": S, "el_residual": np.zeros(B),
                "converged": np.ones(B, dtype=bool)}
    const_fast = spec.a_const is not None
    Tinv = _chain_inverse(K - 2) if const_fast else None
    for _ in range(max_iter):
        grad, diag, off = _grad_and_hess(spec, paths, dt)
        el = np.max(np.abs(grad), axis=(1, 2))
        active = el > tol_el
        if not active.any():
            break
        if const_fast:
            # Hessian = (A^{-1}/dt) kron T exactly, so invert in closed form
            Ag = grad @ spec.a_const.T
            step = -dt * np.tensordot(Ag, Tinv, axes=([1], [1])).transpose(0, 2, 1)
        else:
            step = solve_block_tridiag(diag, off, -grad)
        descent = np.einsum("bkd,bkd->b", grad, step)
        alpha = np.ones(B)
        S_new = S.copy()
        need = active.copy()
        for _ in range(10):
            idx = np.nonzero(need)[0]
            trial = paths[idx].copy()
            trial[:, 1:-1, :] += alpha[idx, None, None] * step[idx]
            S_try = discrete_action(spec, trial, dt)
            ok = S_try <= S[idx] + 1e-4 * alpha[idx] * descent[idx]
            S_new[idx[ok]] = S_try[ok]
            need[idx[ok]] = False
            if not need.any():
                break
            alpha[need] *= 0.5
        improved = active & ~need & (S_new < S)
        paths[improved, 1:-1, :] += alpha[improved, None, None] * step[improved]
        S = np.where(improved, S_new, S)
        if not improved.any():
            break
    grad, _, _ = _grad_and_hess(spec, paths, dt, want_hess=False)
    el = np.max(np.abs(grad), axis=(1, 2))
    return {"knots": paths, "action0": S, "el_residual": el,
            "converged": el <= 10 * tol_el}


@dataclass
class MinimizerCurve:
    """A sampled action minimizer with endpoint data at the Legendre level."""

    knots: np.ndarray
    t: float
    action: float
    action0: float
    end_velocity: np.ndarray
    end_momentum: np.ndarray
    el_residual: float
    converged: bool
    ambiguous: bool = False

    @property
    def times(self):
        return np.linspace(0.0, self.t, len(self.knots))


def _finish_curve(spec, knots, t, action0, alpha, el, converged, ambiguous):
    K, d = knots.shape
    dt = t / (K - 1)
    x, y = knots[0], knots[-1]
    # envelope derivative of the discrete value in the endpoint: exact for the
    # discrete problem, so it matches finite differences of A_t to solver tol
    mid = 0.5 * (knots[-2] + knots[-1]).reshape(1, d)
    w = ((knots[-1] - knots[-2]) / dt).reshape(1, d)
    Lx = _force(spec, mid, w)[0]
    Lv = (_ainv_at(spec, mid)[0] @ w[0])
    p0_end = 0.5 * dt * Lx + Lv
    p_end = p0_end - spec.c
    A_y = spec.a_at(y.reshape(1, d))[0]
    v_end = A_y @ p0_end
    value = action0 - float(spec.c @ (y - x)) + alpha * t
    kn = knots[:, 0] if d == 1 else knots
    return value, MinimizerCurve(
        knots=kn, t=t, action=value, action0=float(action0),
        end_velocity=float(v_end[0]) if d == 1 else v_end,
        end_momentum=float(p_end[0]) if d == 1 else p_end,
        el_residual=float(el), converged=bool(converged), ambiguous=bool(ambiguous))


def fundamental_solution(spec: SystemSpec, x, y, t, alpha=0.0, K=None, multistart=True):
    """Minimal action A^c_t(x,y) over broken-line curves, with its minimizer."""
    if t < 1e-6:
        raise StepTooSmallError(f"t={t} below the 1e-6 step floor")
    d = spec.geometry.dim
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, d)
    y = np.atleast_1d(np.asarray(y, dtype=float)).reshape(1, d)
    res = minimize_batch(spec, x, y, t, K=K, multistart=multistart)
    return _finish_curve(spec, res["knots"][0], t, res["action0"][0], alpha,
                         res["el_residual"][0], res["converged"][0], res["ambiguous"][0])


def torus_fundamental_solution(spec: SystemSpec, xc, yc, t, alpha=0.0,
                               translate_window=2, multistart=True):
    """inf over lattice translates of y of A^c_t; returns the minimizing lifts."""
    if t < 1e-6:
        raise StepTooSmallError(f"t={t} below the 1e-6 step floor")
    d = spec.geometry.dim
    x = spec.geometry.wrap(np.atleast_1d(np.asarray(xc, dtype=float)).reshape(1, d))
    y = spec.geometry.wrap(np.atleast_1d(np.asarray(yc, dtype=float)).reshape(1, d))
    rng = np.arange(-translate_window, translate_window + 1, dtype=float)
    if d == 1:
        shifts = rng.reshape(-1, 1)
    else:
        gx, gy = np.meshgrid(rng, rng, indexing="ij")
        shifts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    ys = y + shifts
    xs = np.repeat(x, len(ys), axis=0)
    res = minimize_batch(spec, xs, ys, t, multistart=multistart)
    vals = res["action0"] - ys @ spec.c + float(x[0] @ spec.c) + alpha * t
    j = int(np.argmin(vals))
    value, curve = _finish_curve(spec, res["knots"][j], t, res["action0"][j], alpha,
                                 res["el_residual"][j], res["converged"][j],
                                 res["ambiguous"][j])
    x_lift = x[0, 0] if d == 1 else x[0]
    y_lift = ys[j, 0] if d == 1 else ys[j]
    return value, (x_lift, y_lift), curve


def dy_fundamental_solution(spec: SystemSpec, x, y, t, alpha=0.0, check=True,
                            tol_grad=1e-3):
    """D_y A^c_t(x,y): end momentum of the minimizer, optionally FD-checked."""
    value, curve = fundamental_solution(spec, x, y, t, alpha)
    if curve.ambiguous:
        raise AmbiguousMinimizerError(
            f"multiple minimizers for A_t({x},{y}) at t={t}", candidates=curve)
    p = np.atleast_1d(curve.end_momentum)
    if check:
        d = spec.geometry.dim
        yv = np.atleast_1d(np.asarray(y, dtype=float)).astype(float)
        fd = np.empty(d)
        h = 1e-5
        for ax in range(d):
            e = np.zeros(d)
            e[ax] = h
            vp, _ = fundamental_solution(spec, x, yv + e, t, alpha, multistart=False)
            vm, _ = fundamental_solution(spec, x, yv - e, t, alpha, multistart=False)
            fd[ax] = (vp - vm) / (2 * h)
        if np.max(np.abs(fd - p)) > tol_grad:
            raise AmbiguousMinimizerError(
                f"gradient/finite-difference mismatch {np.max(np.abs(fd - p)):.2e} "
                f"suggests a non-unique minimizer at ({x},{y},t={t})")
    return float(p[0]) if spec.geometry.dim == 1 else p


# -- short-time offset tables -------------------------------------------------

@dataclass
class ActionTable:
    """A^0_t from every node to its lattice of near neighbors.

    values[i, o] is the plain action from node i to node i + offsets[o] (in
    node index units, on the lift).  inv_index maps each offset to its
    negation; axis_neighbors[o, ax, 0/1] indexes the offset one node down/up
    along ax (or -1 when outside the window).
    """

    t: float
    radius: float
    sizes: np.ndarray
    offsets: np.ndarray
    values: np.ndarray
    inv_index: np.ndarray
    axis_neighbors: np.ndarray
    deltas: np.ndarray = field(default=None)

    @property
    def n_offsets(self):
        return len(self.offsets)


def enumerate_offsets(geometry, radius):
    """Integer node offsets within Euclidean distance radius."""
    h = geometry.spacings
    counts = np.ceil(radius / h).astype(int)
    if geometry.dim == 1:
        offs = np.arange(-counts[0], counts[0] + 1).reshape(-1, 1)
    else:
        ax = [np.arange(-c, c + 1) for c in counts]
        gx, gy = np.meshgrid(*ax, indexing="ij")
        offs = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    dist = np.linalg.norm(offs * h, axis=-1)
    offs = offs[dist <= radius + 1e-12]
    # deterministic order: lexicographic
    key = tuple(offs[:, k] for k in reversed(range(geometry.dim)))
    offs = offs[np.lexsort(key)]
    lookup = {tuple(o): i for i, o in enumerate(offs)}
    inv = np.array([lookup[tuple(-o)] for o in offs], dtype=int)
    nbr = np.full((len(offs), geometry.dim, 2), -1, dtype=int)
    for i, o in enumerate(offs):
        for ax_i in range(geometry.dim):
            for s, d in ((0, -1), (1, 1)):
                key2 = list(o)
                key2[ax_i] += d
                nbr[i, ax_i, s] = lookup.get(tuple(key2), -1)
    return offs, inv, nbr


def build_action_table(spec: SystemSpec, t, radius, chunk=2_000_000, K=None):
    """Short-time action table by batched Newton descent, straight seeds.

    The mechanical Lagrangian is even in v, so A_t(x,y) = A_t(y,x); only a
    half-space of offsets is minimized and the rest is filled by symmetry.
    """
    if t < 1e-6:
        raise StepTooSmallError(f"t={t} below the 1e-6 step floor")
    g = spec.geometry
    offs, inv, nbr = enumerate_offsets(g, radius)
    deltas = offs * g.spacings
    nodes = g.nodes()
    n_nodes, n_off = len(nodes), len(offs)
    half = [o for o in range(n_off) if tuple(offs[o]) >= tuple(-offs[o])]
    values = np.empty((n_nodes, n_off))
    step = max(1, chunk // max(1, n_nodes))
    for b0 in range(0, len(half), step):
        block = half[b0:b0 + step]
        starts = np.repeat(nodes, len(block), axis=0)
        ends = starts + np.tile(deltas[block], (n_nodes, 1))
        res = minimize_batch(spec, starts, ends, t, K=K, multistart=False)
        values[:, block] = res["action0"].reshape(n_nodes, len(block))
    shaped = values.reshape(tuple(g.sizes) + (n_off,))
    axes = tuple(range(g.dim))
    for o in half:
        io = inv[o]
        if io != o:
            shaped[..., io] = np.roll(shaped[..., o], tuple(offs[o]), axis=axes)
    return ActionTable(t=float(t), radius=float(radius), sizes=g.sizes.copy(),
                       offsets=offs, values=shaped, inv_index=inv,
                       axis_neighbors=nbr, deltas=deltas)
