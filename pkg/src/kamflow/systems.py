"""Mechanical Hamiltonians H(x,p) = 1/2 <A(x)p,p> + V(x) on flat tori.

A system is described by a symmetric positive definite matrix field A, a
periodic potential V normalized so max V = 0, a cohomology vector c, and a
set of growth constants obtained by grid maximization (k is fixed at 1,
theta(r) = lam r^2 / 2 with lam the uniform lower eigenvalue bound of
A^{-1}).  Built-in systems live in a registry keyed by name; a tabulated
variant interpolates gridded A and V with periodic splines.
"""

import numpy as np

from .exceptions import BadInputError
from .fields import PeriodicSpline
from .geometry import TorusGeometry, as_points


def mat_apply(A, v):
    """(n,d,d) @ (n,d) -> (n,d)."""
    return np.einsum("nij,nj->ni", A, v)


def quad_form(A, v, w=None):
    """<A v, w> rowwise; w defaults to v."""
    return np.einsum("ni,nij,nj->n", v if w is None else w, A, v)


def mat_inv(A):
    d = A.shape[-1]
    if d == 1:
        return 1.0 / A
    a, b, c2, e = A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1]
    det = a * e - b * c2
    inv = np.empty_like(A)
    inv[:, 0, 0] = e / det
    inv[:, 0, 1] = -b / det
    inv[:, 1, 0] = -c2 / det
    inv[:, 1, 1] = a / det
    return inv


def sym_eig_range(A):
    """(min, max) eigenvalues of symmetric (n,d,d) matrices, d in {1,2}."""
    d = A.shape[-1]
    if d == 1:
        v = A[:, 0, 0]
        return v, v
    a, b, e = A[:, 0, 0], A[:, 0, 1], A[:, 1, 1]
    mid = 0.5 * (a + e)
    rad = np.sqrt((0.5 * (a - e)) ** 2 + b * b)
    return mid - rad, mid + rad


class SystemSpec:
    """A mechanical system on the torus with precomputed growth constants."""

    def __init__(self, geometry: TorusGeometry, a_func, v_func, c=None, name="custom",
                 params=None, alpha=None, v_grad=None, force=None):
        self.geometry = geometry
        self.name = name
        self.params = dict(params or {})
        self._a_raw = a_func
        self._v_raw = v_func
        # optional analytic helpers: v_grad(pts) -> dV, force(pts, vels) -> L_x
        self._v_grad_raw = v_grad
        self._force_raw = force
        dim = geometry.dim
        c = np.zeros(dim) if c is None else np.atleast_1d(np.asarray(c, dtype=float))
        if c.shape != (dim,):
            raise BadInputError(f"c must have shape ({dim},), got {c.shape}")
        self.c = c
        self.alpha = alpha

        nodes = geometry.nodes()
        v_raw = np.asarray(v_func(nodes), dtype=float)
        self.v_shift = float(v_raw.max())
        a_nodes = np.asarray(a_func(nodes), dtype=float)
        lo, hi = sym_eig_range(a_nodes)
        if lo.min() < 1e-10:
            raise BadInputError(
                f"A(x) must be positive definite; min eigenvalue {lo.min():.3e}")
        self.a_min_eig = float(lo.min())
        self.a_max_eig = float(hi.max())
        # lam: uniform lower eigenvalue bound of A^{-1}
        self.lam = 1.0 / self.a_max_eig
        self._check_periodicity()

        self._nodes_v = v_raw - self.v_shift
        self._nodes_ainv_max = 1.0 / lo  # max eig of A^{-1} per node
        # constant-field fast paths for the hot action loops
        self.a_const = a_nodes[0].copy() if np.ptp(a_nodes, axis=0).max() < 1e-14 else None
        self.a_inv_const = mat_inv(a_nodes[:1])[0] if self.a_const is not None else None
        self.v_const = float(self._nodes_v[0]) if np.ptp(self._nodes_v) < 1e-14 else None
        self.c0 = max(0.0, float(self._nodes_v.max()))
        self.k_growth = 1.0
        self.theta_star_k = self.k_growth ** 2 / (2.0 * self.lam)
        self.C1 = self.k_growth
        self.C2 = self.theta_star_k + self.c0

    def _check_periodicity(self):
        g = self.geometry
        probes = np.linspace(0.0, 1.0, 7)[:-1]
        if g.dim == 1:
            base = probes.reshape(-1, 1)
            shift = base + np.array([[1.0]])
        else:
            base = np.stack([probes, probes[::-1]], axis=-1)
            shift = base + np.array([[1.0, 1.0]])
        for f, tag in ((self._v_raw, "V"), (self._a_raw, "A")):
            d = np.max(np.abs(np.asarray(f(base)) - np.asarray(f(shift))))
            if d > 1e-12:
                raise BadInputError(f"{tag} is not 1-periodic (seam mismatch {d:.2e})")

    # -- evaluation ---------------------------------------------------------
    def a_at(self, x):
        pts, single = as_points(x, self.geometry.dim)
        A = np.asarray(self._a_raw(pts), dtype=float)
        return A[0] if single else A

    def a_inv_at(self, x):
        pts, single = as_points(x, self.geometry.dim)
        A = mat_inv(np.asarray(self._a_raw(pts), dtype=float))
        return A[0] if single else A

    def v_at(self, x):
        pts, single = as_points(x, self.geometry.dim)
        v = np.asarray(self._v_raw(pts), dtype=float) - self.v_shift
        return float(v[0]) if single else v

    def kappa1(self, r):
        """max of the plain Lagrangian L(x,v) over the grid and |v| <= r."""
        return float(np.max(0.5 * r * r * self._nodes_ainv_max - self._nodes_v))

    def grid_values(self):
        """V at the grid nodes (normalized), shaped like the grid."""
        return self._nodes_v.reshape(tuple(self.geometry.sizes))

    def with_c(self, c):
        return SystemSpec(self.geometry, self._a_raw, self._v_raw, c=c,
                          name=self.name, params=self.params, alpha=self.alpha,
                          v_grad=self._v_grad_raw, force=self._force_raw)

    def with_alpha(self, alpha):
        return SystemSpec(self.geometry, self._a_raw, self._v_raw, c=self.c,
                          name=self.name, params=self.params, alpha=alpha,
                          v_grad=self._v_grad_raw, force=self._force_raw)

    def regrid(self, grid_size):
        """Same system on a different grid resolution."""
        return SystemSpec(TorusGeometry(self.geometry.dim, grid_size),
                          self._a_raw, self._v_raw, c=self.c, name=self.name,
                          params=self.params, alpha=self.alpha,
                          v_grad=self._v_grad_raw, force=self._force_raw)

    def content_key(self):
        """Stable identity string for caching."""
        p = ",".join(f"{k}={self.params[k]!r}" for k in sorted(self.params))
        return (f"{self.name}[{p}]dim{self.geometry.dim}"
                f"grid{'x'.join(map(str, self.geometry.sizes))}c{self.c.tolist()}")

    def __repr__(self):
        return f"SystemSpec({self.content_key()})"


def _require_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise BadInputError(f"non-finite values in {name}")


def eval_hamiltonian(spec: SystemSpec, x, p, shifted=False):
    """H(x,p) = 1/2 <A(x)p,p> + V(x), or H(x, c+p) - alpha when shifted."""
    dim = spec.geometry.dim
    xp, xs = as_points(x, dim)
    pp, ps = as_points(p, dim)
    _require_finite("x", xp)
    _require_finite("p", pp)
    xp, pp = np.broadcast_arrays(xp, pp)
    if shifted:
        if spec.alpha is None:
            raise BadInputError("shifted evaluation requires an alpha attached to the spec")
        pp = pp + spec.c
    A = np.asarray(spec._a_raw(spec.geometry.wrap(xp)), dtype=float)
    out = 0.5 * quad_form(A, pp) + spec.v_at(xp)
    if shifted:
        out = out - spec.alpha
    return float(out[0]) if (xs and ps) else out


def eval_lagrangian_c(spec: SystemSpec, x, v, alpha):
    """L^c(x,v) = 1/2 <A^{-1}(x)v,v> - V(x) - <c,v> + alpha."""
    dim = spec.geometry.dim
    xp, xs = as_points(x, dim)
    vp, vs = as_points(v, dim)
    _require_finite("x", xp)
    _require_finite("v", vp)
    xp, vp = np.broadcast_arrays(xp, vp)
    Ainv = mat_inv(np.asarray(spec._a_raw(spec.geometry.wrap(xp)), dtype=float))
    out = 0.5 * quad_form(Ainv, vp) - spec.v_at(xp) - vp @ spec.c + alpha
    return float(out[0]) if (xs and vs) else out


# -- registry ---------------------------------------------------------------

def _identity_field(dim):
    eye = np.eye(dim)

    def a_func(pts):
        return np.broadcast_to(eye, (len(pts), dim, dim)).copy()

    return a_func


def _make_free(dim=1, grid=None):
    g = TorusGeometry(dim, grid or (512 if dim == 1 else 128))
    return SystemSpec(g, _identity_field(dim), lambda pts: np.zeros(len(pts)),
                      name="free", params={"dim": dim},
                      v_grad=lambda pts: np.zeros((len(pts), dim)))


def _make_pendulum(grid=None):
    g = TorusGeometry(1, grid or 512)

    def v_func(pts):
        return np.cos(2 * np.pi * pts[:, 0]) - 1.0

    def v_grad(pts):
        return -2 * np.pi * np.sin(2 * np.pi * pts)

    return SystemSpec(g, _identity_field(1), v_func, name="pendulum", params={},
                      v_grad=v_grad)


def _make_separable_pendulum(grid=None):
    g = TorusGeometry(2, grid or 128)

    def v_func(pts):
        return np.cos(2 * np.pi * pts[:, 0]) + np.cos(2 * np.pi * pts[:, 1]) - 2.0

    def v_grad(pts):
        return -2 * np.pi * np.sin(2 * np.pi * pts)

    return SystemSpec(g, _identity_field(2), v_func, name="separable_pendulum",
                      params={}, v_grad=v_grad)


def _make_nearly_integrable(eps=1e-3, dim=1, grid=None):
    g = TorusGeometry(dim, grid or (512 if dim == 1 else 128))

    def v_func(pts):
        return eps * (np.cos(2 * np.pi * pts).sum(axis=-1) - dim)

    def v_grad(pts):
        return -2 * np.pi * eps * np.sin(2 * np.pi * pts)

    return SystemSpec(g, _identity_field(dim), v_func,
                      name="nearly_integrable", params={"eps": eps, "dim": dim},
                      v_grad=v_grad)


def bump_profile(pts, strength=9.0, width=0.18, center=(0.5, 0.5)):
    """Smooth periodic conformal factor 1 + strength * bump(x), bump at center."""
    s2 = (np.sin(np.pi * (pts[:, 0] - center[0])) ** 2
          + np.sin(np.pi * (pts[:, 1] - center[1])) ** 2)
    return 1.0 + strength * np.exp(-s2 / width ** 2)


def bump_profile_grad(pts, strength=9.0, width=0.18, center=(0.5, 0.5)):
    s2 = (np.sin(np.pi * (pts[:, 0] - center[0])) ** 2
          + np.sin(np.pi * (pts[:, 1] - center[1])) ** 2)
    coef = -strength * np.exp(-s2 / width ** 2) / width ** 2
    ds = np.stack([np.pi * np.sin(2 * np.pi * (pts[:, 0] - center[0])),
                   np.pi * np.sin(2 * np.pi * (pts[:, 1] - center[1]))], axis=-1)
    return coef[:, None] * ds


def _make_bump_metric(strength=9.0, width=0.18, grid=None):
    """Geodesic system for the conformal metric: A(x) = phi(x)^{-2} I, V = 0."""
    g = TorusGeometry(2, grid or 128)

    def a_func(pts):
        phi = bump_profile(pts, strength, width)
        out = np.zeros((len(pts), 2, 2))
        out[:, 0, 0] = phi ** -2
        out[:, 1, 1] = phi ** -2
        return out

    def force(pts, vels):
        # L = phi(x)^2 |v|^2 / 2, so L_x = phi grad(phi) |v|^2
        phi = bump_profile(pts, strength, width)
        gphi = bump_profile_grad(pts, strength, width)
        return (phi * np.einsum("ni,ni->n", vels, vels))[:, None] * gphi

    return SystemSpec(g, a_func, lambda pts: np.zeros(len(pts)),
                      name="bump_metric", params={"strength": strength, "width": width},
                      force=force)


def tabulated_system(geometry: TorusGeometry, a_grid, v_grid, c=None, name="tabulated"):
    """System from gridded data: V and the entries of A interpolated by splines."""
    dim = geometry.dim
    a_grid = np.asarray(a_grid, dtype=float)
    v_spl = PeriodicSpline(np.asarray(v_grid, dtype=float))
    entry_splines = [[PeriodicSpline(a_grid[..., i, j]) for j in range(dim)]
                     for i in range(dim)]

    def a_func(pts):
        p = geometry.wrap(pts if dim == 2 else np.asarray(pts)[:, 0])
        out = np.empty((len(np.atleast_1d(pts)), dim, dim))
        for i in range(dim):
            for j in range(dim):
                out[:, i, j] = entry_splines[i][j](p)
        out = 0.5 * (out + np.swapaxes(out, 1, 2))
        return out

    def v_func(pts):
        p = geometry.wrap(pts if dim == 2 else np.asarray(pts)[:, 0])
        return v_spl(p)

    return SystemSpec(geometry, a_func, v_func, c=c, name=name)


REGISTRY = {
    "free": _make_free,
    "pendulum": _make_pendulum,
    "separable_pendulum": _make_separable_pendulum,
    "nearly_integrable": _make_nearly_integrable,
    "bump_metric": _make_bump_metric,
}


def make_system(name, c=None, grid=None, **params):
    """Build a registered system, optionally setting c and the grid size."""
    if name not in REGISTRY:
        raise BadInputError(f"unknown system {name!r}; known: {sorted(REGISTRY)}")
    spec = REGISTRY[name](grid=grid, **params)
    if c is not None:
        spec = spec.with_c(c)
    return spec
