"""The generalized-characteristics semiflow: stepping, trajectories, limit sets.

Two independent step maps are provided.  The intrinsic step follows the
variational construction: advance from x to the maximizer of
u(y) - A_tau(x,y), found by a grid scan over a ball whose radius comes from
the speed bound, then refined to sub-node accuracy.  The selection-ODE step
integrates dx/ds = A(x) q(x) by explicit Euler substeps, where q is the
minimal-energy covector of c + D+ u(x).

Along any trajectory the lifted value v(x) = <c,x> + u(x) must not decrease
(it increases strictly off the critical set); integration aborts when the
recorded values violate this within tolerance, since that signals a defective
numerical solution.
"""

from dataclasses import dataclass, field

import numpy as np

from .action import knot_count, minimize_batch, t0_estimate
from .exceptions import BadInputError, InvariantError, MonotonicityError
from .fields import ScalarField
from .superdiff import SelectionField
from .systems import SystemSpec


def default_step(spec: SystemSpec):
    return min(0.5 * t0_estimate(spec), 0.01)


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 0 or (dim == 2 and x.ndim == 1)
    return x.reshape(-1, dim), single


def lift_value(spec, u, x_lift):
    pts, single = _as_batch(x_lift, spec.geometry.dim)
    vals = np.atleast_1d(u(spec.geometry.wrap(pts if spec.geometry.dim == 2 else pts[:, 0])))
    out = vals + pts @ spec.c
    return float(out[0]) if single else out


class IntrinsicStepper:
    """Maximizer step y_{tau,x} = argmax u(y) - A_tau(x,y) over B(x, lam0 tau)."""

    def __init__(self, spec, u, tau, alpha=0.0, lam0=None, safety=2.0):
        self.spec = spec
        self.u = u
        self.tau = float(tau)
        self.alpha = alpha
        self.g = spec.geometry
        base = spec.a_max_eig * (u.lipschitz() + float(np.linalg.norm(spec.c)))
        self.lam0 = base if lam0 is None else lam0
        self.safety = safety
        self._offsets = None
        self._build_offsets(self.safety * max(self.lam0, 0.2) * tau)
        self.tie_flags = 0

    def _build_offsets(self, radius):
        h = self.g.spacings
        counts = np.maximum(np.ceil(radius / h).astype(int), 2)
        if self.g.dim == 1:
            offs = np.arange(-counts[0], counts[0] + 1).reshape(-1, 1)
        else:
            ax = [np.arange(-c_, c_ + 1) for c_ in counts]
            gx, gy = np.meshgrid(*ax, indexing="ij")
            offs = np.stack([gx.ravel(), gy.ravel()], axis=-1)
            keep = np.linalg.norm(offs * h, axis=-1) <= radius + float(np.max(h)) + 1e-12
            offs = offs[keep]
        self._offsets = offs
        self._deltas = offs * h
        r = np.linalg.norm(self._deltas, axis=-1)
        self._boundary = r >= r.max() - 1.01 * float(np.max(h))
        key = {tuple(o): i for i, o in enumerate(offs)}
        d = self.g.dim
        self._nbr = np.full((len(offs), d, 2), -1, dtype=int)
        for i, o in enumerate(offs):
            for ax in range(d):
                for s, direction in ((0, -1), (1, 1)):
                    t = list(o)
                    t[ax] += direction
                    self._nbr[i, ax, s] = key.get(tuple(t), -1)

    def step_many(self, x_lift):
        x_lift = np.atleast_2d(np.asarray(x_lift, dtype=float))
        n = len(x_lift)
        base = np.round(x_lift / self.g.spacings) * self.g.spacings
        cand = base[:, None, :] + self._deltas[None, :, :]
        flat_x = np.repeat(x_lift, len(self._offsets), axis=0)
        flat_y = cand.reshape(-1, self.g.dim)
        res = minimize_batch(self.spec, flat_x, flat_y, self.tau,
                             K=knot_count(self.tau), multistart=False)
        act = res["action0"].reshape(n, -1)
        act = act - (flat_y - flat_x).reshape(n, -1, self.g.dim) @ self.spec.c \
            + self.alpha * self.tau
        uvals = self.u(self.g.wrap(flat_y if self.g.dim == 2 else flat_y[:, 0])).reshape(n, -1)
        obj = uvals - act
        arg = obj.argmax(axis=1)
        if self._boundary[arg].any():
            # maximizer pinned to the scan boundary: raise lam0 once and retry
            if self.safety > 4.0:
                raise InvariantError("intrinsic step maximizer stuck on the scan boundary")
            self.safety *= 2.0
            self._build_offsets(self.safety * max(self.lam0, 0.2) * self.tau)
            return self.step_many(x_lift)
        rows = np.arange(n)
        order = obj.argsort(axis=1)
        runner = order[:, -2]
        near = obj[rows, arg] - obj[rows, runner] <= 1e-9 * np.maximum(1.0, np.abs(obj[rows, arg]))
        if near.any():
            sep = np.linalg.norm(self._deltas[arg] - self._deltas[runner], axis=-1)
            self.tie_flags += int(np.sum(near & (sep > 3 * float(np.max(self.g.spacings)))))
        # sub-node position refinement per axis (skipped at kinks/boundaries)
        y = cand[rows, arg].copy()
        for ax in range(self.g.dim):
            idx_m = self._nbr[arg, ax, 0]
            idx_p = self._nbr[arg, ax, 1]
            ok = (idx_p >= 0) & (idx_m >= 0)
            f0 = obj[rows, arg]
            fp = np.where(ok, obj[rows, np.maximum(idx_p, 0)], 0.0)
            fm = np.where(ok, obj[rows, np.maximum(idx_m, 0)], 0.0)
            denom = 2.0 * f0 - fp - fm
            good = ok & (denom > 1e-14)
            delta = np.zeros(n)
            delta[good] = np.clip((fp[good] - fm[good]) / (2.0 * denom[good]), -0.5, 0.5)
            y[:, ax] += delta * self.g.spacings[ax]
        return y


def step_intrinsic(spec: SystemSpec, u: ScalarField, x, tau, alpha=0.0):
    """One intrinsic semiflow step from a single point (lift coordinates)."""
    _check_tau(spec, tau)
    stepper = IntrinsicStepper(spec, u, tau, alpha)
    y = stepper.step_many(np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1))[0]
    return float(y[0]) if spec.geometry.dim == 1 else y


class SelectionStepper:
    """Explicit Euler on dx = A(x) q(x) ds with tau/8 substeps."""

    def __init__(self, spec, u, tau, substeps=8):
        self.spec = spec
        self.sel = SelectionField(spec, u)
        self.tau = float(tau)
        self.substeps = substeps
        self.g = spec.geometry

    def step_many(self, x_lift):
        x = np.atleast_2d(np.asarray(x_lift, dtype=float)).copy()
        dt = self.tau / self.substeps
        for _ in range(self.substeps):
            w = self.g.wrap(x)
            vel = self.sel.velocity(w if self.g.dim == 2 else w[:, 0])
            x = x + dt * vel
        return x


def step_selection_ode(spec: SystemSpec, u: ScalarField, x, tau):
    """One minimal-selection Euler step from a single point (lift coordinates)."""
    _check_tau(spec, tau)
    stepper = SelectionStepper(spec, u, tau)
    y = stepper.step_many(np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1))[0]
    return float(y[0]) if spec.geometry.dim == 1 else y


def _check_tau(spec, tau):
    if not (0 < tau <= t0_estimate(spec) + 1e-12):
        raise BadInputError(f"tau={tau} outside (0, t0={t0_estimate(spec):.4g}]")


@dataclass
class Trajectory:
    """A sampled generalized characteristic with covectors and lifted values."""

    tau: float
    method: str
    points: np.ndarray        # torus, (n+1, dim)
    lift_points: np.ndarray   # lift, (n+1, dim)
    selected_p: np.ndarray    # minimal covectors of c + D+ u, (n+1, dim)
    v_values: np.ndarray      # <c, lift> + u, (n+1,)
    geometry: object = None
    flags: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.points)

    @property
    def times(self):
        return self.tau * np.arange(len(self.points))


def make_stepper(spec, u, tau, method, alpha=0.0):
    if method == "intrinsic":
        return IntrinsicStepper(spec, u, tau, alpha)
    if method == "selection-ode":
        return SelectionStepper(spec, u, tau)
    raise BadInputError(f"unknown step method {method!r}")


def flow_points(spec, u, x0_lift, horizon, tau, method="selection-ode", alpha=0.0):
    """Batched endpoint map: flow every start for the horizon, return lifts."""
    _check_tau(spec, tau)
    stepper = make_stepper(spec, u, tau, method, alpha)
    x = np.atleast_2d(np.asarray(x0_lift, dtype=float)).copy()
    n_steps = int(round(horizon / tau))
    for _ in range(n_steps):
        x = stepper.step_many(x)
    return x


def integrate(spec: SystemSpec, u: ScalarField, x0, horizon, tau=None,
              method="intrinsic", alpha=0.0, tol_mono=1e-6):
    """Iterate the chosen step map, recording points, covectors and values.

    Raises MonotonicityError when v decreases beyond tolerance and
    InvariantError when a step exceeds the speed bound; both indicate a
    defective numerical solution rather than a property of the dynamics.
    """
    tau = default_step(spec) if tau is None else tau
    _check_tau(spec, tau)
    g = spec.geometry
    d = g.dim
    x = np.asarray(x0, dtype=float).reshape(1, d).astype(float)
    stepper = make_stepper(spec, u, tau, method, alpha)
    sel = SelectionField(spec, u)
    n_steps = int(round(horizon / tau))
    lift = [x[0].copy()]
    for _ in range(n_steps):
        x = stepper.step_many(x)
        lift.append(x[0].copy())
    lift = np.array(lift)
    torus = g.wrap(lift)
    p = sel.selection(torus if d == 2 else torus[:, 0])
    v = np.atleast_1d(u(torus if d == 2 else torus[:, 0])) + lift @ spec.c
    dv = np.diff(v)
    if dv.min() < -tol_mono:
        k = int(np.argmin(dv))
        raise MonotonicityError(
            f"v decreased by {-dv.min():.3e} at step {k} (tol {tol_mono:.1e})")
    step_len = np.linalg.norm(np.diff(lift, axis=0), axis=-1)
    bound = tau * spec.a_max_eig * (u.lipschitz() + float(np.linalg.norm(spec.c)))
    if step_len.max() > 1.5 * bound + 1e-12:
        raise InvariantError(
            f"step length {step_len.max():.3e} exceeds the speed bound {bound:.3e}")
    flags = {}
    if isinstance(stepper, IntrinsicStepper) and stepper.tie_flags:
        flags["maximizer_ties"] = stepper.tie_flags
    return Trajectory(tau=tau, method=method, points=torus, lift_points=lift,
                      selected_p=p, v_values=v, geometry=g, flags=flags)


@dataclass
class OmegaReport:
    """Classified long-time behavior of one trajectory."""

    kind: str                      # stationary | closed | recurrent-unbounded-return | undecided
    support: np.ndarray            # cluster representatives on the torus
    period_estimate: float | None
    sigma_gap: int                 # largest observed return-index gap

    def as_dict(self):
        return {
            "kind": self.kind,
            "support": np.atleast_2d(self.support).tolist(),
            "period_estimate": self.period_estimate,
            "sigma_gap": int(self.sigma_gap),
        }


def _cluster_reps(pts, radius, g):
    reps = []
    used = np.zeros(len(pts), dtype=bool)
    for i in range(len(pts)):
        if used[i]:
            continue
        d = np.linalg.norm(g.torus_delta(pts[i], pts), axis=-1)
        near = (d <= radius) & ~used
        used |= near
        reps.append(pts[i])
    return np.array(reps)


def omega_limit(traj: Trajectory, burn_in=0.5, cluster_tol=None,
                geometry=None) -> OmegaReport:
    """Classify the omega-limit set from the post-burn-in samples.

    stationary: a single cluster; closed: return-index gaps to the reference
    cluster eventually constant (N >= 2) with loop closure within tolerance;
    recurrent-unbounded-return: first-return gaps grow as the return radius
    shrinks; anything else stays undecided.
    """
    g = geometry or traj.geometry
    if g is None:
        raise BadInputError("omega_limit needs the torus geometry")
    n = len(traj.points)
    if n < 10 / max(1e-9, (1 - burn_in)):
        raise BadInputError("trajectory too short for the requested burn-in")
    start = int(burn_in * n)
    pts = np.atleast_2d(traj.points)[start:]
    if cluster_tol is None:
        cluster_tol = 3.0 * float(np.max(g.spacings))
    reps = _cluster_reps(pts, cluster_tol, g)

    d_ref = np.linalg.norm(g.torus_delta(pts[0], pts), axis=-1)

    def reentries(r):
        """Indices where the orbit re-enters B(pts[0], r) after having left."""
        inside = d_ref <= r
        rising = inside[1:] & ~inside[:-1]
        return np.nonzero(rising)[0] + 1

    returns = reentries(cluster_tol)
    gaps = np.diff(returns)
    sigma_gap = int(gaps.max()) if len(gaps) else 0

    if len(reps) == 1:
        spread = np.linalg.norm(g.torus_delta(reps[0], pts), axis=-1).max()
        if spread <= 2.0 * float(np.max(g.spacings)) + cluster_tol:
            return OmegaReport("stationary", reps, None, sigma_gap)

    if len(gaps) >= 5:
        tail = gaps[-5:]
        if np.all(tail == tail[0]) and tail[0] >= 2:
            period_n = int(tail[0])
            closure = np.linalg.norm(
                g.torus_delta(pts[returns[-1]], pts[returns[-1] - period_n]), axis=-1)
            if closure <= cluster_tol:
                return OmegaReport("closed", reps, period_n * traj.tau, sigma_gap)

    # shrinking return radius: growing (or vanishing) first re-entries mean
    # the return indices are unbounded along some subsequence
    radii = [cluster_tol, cluster_tol / 2, cluster_tol / 4, cluster_tol / 8]
    fg = []
    for r in radii:
        re = reentries(r)
        fg.append(float(re[0]) if len(re) else np.inf)
    fg = np.array(fg)
    fg_sent = np.where(np.isfinite(fg), fg, 1e18)
    if np.isfinite(fg[0]) and np.all(np.diff(fg_sent) >= 0):
        last = fg[np.isfinite(fg)][-1]
        if (np.isinf(fg[-1]) and len(fg[np.isfinite(fg)]) >= 1) or last >= 2 * fg[0]:
            if np.isinf(fg[-1]) or last > 5:
                return OmegaReport("recurrent-unbounded-return", reps, None,
                                   int(max(sigma_gap, last)))
    return OmegaReport("undecided", reps, None, sigma_gap)


def estimate_lam0(spec, u, tau, n_samples=50, seed=0):
    """Empirical bound max |y_{tau,x} - x| / tau over random starts."""
    rng = np.random.default_rng(seed)
    d = spec.geometry.dim
    x = rng.random((n_samples, d))
    stepper = IntrinsicStepper(spec, u, tau)
    y = stepper.step_many(x)
    return float(np.max(np.linalg.norm(y - x, axis=-1)) / tau)
