"""Flat torus geometry: uniform periodic grids on [0,1)^dim and point wrapping."""

import numpy as np


class TorusGeometry:
    """A flat torus [0,1)^dim sampled on a uniform grid.

    Points are stored as arrays of shape (..., dim) for dim == 2 and as plain
    arrays for dim == 1 (a trailing axis of size 1 is accepted everywhere).
    The period is fixed at 1 per axis.
    """

    def __init__(self, dim, grid_size):
        if dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {dim}")
        sizes = np.broadcast_to(np.asarray(grid_size, dtype=int), (dim,)).copy()
        if np.any(sizes < 16):
            raise ValueError(f"grid_size must be >= 16 per axis, got {sizes.tolist()}")
        self.dim = dim
        self.sizes = sizes
        self.spacings = 1.0 / sizes

    @property
    def n_nodes(self):
        return int(np.prod(self.sizes))

    def axes(self):
        return [np.arange(n) / n for n in self.sizes]

    def nodes(self):
        """All grid nodes, shape (n_nodes, dim), row-major in axis order."""
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def wrap(self, x):
        """Map real points into the fundamental domain [0,1)^dim."""
        x = np.asarray(x, dtype=float)
        return x - np.floor(x)

    def torus_delta(self, a, b):
        """Shortest periodic displacement from a to b, componentwise in [-1/2, 1/2)."""
        d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
        return d - np.round(d)

    def torus_distance(self, a, b):
        d = self.torus_delta(a, b)
        if self.dim == 1:
            return np.abs(d) if d.ndim == 0 or d.shape[-1:] != (1,) else np.abs(d[..., 0])
        return np.linalg.norm(d, axis=-1)

    def node_index(self, x):
        """Index of the nearest grid node (flattened, row-major)."""
        x = self.wrap(x)
        pts = np.atleast_2d(x) if self.dim == 2 else np.asarray(x, dtype=float).reshape(-1, 1)
        idx = np.round(pts * self.sizes).astype(int) % self.sizes
        flat = idx[..., 0]
        for k in range(1, self.dim):
            flat = flat * self.sizes[k] + idx[..., k]
        return flat

    def __repr__(self):
        return f"TorusGeometry(dim={self.dim}, sizes={self.sizes.tolist()})"


def as_points(x, dim):
    """Coerce scalars/arrays into an (n, dim) array; returns (points, was_single)."""
    x = np.asarray(x, dtype=float)
    if dim == 1:
        if x.ndim == 0:
            return x.reshape(1, 1), True
        if x.ndim == 1:
            return x.reshape(-1, 1), False
        return x.reshape(x.shape[0], 1), False
    if x.ndim == 1:
        return x.reshape(1, dim), True
    return x.reshape(-1, dim), False
