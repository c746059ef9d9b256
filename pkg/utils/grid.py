"""
Regular ambient grids covering M' and scalar fields sampled on them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from utils.errors import ValidationError

BASES = ("trilinear", "cubic")
SPLINE_NODE_WEIGHTS = np.array([1.0, 4.0, 1.0]) / 6.0


def cubic_bspline_weights(t):
    """Weights of the four nodes base-1 .. base+2 for fractional offsets t in [0, 1]"""
    t = np.asarray(t, dtype=float)
    t2 = t * t
    t3 = t2 * t
    return (
        np.stack(
            [
                (1.0 - t) ** 3,
                3.0 * t3 - 6.0 * t2 + 4.0,
                -3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0,
                t3,
            ],
            axis=-1,
        )
        / 6.0
    )


@dataclass(frozen=True)
class RegularGrid:
    """n^3 nodes spanning the cube circumscribing M'"""

    origin: tuple
    spacing: float
    dims: tuple

    @classmethod
    def covering(cls, geometry, n):
        if n < 2:
            raise ValidationError(f"Grid needs at least 2 nodes per axis, got {n}")
        r = geometry.radius_Mprime
        origin = tuple(float(c) - r for c in geometry.center)
        return cls(origin=origin, spacing=2.0 * r / (n - 1), dims=(n, n, n))

    @property
    def size(self):
        return int(np.prod(self.dims))

    def nodes(self):
        """Node coordinates in C order, shape (size, 3)"""
        axes = [
            self.origin[i] + self.spacing * np.arange(self.dims[i]) for i in range(3)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def mask(self, geometry, domain="M"):
        return geometry.inside(self.nodes(), domain).reshape(self.dims)

    def stencil(self, points):
        """
        Trilinear stencil of each point

        Returns:
            tuple: (flat node indices (P, 8), weights (P, 8)); weights are zero
            for points outside the grid box
        """
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        rel = (points - np.asarray(self.origin)) / self.spacing
        dims = np.asarray(self.dims)
        base = np.floor(rel).astype(np.int64)
        base = np.clip(base, 0, dims - 2)
        frac = rel - base
        valid = np.all((rel >= 0.0) & (rel <= dims - 1), axis=1)

        indices = np.empty((points.shape[0], 8), dtype=np.int64)
        weights = np.empty((points.shape[0], 8))
        corner = 0
        for di in (0, 1):
            wx = frac[:, 0] if di else 1.0 - frac[:, 0]
            for dj in (0, 1):
                wy = frac[:, 1] if dj else 1.0 - frac[:, 1]
                for dk in (0, 1):
                    wz = frac[:, 2] if dk else 1.0 - frac[:, 2]
                    i = base[:, 0] + di
                    j = base[:, 1] + dj
                    k = base[:, 2] + dk
                    indices[:, corner] = (i * dims[1] + j) * dims[2] + k
                    weights[:, corner] = wx * wy * wz
                    corner += 1
        weights[~valid] = 0.0
        return indices, weights

    def spline_stencil(self, points):
        """
        Cubic B-spline stencil of each point: 4 nodes per axis, weights of
        nodes beyond the grid edge set to zero

        Returns:
            tuple: (flat node indices (P, 64), weights (P, 64))
        """
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        rel = (points - np.asarray(self.origin)) / self.spacing
        dims = np.asarray(self.dims)
        base = np.clip(np.floor(rel).astype(np.int64), 0, dims - 2)
        frac = rel - base
        valid = np.all((rel >= 0.0) & (rel <= dims - 1), axis=1)

        axis_idx, axis_w = [], []
        for a in range(3):
            idx = base[:, a, None] + np.arange(-1, 3)
            w = cubic_bspline_weights(frac[:, a])
            inside = (idx >= 0) & (idx < dims[a])
            axis_w.append(np.where(inside, w, 0.0))
            axis_idx.append(np.clip(idx, 0, dims[a] - 1))

        ix, iy, iz = axis_idx
        wx, wy, wz = axis_w
        P = points.shape[0]
        indices = (
            (ix[:, :, None, None] * dims[1] + iy[:, None, :, None]) * dims[2]
            + iz[:, None, None, :]
        ).reshape(P, 64)
        weights = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(
            P, 64
        )
        weights[~valid] = 0.0
        return indices, weights

    def basis_stencil(self, points, basis="trilinear"):
        if basis == "trilinear":
            return self.stencil(points)
        if basis == "cubic":
            return self.spline_stencil(points)
        raise ValidationError(f"Unknown basis '{basis}', expected one of {BASES}")

    def same_as(self, other):
        return (
            np.allclose(self.origin, other.origin)
            and np.isclose(self.spacing, other.spacing)
            and tuple(self.dims) == tuple(other.dims)
        )


@dataclass
class GridFunction:
    """Scalar field on a regular grid; values vanish off the support mask"""

    grid: RegularGrid
    values: np.ndarray
    support_mask: np.ndarray
    geometry_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.dims)
        self.support_mask = np.asarray(self.support_mask, dtype=bool).reshape(
            self.grid.dims
        )
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("Grid function values must be finite")

    @classmethod
    def sample(cls, geometry, grid, field_fn, domain="M"):
        """Sample a callable field on the nodes and zero it off the domain"""
        mask = grid.mask(geometry, domain)
        values = np.where(mask.ravel(), field_fn(grid.nodes()), 0.0)
        return cls(grid, values, mask, geometry.geometry_hash())

    @classmethod
    def zeros(cls, geometry, grid, domain="M"):
        return cls(
            grid, np.zeros(grid.dims), grid.mask(geometry, domain), geometry.geometry_hash()
        )

    def interpolate(self, points):
        """Trilinear interpolation, zero outside the grid box"""
        shape = np.shape(points)[:-1]
        indices, weights = self.grid.stencil(points)
        flat = self.values.ravel()
        return np.sum(flat[indices] * weights, axis=1).reshape(shape)

    def __call__(self, points):
        return self.interpolate(points)

    def l2_norm(self):
        """Cell-volume weighted discrete L2 norm"""
        return float(np.sqrt(np.sum(self.values**2) * self.grid.spacing**3))

    def sup_norm(self):
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def masked(self, mask):
        return GridFunction(
            self.grid,
            np.where(mask, self.values, 0.0),
            mask,
            self.geometry_hash,
            dict(self.meta),
        )


def spline_nodal_values(grid, coefficients):
    """Values at the nodes of the cubic spline with the given coefficient array"""
    values = np.asarray(coefficients, dtype=float).reshape(grid.dims)
    for axis in range(3):
        values = ndimage.convolve1d(values, SPLINE_NODE_WEIGHTS, axis=axis, mode="constant")
    return values


def spline_coefficients(values):
    """Cubic spline coefficients interpolating nodal samples"""
    return ndimage.spline_filter(np.asarray(values, dtype=float), order=3)


@dataclass
class SplineField:
    """Cubic B-spline field over a regular grid, zero outside the grid box"""

    grid: RegularGrid
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float).reshape(self.grid.dims)

    def __call__(self, points):
        shape = np.shape(points)[:-1]
        indices, weights = self.grid.spline_stencil(points)
        flat = self.coefficients.ravel()
        return np.sum(flat[indices] * weights, axis=1).reshape(shape)

    def nodal_values(self):
        return spline_nodal_values(self.grid, self.coefficients)
