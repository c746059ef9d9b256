"""
Transform Module
Forward geodesic X-ray transform over the full M' segment of each geodesic,
and sinogram tables indexed by (base point, lambda, omega angle).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

import config
from utils.errors import CoverageError, ValidationError
from utils.geometry import compose_tangent, leaf_frame, trace_batch
from utils.grid import GridFunction
from utils.logger_setup import setup_logger

logger = setup_logger()


def evaluate_field(f, points, geometry):
    """
    Evaluate a field supported in M at sample points

    Args:
        f: GridFunction (trilinear) or analytic phantom / callable (exact)
        points: (..., 3) sample points
        geometry: GeometrySpec

    Returns:
        np.ndarray: values with shape points.shape[:-1], zero outside M
    """
    points = np.asarray(points, dtype=float)
    if isinstance(f, GridFunction):
        if f.geometry_hash and f.geometry_hash != geometry.geometry_hash():
            raise ValidationError("Grid function belongs to a different geometry")
        return f.interpolate(points)
    inside = geometry.inside(points, "M")
    return np.where(inside, f(points), 0.0)


def ray_velocities(geometry, z, lam, theta):
    """Velocities lam * T(z) + omega(theta) for broadcast (z, lam, theta)"""
    e1, e2 = leaf_frame(geometry, z)
    lam = np.asarray(lam, dtype=float)
    theta = np.asarray(theta, dtype=float)
    omega = np.cos(theta)[..., None] * e1 + np.sin(theta)[..., None] * e2
    return compose_tangent(geometry, z, lam, omega)


def xray_batch(geometry, f, z, v, step=config.TRACE_STEP):
    """Composite trapezoid of f along many geodesics, shape (N,)"""
    trace = trace_batch(geometry, z, v, step)
    values = evaluate_field(f, trace.points, geometry)
    values = np.where(trace.inside, values, 0.0)
    return np.trapezoid(values, dx=step, axis=1)


def xray(geometry, f, z, lam, omega, step=config.TRACE_STEP):
    """
    X-ray transform along the geodesic through z with velocity lam * T + omega

    Args:
        geometry: GeometrySpec
        f: Field supported in M
        z: Base point in M'
        lam: Transverse coefficient
        omega: Leaf-tangent vector (3,)
        step: Parameter step

    Returns:
        float: Integral of f over the M' segment
    """
    z = np.asarray(z, dtype=float)
    v = compose_tangent(geometry, z, lam, omega)
    return float(xray_batch(geometry, f, z[None, :], v[None, :], step)[0])


@dataclass
class Sinogram:
    """
    X-ray data over (base point, lambda, omega angle).
    `lambda_nodes` is shared (L,) or per base point (P, L); omega angles are
    a uniform periodic grid in the leaf frame of each base point.
    """

    base_points: np.ndarray
    lambda_nodes: np.ndarray
    omega_angles: np.ndarray
    data: np.ndarray
    geometry_hash: str

    def __post_init__(self):
        self.base_points = np.atleast_2d(np.asarray(self.base_points, dtype=float))
        self.lambda_nodes = np.asarray(self.lambda_nodes, dtype=float)
        self.omega_angles = np.asarray(self.omega_angles, dtype=float)
        self.data = np.asarray(self.data, dtype=float)
        n_base = self.base_points.shape[0]
        n_lam = self.lambda_nodes.shape[-1]
        expected = (n_base, n_lam, self.omega_angles.size)
        if self.data.shape != expected:
            raise ValidationError(
                f"Sinogram data shape {self.data.shape} does not match nodes {expected}"
            )
        if self.lambda_nodes.ndim == 2 and self.lambda_nodes.shape[0] != n_base:
            raise ValidationError("Per-base-point lambda nodes need one row per base point")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("Sinogram data must be finite")

    @property
    def shape(self):
        return self.data.shape

    def lambdas_for(self, index):
        return self.lambda_nodes if self.lambda_nodes.ndim == 1 else self.lambda_nodes[index]

    def base_index(self, z, tol=1e-9):
        """Index of the base point equal to z; no nearest-neighbour fallback"""
        dist = np.linalg.norm(self.base_points - np.asarray(z, dtype=float), axis=1)
        index = int(np.argmin(dist))
        if dist[index] > tol:
            raise CoverageError(f"Base point {np.asarray(z).tolist()} not in sinogram")
        return index

    def interpolate(self, index, lam, theta):
        """
        Bilinear interpolation in (lambda, periodic theta) at one base point

        Args:
            index: Base point index
            lam: Lambda values (any shape)
            theta: Angles broadcastable with lam

        Returns:
            np.ndarray: Interpolated data
        """
        lam_nodes = self.lambdas_for(index)
        lam, theta = np.broadcast_arrays(
            np.asarray(lam, dtype=float), np.asarray(theta, dtype=float)
        )
        slack = 1e-9 * max(1.0, float(np.max(np.abs(lam_nodes))))
        if lam.size and (
            lam.min() < lam_nodes[0] - slack or lam.max() > lam_nodes[-1] + slack
        ):
            raise CoverageError(
                f"Requested lambda range [{lam.min():.4g}, {lam.max():.4g}] exceeds "
                f"sinogram range [{lam_nodes[0]:.4g}, {lam_nodes[-1]:.4g}]"
            )
        n_w = self.omega_angles.size
        d_theta = 2.0 * np.pi / n_w
        if not np.allclose(
            self.omega_angles, self.omega_angles[0] + d_theta * np.arange(n_w)
        ):
            raise CoverageError("Sinogram omega angles are not a uniform periodic grid")

        table = self.data[index]
        li = np.clip(np.searchsorted(lam_nodes, lam, side="right") - 1, 0, lam_nodes.size - 2)
        span = lam_nodes[li + 1] - lam_nodes[li]
        fl = np.clip((lam - lam_nodes[li]) / span, 0.0, 1.0)

        pos = (theta - self.omega_angles[0]) / d_theta
        wi = np.floor(pos).astype(np.int64)
        fw = pos - wi
        w0 = np.mod(wi, n_w)
        w1 = np.mod(wi + 1, n_w)

        return (
            (1 - fl) * (1 - fw) * table[li, w0]
            + (1 - fl) * fw * table[li, w1]
            + fl * (1 - fw) * table[li + 1, w0]
            + fl * fw * table[li + 1, w1]
        )


def _sinogram_block(geometry, f, points, lambda_rows, omega_angles, step):
    rows = []
    for z, lam_nodes in zip(points, lambda_rows):
        lam, theta = np.meshgrid(lam_nodes, omega_angles, indexing="ij")
        v = ray_velocities(geometry, z, lam.ravel(), theta.ravel())
        base = np.broadcast_to(z, v.shape)
        rows.append(xray_batch(geometry, f, base, v, step).reshape(lam.shape))
    return rows


def forward_sinogram(
    geometry,
    f,
    base_points,
    lambda_nodes,
    omega_angles,
    step=config.TRACE_STEP,
    workers=1,
):
    """
    Tabulate the X-ray transform on a node grid

    Args:
        geometry: GeometrySpec
        f: Field supported in M (GridFunction or phantom)
        base_points: (P, 3) base points in M'
        lambda_nodes: Shared (L,) or per base point (P, L) lambda values
        omega_angles: Uniform periodic angles (W,)
        step: Ray parameter step
        workers: Thread count for the embarrassingly parallel node loop

    Returns:
        Sinogram
    """
    base_points = np.atleast_2d(np.asarray(base_points, dtype=float))
    lambda_nodes = np.asarray(lambda_nodes, dtype=float)
    omega_angles = np.asarray(omega_angles, dtype=float)
    if base_points.shape[0] == 0 or lambda_nodes.size == 0 or omega_angles.size == 0:
        raise ValidationError("Sinogram node grids must be non-empty")
    if isinstance(f, GridFunction) and f.geometry_hash != geometry.geometry_hash():
        raise ValidationError("Grid function belongs to a different geometry")
    if not np.all(geometry.inside(base_points)):
        raise ValidationError("Sinogram base points must lie in M'")

    if lambda_nodes.ndim == 1:
        lambda_rows = np.broadcast_to(lambda_nodes, (base_points.shape[0], lambda_nodes.size))
    else:
        lambda_rows = lambda_nodes

    chunk = max(1, int(np.ceil(base_points.shape[0] / (4 * max(workers, 1)))))
    blocks = [
        (base_points[i : i + chunk], lambda_rows[i : i + chunk])
        for i in range(0, base_points.shape[0], chunk)
    ]
    logger.info(
        f"Forward sinogram: {base_points.shape[0]} base points x "
        f"{lambda_rows.shape[1]} lambda x {omega_angles.size} omega"
    )
    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        futures = [
            pool.submit(_sinogram_block, geometry, f, pts, lams, omega_angles, step)
            for pts, lams in blocks
        ]
        rows = []
        for future in tqdm(futures, desc="forward", disable=None):
            rows.extend(future.result())

    return Sinogram(
        base_points=base_points,
        lambda_nodes=lambda_nodes,
        omega_angles=omega_angles,
        data=np.stack(rows),
        geometry_hash=geometry.geometry_hash(),
    )
