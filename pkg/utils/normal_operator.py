"""
Modified Normal Operator Module
Semiclassical cutoff, exponential weights, localized backprojection L_h and the
conjugated normal operator A_h = exp(-Phi/h) L_h I exp(Phi/h), in the global
(Phi = -x) and scattering (Phi = 1/x) variants.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse
from scipy.special import roots_legendre
from tqdm import tqdm

import config
from utils.errors import DampingViolation, DomainError, ValidationError
from utils.geometry import (
    alpha,
    cached_certificate,
    leaf_frame,
    trace_batch,
    transversal,
)
from utils.grid import BASES, GridFunction, SplineField, spline_coefficients
from utils.logger_setup import setup_logger
from utils.transform import Sinogram, evaluate_field, forward_sinogram

logger = setup_logger()

PROFILES = ("bump", "shifted")
VARIANTS = ("global", "scattering")
RAYS_PER_CHUNK = 4096


def quintic_bump(u):
    """1 on [-1, 1], 0 outside [-2, 2], quintic smoothstep ramps in between"""
    s = np.clip(np.abs(np.asarray(u, dtype=float)) - 1.0, 0.0, 1.0)
    return 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


@dataclass(frozen=True)
class CutoffSpec:
    """
    chi(lam_hat) = exp(-lam_hat^2 / (2 alpha)) * psi(lam_hat / Lambda) for the
    default profile; the shifted profile psi(lam_hat - shift) vanishes at 0.
    """

    Lambda: float = config.CUTOFF_LAMBDA
    profile: str = config.CUTOFF_PROFILE
    shift: float = config.CUTOFF_SHIFT
    alpha_matched: bool = config.ALPHA_MATCHED

    def __post_init__(self):
        if self.Lambda <= 0:
            raise ValidationError(f"Cutoff Lambda must be positive, got {self.Lambda}")
        if self.profile not in PROFILES:
            raise ValidationError(f"Unknown cutoff profile '{self.profile}'")

    @property
    def uses_alpha(self):
        return self.profile == "bump" and self.alpha_matched

    def panels(self):
        """Support split at the kinks of psi: (centre, plateau half-width)"""
        if self.profile == "bump":
            return 0.0, self.Lambda
        return self.shift, 1.0

    def support(self):
        centre, half = self.panels()
        return centre - 2.0 * half, centre + 2.0 * half

    def value(self, lam_hat, alpha_value=1.0):
        lam_hat = np.asarray(lam_hat, dtype=float)
        if self.profile == "shifted":
            return quintic_bump(lam_hat - self.shift)
        envelope = quintic_bump(lam_hat / self.Lambda)
        if not self.alpha_matched:
            return envelope
        return np.exp(-(lam_hat**2) / (2.0 * np.asarray(alpha_value))) * envelope


@dataclass(frozen=True)
class WeightSpec:
    variant: str = config.WEIGHT_VARIANT

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"Unknown weight variant '{self.variant}'")

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        if self.variant == "global":
            return -x
        return 1.0 / x

    def validate(self, geometry):
        if self.variant == "scattering":
            x_min, _ = geometry.x_range("Mprime")
            if x_min <= 0.0:
                raise DomainError(
                    f"Scattering weight needs x > 0 on M', but min x = {x_min:.4g}"
                )

    def conjugation(self, geometry, x, h, power=1.0):
        """exp(-power * (Phi(x) - Phi(x_ref)) / h)"""
        return np.exp(-power * (self.phi(x) - self.phi(geometry.x_ref)) / h)


@dataclass(frozen=True)
class NormalOpConfig:
    h: float = config.H
    cutoff: CutoffSpec = field(default_factory=CutoffSpec)
    weight: WeightSpec = field(default_factory=WeightSpec)
    n_lambda: int = config.N_LAMBDA
    n_omega: int = config.N_OMEGA
    t_step: float = config.OPERATOR_T_STEP
    damping_check: bool = True
    damping_tolerance: float = config.DAMPING_TOLERANCE
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.h <= 1.0:
            raise ValidationError(f"h must lie in (0, 1], got {self.h}")
        if self.n_lambda < 6 or self.n_omega < 24:
            raise ValidationError(
                f"Need n_lambda >= 6 and n_omega >= 24, got {self.n_lambda}, {self.n_omega}"
            )
        if self.t_step <= 0:
            raise ValidationError(f"t_step must be positive, got {self.t_step}")

    @property
    def variant(self):
        return self.weight.variant


# ---------------------------------------------------------------- quadrature


@lru_cache(maxsize=64)
def gauss_legendre(n):
    nodes, weights = roots_legendre(n)
    return nodes, weights


def panel_rule(a, b, n):
    """Gauss-Legendre rule with n nodes on [a, b]"""
    x, w = gauss_legendre(n)
    half = 0.5 * (b - a)
    return 0.5 * (a + b) + half * x, half * w


def lambda_hat_nodes(cutoff, n):
    """
    Composite Gauss-Legendre on the cutoff support with panels split at the
    plateau edges, so every panel integrand is smooth
    """
    centre, half = cutoff.panels()
    n_side = max(2, n // 4)
    n_mid = max(2, n - 2 * n_side)
    parts = [
        panel_rule(centre - 2 * half, centre - half, n_side),
        panel_rule(centre - half, centre + half, n_mid),
        panel_rule(centre + half, centre + 2 * half, n_side),
    ]
    return (
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
    )


def omega_nodes(n):
    """Equal-area (uniform) grid on the leaf circle"""
    theta = 2.0 * np.pi * np.arange(n) / n
    return theta, np.full(n, 2.0 * np.pi / n)


def lambda_scale(op_config, geometry, z):
    """
    lambda = scale * lam_hat; sqrt(h) globally, sqrt(h) * max(x, sqrt(h)) in
    the scattering variant (capped where x < sqrt(h))
    """
    root_h = np.sqrt(op_config.h)
    x = geometry.foliation(z)
    if op_config.variant == "global":
        return np.full(np.shape(x), root_h) if np.ndim(x) else root_h
    return root_h * np.maximum(x, root_h)


def scale_capped(op_config, geometry, z):
    """Base points where the scattering scale sqrt(h) x is replaced by h"""
    if op_config.variant == "global":
        return np.zeros(np.shape(geometry.foliation(z)), dtype=bool)
    return geometry.foliation(z) < np.sqrt(op_config.h)


def bundle_diagnostics(op_config, geometry, points):
    """
    Counts of base points with a capped lambda scale and of quadrature rays
    with |lambda| beyond the certified range of the convexity certificate
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    lam_hat, _ = lambda_hat_nodes(op_config.cutoff, op_config.n_lambda)
    scale = np.asarray(lambda_scale(op_config, geometry, points), dtype=float).reshape(-1)
    scale = np.broadcast_to(scale, (points.shape[0],))
    lam = np.abs(scale[:, None] * lam_hat[None, :])
    lambda0 = cached_certificate(geometry).lambda0
    return {
        "scale_capped": int(np.count_nonzero(scale_capped(op_config, geometry, points))),
        "rays_beyond_lambda0": int(np.count_nonzero(lam > lambda0)) * op_config.n_omega,
        "lambda0": float(lambda0),
        "max_abs_lambda": float(lam.max()) if lam.size else 0.0,
    }


def cutoff_alpha(op_config, geometry, zs, omega):
    """alpha(z, 0, omega) for each base point and leaf direction, shape (C, W)"""
    C, W = omega.shape[:2]
    if not op_config.cutoff.uses_alpha:
        return np.ones((C, W))
    base = np.repeat(zs, W, axis=0)
    values = alpha(geometry, base, np.zeros(C * W), omega.reshape(-1, 3))
    return np.asarray(values).reshape(C, W)


def damping_bound(lam_hat, t_hat, c_quad):
    """Gaussian bound exp(lam_hat^2/(2C)) exp(-(C/2)(t_hat + lam_hat/C)^2)"""
    lam_hat = np.asarray(lam_hat, dtype=float)
    t_hat = np.asarray(t_hat, dtype=float)
    return np.exp(lam_hat**2 / (2.0 * c_quad)) * np.exp(
        -0.5 * c_quad * (t_hat + lam_hat / c_quad) ** 2
    )


def check_damping(op_config, geometry, x0, lam, t, log_damping, usable):
    """
    Compare the weight factor with the lower-bound profile
    x + lam t + C t^2 / 2 on every usable ray, including rays whose lambda lies
    beyond the certified range |lambda| <= lambda0.

    Args:
        x0: Base foliation value per ray (R,)
        lam: Transverse coefficient per ray (R,)
        t: Parameter grid (K,)
        log_damping: log of the weight factor (R, K)
        usable: Samples that take part in the quadrature (R, K)
    """
    certificate = cached_certificate(geometry)
    c_quad = certificate.C_quad
    tt = t[None, :]
    lower = x0[:, None] + lam[:, None] * tt + 0.5 * c_quad * tt * tt
    valid = np.array(usable, dtype=bool)
    if op_config.variant == "scattering":
        valid &= lower > 0.0
    phi = op_config.weight.phi
    safe_lower = np.where(valid, lower, 1.0)
    bound = (phi(safe_lower) - phi(x0)[:, None]) / op_config.h
    excess = np.where(valid, log_damping - bound, -np.inf)
    worst = np.unravel_index(np.argmax(excess), excess.shape)
    if excess[worst] > np.log(op_config.damping_tolerance):
        raise DampingViolation(
            f"Weight factor exceeds the damping bound by "
            f"{np.exp(excess[worst]):.4g}x at t={t[worst[1]]:.4g}, lambda={lam[worst[0]]:.4g}",
            witness={"ray": int(worst[0]), "t": float(t[worst[1]])},
        )
    return int(np.count_nonzero(np.abs(lam) > certificate.lambda0))


# ---------------------------------------------------------------- ray bundles


@dataclass
class RayBundle:
    """All quadrature geodesics issued from a chunk of base points"""

    trace: object
    owner: np.ndarray
    lam: np.ndarray
    ray_weight: np.ndarray
    log_damping: np.ndarray
    n_base: int


def build_bundle(op_config, geometry, zs, exact_lines=True):
    """
    Trace the (lam_hat, omega) quadrature geodesics of each base point and
    attach quadrature weights and weight factors exp((Phi(gamma1) - Phi(x))/h)
    """
    zs = np.atleast_2d(np.asarray(zs, dtype=float))
    C = zs.shape[0]
    lam_hat, w_lam = lambda_hat_nodes(op_config.cutoff, op_config.n_lambda)
    theta, w_theta = omega_nodes(op_config.n_omega)
    L, W = lam_hat.size, theta.size

    e1, e2 = leaf_frame(geometry, zs)
    omega = (
        np.cos(theta)[None, :, None] * e1[:, None, :]
        + np.sin(theta)[None, :, None] * e2[:, None, :]
    )
    scale = np.asarray(lambda_scale(op_config, geometry, zs)).reshape(C)
    chi = op_config.cutoff.value(
        lam_hat[None, :, None], cutoff_alpha(op_config, geometry, zs, omega)[:, None, :]
    )
    lam = scale[:, None] * lam_hat[None, :]
    T = transversal(geometry, zs)
    v = lam[:, :, None, None] * T[:, None, None, :] + omega[:, None, :, :]
    base = np.broadcast_to(zs[:, None, None, :], v.shape)

    trace = trace_batch(
        geometry,
        base.reshape(-1, 3),
        v.reshape(-1, 3),
        op_config.t_step,
        exact_lines=exact_lines,
    )
    ray_weight = (
        scale[:, None, None] * w_lam[None, :, None] * w_theta[None, None, :] * chi
    ).ravel()
    owner = np.repeat(np.arange(C), L * W)
    lam_ray = np.repeat(lam.ravel(), W)

    x0 = geometry.foliation(zs)[owner]
    gamma1 = x0[:, None] + geometry.foliation_increment(trace.z0[:, None, :], trace.w)
    gamma1 = np.where(trace.inside, gamma1, x0[:, None])
    phi = op_config.weight.phi
    log_damping = (phi(gamma1) - phi(x0)[:, None]) / op_config.h

    if op_config.damping_check:
        check_damping(op_config, geometry, x0, lam_ray, trace.t, log_damping, trace.inside)

    return RayBundle(
        trace=trace,
        owner=owner,
        lam=lam_ray,
        ray_weight=ray_weight,
        log_damping=np.where(trace.inside, log_damping, -np.inf),
        n_base=C,
    )


def _rows_apply(op_config, geometry, f, zs):
    bundle = build_bundle(op_config, geometry, zs)
    values = evaluate_field(f, bundle.trace.points, geometry)
    integrand = np.exp(bundle.log_damping) * values
    ray_integral = np.trapezoid(integrand, dx=op_config.t_step, axis=1)
    return np.bincount(
        bundle.owner, weights=bundle.ray_weight * ray_integral, minlength=bundle.n_base
    )


def _chunks(indices, rays_per_base, budget=RAYS_PER_CHUNK):
    size = max(1, budget // max(rays_per_base, 1))
    return [indices[i : i + size] for i in range(0, len(indices), size)]


def _run_chunks(op_config, work, chunks, desc):
    workers = max(op_config.workers, 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(work, chunk) for chunk in chunks]
        return [f.result() for f in tqdm(futures, desc=desc, disable=None)]


def apply_at_points(op_config, geometry, f, points):
    """A_h f at arbitrary points of M'"""
    op_config.weight.validate(geometry)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if not np.all(geometry.inside(points)):
        raise DomainError("Evaluation points must lie in M'")
    rays = op_config.n_omega * lambda_hat_nodes(op_config.cutoff, op_config.n_lambda)[0].size
    chunks = _chunks(np.arange(points.shape[0]), rays)
    results = _run_chunks(
        op_config,
        lambda idx: _rows_apply(op_config, geometry, f, points[idx]),
        chunks,
        "apply_A",
    )
    return np.concatenate(results) if results else np.zeros(0)


def apply_A(op_config, geometry, f, grid):
    """
    A_h f on every grid node of M'

    Args:
        op_config: NormalOpConfig
        geometry: GeometrySpec
        f: Field supported in M
        grid: RegularGrid covering M'

    Returns:
        GridFunction: Values on M' nodes, zero elsewhere; meta holds the
        bundle_diagnostics counts
    """
    mask = grid.mask(geometry, "Mprime")
    nodes = grid.nodes()[mask.ravel()]
    values = np.zeros(grid.size)
    logger.info(
        f"Applying A_h (h={op_config.h}, {op_config.variant}) on {nodes.shape[0]} nodes"
    )
    values[mask.ravel()] = apply_at_points(op_config, geometry, f, nodes)
    meta = bundle_diagnostics(op_config, geometry, nodes)
    if meta["rays_beyond_lambda0"]:
        logger.warning(
            f"{meta['rays_beyond_lambda0']} quadrature rays have |lambda| up to "
            f"{meta['max_abs_lambda']:.3g}, beyond the certified {meta['lambda0']:.3g}; "
            f"the damping bound was checked on them directly"
        )
    if meta["scale_capped"]:
        logger.warning(f"Lambda scale capped at {meta['scale_capped']} nodes where x < sqrt(h)")
    return GridFunction(grid, values, mask, geometry.geometry_hash(), meta)


def apply_L(op_config, geometry, v, z):
    """
    Localized backprojection L_h v at z

    Args:
        op_config: NormalOpConfig
        geometry: GeometrySpec
        v: Sinogram with z among its base points, or a ray functional
           v(z, lam (N,), omega (N, 3)) -> (N,)
        z: Point of M'

    Returns:
        float
    """
    op_config.weight.validate(geometry)
    z = np.asarray(z, dtype=float)
    if not geometry.inside(z):
        raise DomainError(f"Point {z.tolist()} lies outside M'")
    lam_hat, w_lam = lambda_hat_nodes(op_config.cutoff, op_config.n_lambda)
    theta, w_theta = omega_nodes(op_config.n_omega)
    e1, e2 = leaf_frame(geometry, z)
    omega = np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2
    scale = float(lambda_scale(op_config, geometry, z))
    alpha0 = cutoff_alpha(op_config, geometry, z[None, :], omega[None, :, :])[0]
    chi = op_config.cutoff.value(lam_hat[:, None], alpha0[None, :])
    lam = scale * lam_hat

    if isinstance(v, Sinogram):
        if v.geometry_hash != geometry.geometry_hash():
            raise ValidationError("Sinogram belongs to a different geometry")
        index = v.base_index(z)
        values = v.interpolate(index, lam[:, None], theta[None, :])
    else:
        lam_grid = np.repeat(lam, theta.size)
        omega_grid = np.tile(omega, (lam.size, 1))
        values = np.asarray(v(z, lam_grid, omega_grid), dtype=float).reshape(
            lam.size, theta.size
        )
    return float(scale * np.sum(w_lam[:, None] * w_theta[None, :] * chi * values))


def conjugated_field(op_config, geometry, f, power=-1.0):
    """Callable p -> exp(power * (Phi(x(p)) - Phi(x_ref)) / h) f(p)"""

    def weighted(points):
        x = geometry.foliation(points)
        factor = op_config.weight.conjugation(geometry, x, op_config.h, power=-power)
        return factor * evaluate_field(f, points, geometry)

    return weighted


def quadrature_sinogram(op_config, geometry, f, base_points, step=config.TRACE_STEP):
    """Forward data on exactly the (lambda, omega) nodes L_h samples at each base point"""
    base_points = np.atleast_2d(np.asarray(base_points, dtype=float))
    lam_hat, _ = lambda_hat_nodes(op_config.cutoff, op_config.n_lambda)
    theta, _ = omega_nodes(op_config.n_omega)
    scale = np.asarray(lambda_scale(op_config, geometry, base_points)).reshape(-1)
    if op_config.variant == "global":
        lambda_nodes = scale[0] * lam_hat
    else:
        lambda_nodes = scale[:, None] * lam_hat[None, :]
    return forward_sinogram(
        geometry, f, base_points, lambda_nodes, theta, step=step, workers=op_config.workers
    )


def grid_indices(grid, points, tol=1e-9):
    """Flat grid index of each point; points must be grid nodes"""
    rel = (np.atleast_2d(points) - np.asarray(grid.origin)) / grid.spacing
    ijk = np.rint(rel).astype(np.int64)
    if np.any(np.abs(rel - ijk) > tol) or np.any(ijk < 0) or np.any(
        ijk >= np.asarray(grid.dims)
    ):
        raise ValidationError("Sinogram base points are not nodes of the grid")
    return (ijk[:, 0] * grid.dims[1] + ijk[:, 1]) * grid.dims[2] + ijk[:, 2]


def conjugated_rhs(op_config, geometry, d, grid, balance=0.0):
    """
    b(z) = exp(-(Phi(x(z)) - Phi(x_ref))/h) L_h d(z) at the sinogram base points,
    optionally divided by the balancing factor exp(-balance (Phi - Phi_ref)/h)

    Returns:
        GridFunction: Supported on the grid nodes that are base points of d
    """
    op_config.weight.validate(geometry)
    if d.geometry_hash != geometry.geometry_hash():
        raise ValidationError("Sinogram belongs to a different geometry")
    flat = grid_indices(grid, d.base_points)
    values = np.zeros(grid.size)
    mask = np.zeros(grid.size, dtype=bool)
    x = geometry.foliation(d.base_points)
    factor = op_config.weight.conjugation(geometry, x, op_config.h, power=1.0 - balance)
    for k, z in enumerate(d.base_points):
        values[flat[k]] = factor[k] * apply_L(op_config, geometry, d, z)
        mask[flat[k]] = True
    return GridFunction(grid, values, mask, geometry.geometry_hash())


# ---------------------------------------------------------------- assembly


@dataclass
class AssembledOperator:
    """Discretised A_h on the M-supported nodes, in the balanced unknown"""

    matrix: object
    unknowns: np.ndarray
    grid: object
    balance: float
    h: float
    geometry_hash: str = ""
    basis: str = "trilinear"

    @property
    def n(self):
        return int(self.unknowns.size)

    def restrict(self, gf):
        return gf.values.ravel()[self.unknowns]

    def extend(self, vector):
        values = np.zeros(self.grid.size)
        values[self.unknowns] = vector
        mask = np.zeros(self.grid.size, dtype=bool)
        mask[self.unknowns] = True
        return GridFunction(self.grid, values, mask, self.geometry_hash)

    def nodal_values(self, vector):
        """Field values on the M nodes represented by a solution vector"""
        if self.basis == "trilinear":
            return self.extend(vector)
        coefficients = np.zeros(self.grid.size)
        coefficients[self.unknowns] = vector
        values = SplineField(self.grid, coefficients).nodal_values().ravel()
        return self.extend(values[self.unknowns])

    def apply_sampled(self, geometry, f):
        """
        Matrix times the field sampled on the grid: nodal values for the
        trilinear basis, interpolating spline coefficients for the cubic one.
        Only defined for balance 0, where the matrix is A_h itself.
        """
        if self.balance != 0.0:
            raise ValidationError(
                f"Sampled products need the unbalanced operator, got balance {self.balance}"
            )
        if isinstance(f, GridFunction):
            values = np.where(f.support_mask, f.values, 0.0)
        else:
            values = GridFunction.sample(geometry, self.grid, f).values
        if self.basis == "cubic":
            values = spline_coefficients(values)
        return self.extend(self.matrix @ values.ravel()[self.unknowns])


def _rows_assemble(op_config, geometry, grid, zs, column_of, n, balance, basis):
    bundle = build_bundle(op_config, geometry, zs)
    trace = bundle.trace
    inside = trace.inside
    damping = np.exp((1.0 - balance) * np.where(inside, bundle.log_damping, 0.0))
    sample_weight = np.where(
        inside, bundle.ray_weight[:, None] * damping * op_config.t_step, 0.0
    )
    keep = inside & (sample_weight != 0.0)
    rows = np.broadcast_to(bundle.owner[:, None], keep.shape)[keep]
    idx, weights = grid.basis_stencil(trace.points[keep], basis)
    cols = column_of[idx]
    contrib = weights * sample_weight[keep][:, None]
    valid = (cols >= 0) & (contrib != 0.0)
    key = np.broadcast_to(rows[:, None], cols.shape)[valid] * n + cols[valid]
    block = np.bincount(key, weights=contrib[valid], minlength=bundle.n_base * n)
    return block.reshape(bundle.n_base, n)


def assemble_A(op_config, geometry, grid, balance=0.0, basis="trilinear"):
    """
    Matrix of A_h over the M-supported nodes. Trilinear deposition treats the
    unknowns as nodal values; the cubic basis treats them as B-spline
    coefficients on the M nodes.
    With balance s the unknown is u = exp(s (Phi - Phi_ref)/h) g and the rows
    are scaled by the same factor, so s = 0 gives plain A_h.

    Args:
        op_config: NormalOpConfig
        geometry: GeometrySpec
        grid: RegularGrid, at most 17 nodes per axis
        balance: Balancing exponent s in [0, 1]
        basis: "trilinear" or "cubic"

    Returns:
        AssembledOperator
    """
    if basis not in BASES:
        raise ValidationError(f"Unknown basis '{basis}', expected one of {BASES}")
    if max(grid.dims) > config.MAX_GRID_N:
        raise ValidationError(
            f"Refusing to assemble a {grid.dims} grid; limit is {config.MAX_GRID_N}^3"
        )
    if not 0.0 <= balance <= 1.0:
        raise ValidationError(f"balance must lie in [0, 1], got {balance}")
    op_config.weight.validate(geometry)

    mask = grid.mask(geometry, "M").ravel()
    unknowns = np.flatnonzero(mask)
    n = unknowns.size
    if n == 0:
        return AssembledOperator(
            scipy.sparse.csr_matrix((0, 0)),
            unknowns,
            grid,
            balance,
            op_config.h,
            geometry.geometry_hash(),
            basis,
        )
    column_of = np.full(grid.size, -1, dtype=np.int64)
    column_of[unknowns] = np.arange(n)
    nodes = grid.nodes()[unknowns]

    rays = op_config.n_omega * lambda_hat_nodes(op_config.cutoff, op_config.n_lambda)[0].size
    budget = RAYS_PER_CHUNK // (2 if basis == "trilinear" else 16)
    chunks = _chunks(np.arange(n), rays, budget=budget)
    logger.info(f"Assembling A_h ({basis}) on {n} unknowns in {len(chunks)} chunks")
    blocks = _run_chunks(
        op_config,
        lambda idx: _rows_assemble(
            op_config, geometry, grid, nodes[idx], column_of, n, balance, basis
        ),
        chunks,
        "assemble_A",
    )
    dense = np.vstack(blocks)
    return AssembledOperator(
        scipy.sparse.csr_matrix(dense),
        unknowns,
        grid,
        balance,
        op_config.h,
        geometry.geometry_hash(),
        basis,
    )
