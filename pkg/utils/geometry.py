"""
Geometry Module
Metric families, geodesic flow, the foliation function x, the lambda/omega
tangent decomposition and sampled convexity certificates.
All array functions accept points with shape (..., 3).
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

import config
from utils.errors import (
    CertificateFailure,
    DegenerateFoliationError,
    DomainError,
    IntegrationFailure,
    ValidationError,
)
from utils.logger_setup import setup_logger

logger = setup_logger()

METRICS = ("euclidean", "conformal")
FOLIATIONS = ("radial",)
GRADIENT_FLOOR = 1e-8


@dataclass(frozen=True)
class GeometrySpec:
    """
    Ambient ball M inside the enlarged ball M', a metric family and the
    foliation x(z) = |z - foliation_center|^2 + offset.

    The conformal family is g = (1 + metric_eps * q(z)) I with
    q(z) = exp(-|z - center|^2).
    """

    metric_id: str = config.METRIC
    metric_eps: float = config.METRIC_EPS
    center: tuple = config.DOMAIN_CENTER
    radius_M: float = config.RADIUS_M
    radius_Mprime: float = config.RADIUS_MPRIME
    foliation_id: str = "radial"
    foliation_center: tuple = config.FOLIATION_CENTER
    offset: float = config.LAYER_OFFSET
    dimension: int = config.DIMENSION

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(
            self, "foliation_center", tuple(float(c) for c in self.foliation_center)
        )
        if self.dimension != 3:
            raise ValidationError(
                f"Only dimension 3 is implemented, got {self.dimension}"
            )
        if len(self.center) != 3 or len(self.foliation_center) != 3:
            raise ValidationError("Centers must be points in R^3")
        if self.metric_id not in METRICS:
            raise ValidationError(f"Unknown metric '{self.metric_id}'")
        if self.foliation_id not in FOLIATIONS:
            raise ValidationError(f"Unknown foliation '{self.foliation_id}'")
        if not 0.0 < self.radius_M < self.radius_Mprime:
            raise ValidationError(
                f"Need 0 < radius_M < radius_Mprime, got {self.radius_M}, {self.radius_Mprime}"
            )
        # q takes values in (0, 1], so the factor stays positive iff eps > -1
        if self.metric_id == "conformal" and self.metric_eps <= -1.0:
            raise ValidationError(
                f"Conformal factor not positive definite for eps={self.metric_eps}"
            )

    # ------------------------------------------------------------------ domain

    @property
    def c_M(self):
        return np.asarray(self.center, dtype=float)

    @property
    def c_x(self):
        return np.asarray(self.foliation_center, dtype=float)

    def _radius(self, domain):
        if domain == "M":
            return self.radius_M
        if domain == "Mprime":
            return self.radius_Mprime
        raise ValueError(f"Unknown domain '{domain}'")

    def distance_to_boundary(self, z, domain="Mprime"):
        """Signed distance to the boundary sphere, positive inside"""
        z = np.asarray(z, dtype=float)
        return self._radius(domain) - np.linalg.norm(z - self.c_M, axis=-1)

    def inside(self, z, domain="Mprime"):
        return self.distance_to_boundary(z, domain) >= 0.0

    def geometry_hash(self):
        """Stable 40-character identifier of this geometry"""
        payload = repr(sorted(asdict(self).items())).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:40]

    # ------------------------------------------------------------------ metric

    def metric_factor(self, z):
        z = np.asarray(z, dtype=float)
        if self.metric_id == "euclidean":
            return np.ones(z.shape[:-1])
        q = np.exp(-np.sum((z - self.c_M) ** 2, axis=-1))
        return 1.0 + self.metric_eps * q

    def metric_factor_grad(self, z):
        z = np.asarray(z, dtype=float)
        if self.metric_id == "euclidean":
            return np.zeros_like(z)
        d = z - self.c_M
        q = np.exp(-np.sum(d**2, axis=-1))
        return -2.0 * self.metric_eps * q[..., None] * d

    def metric_norm_sq(self, z, v):
        """g_z(v, v)"""
        return self.metric_factor(z) * np.sum(np.asarray(v) ** 2, axis=-1)

    def acceleration(self, z, v):
        """Geodesic acceleration -Gamma^k_ij v^i v^j"""
        v = np.asarray(v, dtype=float)
        if self.metric_id == "euclidean":
            return np.zeros_like(v)
        e = self.metric_factor(z)[..., None]
        grad = self.metric_factor_grad(z)
        e_dot = np.sum(grad * v, axis=-1)[..., None]
        speed_sq = np.sum(v * v, axis=-1)[..., None]
        return -v * e_dot / e + speed_sq * grad / (2.0 * e)

    # --------------------------------------------------------------- foliation

    def foliation(self, z):
        z = np.asarray(z, dtype=float)
        return np.sum((z - self.c_x) ** 2, axis=-1) + self.offset

    def foliation_grad(self, z):
        return 2.0 * (np.asarray(z, dtype=float) - self.c_x)

    def foliation_increment(self, z, w):
        """x(z + w) - x(z) without cancellation"""
        w = np.asarray(w, dtype=float)
        return np.sum(self.foliation_grad(z) * w, axis=-1) + np.sum(w * w, axis=-1)

    def foliation_second(self, z, v, a):
        """Second t-derivative of x along a curve with velocity v, acceleration a"""
        return 2.0 * np.sum(np.asarray(v) ** 2, axis=-1) + np.sum(
            self.foliation_grad(z) * a, axis=-1
        )

    def x_range(self, domain="Mprime"):
        """Closed-form (min, max) of x over a domain ball"""
        d = np.linalg.norm(self.c_x - self.c_M)
        r = self._radius(domain)
        r_min = max(0.0, d - r)
        return r_min**2 + self.offset, (d + r) ** 2 + self.offset

    def sup_abs_x(self, domain="Mprime"):
        x_min, x_max = self.x_range(domain)
        return max(abs(x_min), abs(x_max))

    def min_foliation_grad(self, domain="Mprime"):
        d = np.linalg.norm(self.c_x - self.c_M)
        return 2.0 * max(0.0, d - self._radius(domain))

    @property
    def x_ref(self):
        """Foliation value at the centre of M"""
        return float(self.foliation(self.c_M))

    def nominal_exit_bound(self):
        """Exit bound 2*eps/C0 + 4*C1/eps at eps = 1, C0 = 2"""
        return 1.0 + 4.0 * self.sup_abs_x()


def check_foliation(geometry):
    """Raise if grad x vanishes somewhere on M'"""
    if geometry.min_foliation_grad() < GRADIENT_FLOOR:
        raise DegenerateFoliationError(
            f"grad x vanishes on M': foliation center {geometry.foliation_center} "
            f"lies within {geometry.radius_Mprime} of {geometry.center}"
        )


def christoffel(geometry, z):
    """
    Christoffel symbols Gamma^k_ij at z, indexed [k, i, j]

    Args:
        geometry: GeometrySpec
        z: Point in M'

    Returns:
        np.ndarray: (3, 3, 3) array symmetric in (i, j)
    """
    z = np.asarray(z, dtype=float)
    if not geometry.inside(z):
        raise DomainError(f"Point {z.tolist()} lies outside M'")
    e = geometry.metric_factor(z)
    grad = geometry.metric_factor_grad(z)
    eye = np.eye(3)
    gamma = (
        np.einsum("ki,j->kij", eye, grad)
        + np.einsum("kj,i->kij", eye, grad)
        - np.einsum("ij,k->kij", eye, grad)
    )
    return gamma / (2.0 * e)


# ---------------------------------------------------------------- tangents


@dataclass
class TangentDecomposition:
    """v = lam * T(z) + omega with dx(omega) = 0"""

    lam: float
    omega: np.ndarray


def transversal(geometry, z):
    """Metric-normalised transversal T with dx(T) = 1 and T orthogonal to the leaf"""
    grad = geometry.foliation_grad(z)
    norm_sq = np.sum(grad * grad, axis=-1)
    if np.any(np.sqrt(norm_sq) < GRADIENT_FLOOR):
        raise DegenerateFoliationError("grad x vanishes at the base point")
    # grad_g x / |grad_g x|_g^2 reduces to grad x / |grad x|^2 for conformal metrics
    return grad / norm_sq[..., None]


def decompose_tangent(geometry, z, v):
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    T = transversal(geometry, z)
    lam = np.sum(geometry.foliation_grad(z) * v, axis=-1)
    omega = v - lam[..., None] * T if np.ndim(lam) else v - lam * T
    return TangentDecomposition(lam=lam, omega=omega)


def compose_tangent(geometry, z, lam, omega):
    T = transversal(geometry, z)
    lam = np.asarray(lam, dtype=float)
    return lam[..., None] * T + np.asarray(omega, dtype=float)


def leaf_frame(geometry, z):
    """
    Deterministic g-orthonormal frame (e1, e2) of ker dx_z.
    Gram-Schmidt from the z-axis, or the y-axis when the normal is close to it.
    """
    z = np.asarray(z, dtype=float)
    grad = geometry.foliation_grad(z)
    norm = np.linalg.norm(grad, axis=-1)
    if np.any(norm < GRADIENT_FLOOR):
        raise DegenerateFoliationError("grad x vanishes at the base point")
    n = grad / norm[..., None]
    ref = np.zeros_like(n)
    use_y = np.abs(n[..., 2]) > 0.9
    ref[..., 2] = np.where(use_y, 0.0, 1.0)
    ref[..., 1] = np.where(use_y, 1.0, 0.0)
    e1 = ref - np.sum(ref * n, axis=-1)[..., None] * n
    e1 /= np.linalg.norm(e1, axis=-1)[..., None]
    e2 = np.cross(n, e1)
    scale = 1.0 / np.sqrt(geometry.metric_factor(z))[..., None]
    return e1 * scale, e2 * scale


def leaf_directions(geometry, z, theta):
    """Unit leaf vectors cos(theta) e1 + sin(theta) e2 at a single point, shape (W, 3)"""
    e1, e2 = leaf_frame(geometry, z)
    theta = np.asarray(theta, dtype=float)
    return np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2


def leaf_coordinates(geometry, z, points):
    """Linear leaf coordinates y_i(p) = g_z(e_i, p - z), shape (..., 2)"""
    e1, e2 = leaf_frame(geometry, z)
    e = geometry.metric_factor(z)
    d = np.asarray(points, dtype=float) - np.asarray(z, dtype=float)
    return np.stack([e * (d @ e1), e * (d @ e2)], axis=-1)


# ---------------------------------------------------------------- tracing


@dataclass
class GeodesicTrace:
    """Samples of one geodesic on the grid t_k = k * step, ordered by t"""

    t: np.ndarray
    z: np.ndarray
    v: np.ndarray
    exited_forward: bool
    exited_backward: bool
    t_exit_forward: float
    t_exit_backward: float

    def gamma1(self, geometry):
        return geometry.foliation(self.z)

    def gamma2(self, geometry, base_point):
        return leaf_coordinates(geometry, base_point, self.z)


@dataclass
class BatchTrace:
    """
    Many geodesics sampled on a shared grid t_k = k * step.
    `w` holds displacements from the base points, `inside` marks samples in M'
    reached without leaving M'.
    """

    z0: np.ndarray
    t: np.ndarray
    w: np.ndarray
    v: np.ndarray
    inside: np.ndarray
    t_exit_forward: np.ndarray
    t_exit_backward: np.ndarray
    step: float

    @property
    def points(self):
        return self.z0[:, None, :] + self.w


def _rk4_step(geometry, z0, w, v, dt):
    def accel(w_, v_):
        return geometry.acceleration(z0 + w_, v_)

    k1w, k1v = v, accel(w, v)
    k2w, k2v = v + 0.5 * dt * k1v, accel(w + 0.5 * dt * k1w, v + 0.5 * dt * k1v)
    k3w, k3v = v + 0.5 * dt * k2v, accel(w + 0.5 * dt * k2w, v + 0.5 * dt * k2v)
    k4w, k4v = v + dt * k3v, accel(w + dt * k3w, v + dt * k3v)
    w_next = w + dt / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)
    v_next = v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return w_next, v_next


def _march(geometry, z0, v0, dt, n_steps=None, t_limit=None):
    """
    RK4 march in one t-direction. Runs n_steps steps, or until every ray
    has left M' when n_steps is None.
    """
    w = np.zeros_like(z0)
    v = v0.copy()
    ws, vs = [w], [v]
    alive = geometry.inside(z0)
    flags = [alive.copy()]
    k = 0
    while True:
        if n_steps is not None:
            if k >= n_steps:
                break
        elif not alive.any():
            break
        elif t_limit is not None and k * abs(dt) > t_limit:
            worst = int(np.flatnonzero(alive)[0])
            raise IntegrationFailure(
                f"Geodesic from {z0[worst].tolist()} with velocity {v0[worst].tolist()} "
                f"did not leave M' within t = {t_limit:.4g}"
            )
        w, v = _rk4_step(geometry, z0, w, v, dt)
        k += 1
        ws.append(w)
        vs.append(v)
        alive = alive & geometry.inside(z0 + w)
        flags.append(alive.copy())
    return np.stack(ws, axis=1), np.stack(vs, axis=1), np.stack(flags, axis=1)


def _line(z0, v0, dt, n_steps):
    k = np.arange(n_steps + 1) * dt
    w = k[None, :, None] * v0[:, None, :]
    v = np.broadcast_to(v0[:, None, :], w.shape).copy()
    return w, v


def _line_exit(geometry, z0, v0):
    """Parameters (t_minus, t_plus) where the straight line meets the M' sphere"""
    d = z0 - geometry.c_M
    a = np.sum(v0 * v0, axis=-1)
    b = 2.0 * np.sum(d * v0, axis=-1)
    c = np.sum(d * d, axis=-1) - geometry.radius_Mprime**2
    disc = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
    return (-b - disc) / (2.0 * a), (-b + disc) / (2.0 * a)


def _exit_parameter(geometry, z0, w, flags, dt):
    """Linear interpolation of the boundary crossing along one direction"""
    n = z0.shape[0]
    t_exit = np.full(n, np.nan)
    left = ~flags[:, -1]
    if not left.any():
        return t_exit
    j = np.argmin(flags, axis=1)
    rows = np.flatnonzero(left & (j > 0))
    d_in = geometry.distance_to_boundary(z0[rows] + w[rows, j[rows] - 1])
    d_out = geometry.distance_to_boundary(z0[rows] + w[rows, j[rows]])
    frac = d_in / (d_in - d_out)
    t_exit[rows] = (j[rows] - 1 + frac) * abs(dt)
    return t_exit


def _speed_floor(geometry, z0, v0):
    return float(np.sqrt(np.min(geometry.metric_norm_sq(z0, v0))))


def trace_batch(geometry, z, v, step, t_limit=None, exact_lines=True, window=None):
    """
    Trace many geodesics in both t-directions on the grid t_k = k * step

    Args:
        geometry: GeometrySpec
        z: Base points (N, 3)
        v: Initial velocities (N, 3)
        step: Positive parameter step
        t_limit: Non-exit guard (default: 2 * nominal exit bound / speed)
        exact_lines: Use closed-form straight lines for the Euclidean metric
        window: If given, march exactly this far in t instead of stopping at exit

    Returns:
        BatchTrace: Shared-grid samples with exit bookkeeping
    """
    z0 = np.atleast_2d(np.asarray(z, dtype=float))
    v0 = np.atleast_2d(np.asarray(v, dtype=float))
    if step <= 0:
        raise ValidationError(f"Step must be positive, got {step}")
    if np.any(np.linalg.norm(v0, axis=-1) == 0.0):
        raise ValidationError("Zero initial velocity")

    if t_limit is None:
        t_limit = 2.0 * geometry.nominal_exit_bound() / max(
            _speed_floor(geometry, z0, v0), 1e-12
        )

    straight = exact_lines and geometry.metric_id == "euclidean"
    halves = []
    for sign in (1.0, -1.0):
        if window is not None:
            n_steps = int(np.ceil(window / step - 1e-12))
        elif straight:
            t_minus, t_plus = _line_exit(geometry, z0, v0)
            reach = t_plus if sign > 0 else -t_minus
            n_steps = int(np.floor(np.max(reach) / step)) + 1
            if n_steps * step > t_limit + step:
                raise IntegrationFailure(
                    f"Straight geodesic exceeds the parameter bound {t_limit:.4g}"
                )
        else:
            n_steps = None

        if straight:
            w, vel = _line(z0, v0, sign * step, n_steps)
            flags = np.logical_and.accumulate(
                geometry.inside(z0[:, None, :] + w), axis=1
            )
        else:
            w, vel, flags = _march(
                geometry, z0, v0, sign * step, n_steps=n_steps, t_limit=t_limit
            )
        t_exit = _exit_parameter(geometry, z0, w, flags, step)
        if straight:
            t_minus, t_plus = _line_exit(geometry, z0, v0)
            exact = t_plus if sign > 0 else -t_minus
            t_exit = np.where(np.isnan(t_exit), np.nan, exact)
        halves.append((w, vel, flags, t_exit))

    (wf, vf, ff, tf), (wb, vb, fb, tb) = halves
    n_back = wb.shape[1] - 1
    t = np.arange(-n_back, wf.shape[1]) * step
    return BatchTrace(
        z0=z0,
        t=t,
        w=np.concatenate([wb[:, :0:-1], wf], axis=1),
        v=np.concatenate([vb[:, :0:-1], vf], axis=1),
        inside=np.concatenate([fb[:, :0:-1], ff], axis=1),
        t_exit_forward=tf,
        t_exit_backward=-tb,
        step=step,
    )


def trace_geodesic(geometry, z, v, step=config.TRACE_STEP, t_limit=None):
    """
    Trace one geodesic with classical RK4 in both directions until it leaves M'.
    The last inside sample and the first outside sample are kept at each end.

    Args:
        geometry: GeometrySpec
        z: Base point in M'
        v: Non-zero initial velocity
        step: Parameter step

    Returns:
        GeodesicTrace
    """
    z = np.asarray(z, dtype=float)
    if not geometry.inside(z):
        raise DomainError(f"Base point {z.tolist()} lies outside M'")
    batch = trace_batch(geometry, z, v, step, t_limit=t_limit, exact_lines=False)
    inside = batch.inside[0]
    idx = np.flatnonzero(inside)
    lo = max(idx[0] - 1, 0)
    hi = min(idx[-1] + 1, len(inside) - 1)
    keep = slice(lo, hi + 1)
    return GeodesicTrace(
        t=batch.t[keep],
        z=batch.points[0, keep],
        v=batch.v[0, keep],
        exited_forward=bool(not np.isnan(batch.t_exit_forward[0])),
        exited_backward=bool(not np.isnan(batch.t_exit_backward[0])),
        t_exit_forward=float(batch.t_exit_forward[0]),
        t_exit_backward=float(batch.t_exit_backward[0]),
    )


def alpha(geometry, z, lam, omega, fd_step=0.05, substeps=4):
    """
    Half the second derivative of x along the geodesic with initial velocity
    lam * T + omega, by a 5-point central difference on the traced curve.
    Accepts a single point or arrays (N, 3), (N,), (N, 3).
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z0 = np.atleast_2d(z)
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    z0, lam, omega = np.broadcast_arrays(z0, lam[:, None], omega)
    lam = lam[:, 0]
    v0 = compose_tangent(geometry, z0, lam, omega)

    dt = fd_step / substeps
    values = {}
    for sign in (1.0, -1.0):
        w, _, _ = _march(geometry, z0, v0, sign * dt, n_steps=2 * substeps)
        values[sign * 1] = geometry.foliation_increment(z0, w[:, substeps])
        values[sign * 2] = geometry.foliation_increment(z0, w[:, 2 * substeps])
    second = (
        -values[2.0] + 16.0 * values[1.0] + 16.0 * values[-1.0] - values[-2.0]
    ) / (12.0 * fd_step**2)
    result = 0.5 * second
    return float(result[0]) if single else result


# ---------------------------------------------------------------- certificates


@dataclass
class ConvexityCertificate:
    epsilon: float
    C0: float
    C1: float
    T_bound: float
    lambda0: float
    C_quad: float
    n_samples: int
    max_exit: float
    verified_min: float = float("nan")

    def to_dict(self):
        return asdict(self)


def sample_ball(rng, center, radius, n):
    """Uniform samples in a ball"""
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1)[:, None]
    r = radius * rng.uniform(size=n) ** (1.0 / 3.0)
    return np.asarray(center) + r[:, None] * direction


def unit_speed_velocities(geometry, z, lam, theta):
    """Velocities lam * T + omega of unit g-speed with omega along angle theta"""
    T = transversal(geometry, z)
    e1, e2 = leaf_frame(geometry, z)
    g_tt = geometry.metric_norm_sq(z, T)
    remainder = 1.0 - lam**2 * g_tt
    if np.any(remainder <= 0.0):
        raise ValidationError("Transverse component too large for unit speed")
    omega = np.sqrt(remainder)[:, None] * (
        np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2
    )
    return lam[:, None] * T + omega


def _quadratic_ratios(geometry, z, lam, trace, step):
    """2 (x(gamma(t)) - x(z) - lam t) / t^2 on the traced samples, and where it is defined"""
    increment = geometry.foliation_increment(z[:, None, :], trace.w)
    t = trace.t[None, :]
    usable = trace.inside & (np.abs(t) >= 0.5 * step)
    ratio = 2.0 * (increment - lam[:, None] * t) / np.where(usable, t * t, 1.0)
    return ratio, usable


def certify_convexity(
    geometry,
    n_samples=config.CERTIFICATE_SAMPLES,
    epsilon=config.CERTIFICATE_EPSILON,
    step=config.TRACE_STEP,
    seed=0,
):
    """
    Sample unit-speed geodesics with |lambda| <= epsilon over M' and certify
    strict convexity of the foliation along them. C_quad is fitted on one
    sample set with a relative margin and then checked on an independent one;
    lambda0 is the sampled range epsilon.

    Args:
        geometry: GeometrySpec
        n_samples: Number of geodesics (at least 1000)
        epsilon: Transverse slope bound
        step: Tracing step
        seed: Seed of the sampling generator

    Returns:
        ConvexityCertificate
    """
    if n_samples < 1000:
        raise ValidationError(f"Need at least 1000 sampled geodesics, got {n_samples}")
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    check_foliation(geometry)

    rng = np.random.default_rng(seed)
    z = sample_ball(rng, geometry.c_M, geometry.radius_Mprime, n_samples)
    lam = epsilon * np.resize(np.linspace(-1.0, 1.0, 21), n_samples)
    theta = rng.uniform(0.0, 2.0 * np.pi, n_samples)
    v = unit_speed_velocities(geometry, z, lam, theta)

    trace = trace_batch(geometry, z, v, step)
    points = trace.points
    vel = trace.v
    mask = trace.inside

    g1_dot = np.sum(geometry.foliation_grad(points) * vel, axis=-1)
    g1_ddot = geometry.foliation_second(
        points, vel, geometry.acceleration(points, vel)
    )
    near_critical = mask & (np.abs(g1_dot) <= epsilon)
    C0 = float(np.min(g1_ddot[near_critical]))
    if C0 <= 0.0:
        row = int(np.argwhere(near_critical & (g1_ddot <= 0.0))[0][0])
        raise CertificateFailure(
            f"Concavity violated on geodesic from {z[row].tolist()}",
            witness={"z": z[row].tolist(), "v": v[row].tolist()},
        )

    C1 = geometry.sup_abs_x()
    T_bound = 2.0 * epsilon / C0 + 4.0 * C1 / epsilon
    exits = np.concatenate([trace.t_exit_forward, trace.t_exit_backward])
    max_exit = float(np.nanmax(exits))
    if max_exit > T_bound:
        row = int(np.nanargmax(exits)) % n_samples
        raise CertificateFailure(
            f"Exit parameter {max_exit:.4g} exceeds T_bound {T_bound:.4g}",
            witness={"z": z[row].tolist(), "v": v[row].tolist()},
        )

    ratio, usable = _quadratic_ratios(geometry, z, lam, trace, step)
    C_quad = config.CERTIFICATE_MARGIN * float(min(C0, np.min(ratio[usable])))
    if C_quad <= 0.0:
        row = int(np.argwhere(usable & (ratio <= 0.0))[0][0])
        raise CertificateFailure(
            f"Quadratic lower bound fails on geodesic from {z[row].tolist()}",
            witness={"z": z[row].tolist(), "v": v[row].tolist()},
        )

    # held-out geodesics from an independent stream
    check = np.random.default_rng([seed, 1])
    z_check = sample_ball(check, geometry.c_M, geometry.radius_Mprime, n_samples)
    lam_check = epsilon * check.uniform(-1.0, 1.0, n_samples)
    v_check = unit_speed_velocities(
        geometry, z_check, lam_check, check.uniform(0.0, 2.0 * np.pi, n_samples)
    )
    trace_check = trace_batch(geometry, z_check, v_check, step)
    ratio_check, usable_check = _quadratic_ratios(geometry, z_check, lam_check, trace_check, step)
    verified_min = float(np.min(ratio_check[usable_check]))
    if verified_min < C_quad:
        row = int(np.argwhere(usable_check & (ratio_check < C_quad))[0][0])
        raise CertificateFailure(
            f"Held-out geodesic from {z_check[row].tolist()} falls below C_quad={C_quad:.6g} "
            f"(ratio {verified_min:.6g})",
            witness={"z": z_check[row].tolist(), "v": v_check[row].tolist()},
        )

    certificate = ConvexityCertificate(
        epsilon=float(epsilon),
        C0=C0,
        C1=float(C1),
        T_bound=float(T_bound),
        lambda0=float(epsilon),
        C_quad=C_quad,
        n_samples=int(n_samples),
        max_exit=max_exit,
        verified_min=verified_min,
    )
    logger.info(
        f"Convexity certified: C0={C0:.6g}, C_quad={C_quad:.6g} (held-out min {verified_min:.6g}), "
        f"T_bound={T_bound:.4g}, max exit={max_exit:.4g}"
    )
    return certificate


@lru_cache(maxsize=16)
def cached_certificate(geometry):
    """Certificate with default sampling, computed once per geometry"""
    return certify_convexity(geometry)
