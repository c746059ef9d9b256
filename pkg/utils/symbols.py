"""
Symbol Module
Full and principal symbols of A_h in foliation-rescaled variables, the
Gaussian-cutoff closed form, the high-frequency limit, a plane-wave probe
through apply_A, and sampled ellipticity certificates.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.interpolate import RectBivariateSpline
from tqdm import tqdm

import config
from utils.errors import DomainError, ValidationError, WindowError
from utils.geometry import (
    alpha,
    cached_certificate,
    leaf_coordinates,
    leaf_directions,
    trace_batch,
    transversal,
)
from utils.logger_setup import setup_logger
from utils.normal_operator import (
    WeightSpec,
    build_bundle,
    check_damping,
    lambda_hat_nodes,
    omega_nodes,
)

logger = setup_logger()

# a_0 / gaussian_closed_form for the alpha-matched Gaussian cutoff
GAUSSIAN_NORMALISATION = 2.0 * np.pi
CLOSED_FORM_XI_EXPONENT = -0.5
# |a_0(R zeta)| * R -> HIGHFREQ_CONSTANT * highfreq_limit(zeta)
HIGHFREQ_CONSTANT = 2.0 * np.pi

LOG_TRUNCATION = np.log(1e12)
LOG_FLOOR = -745.0
COARSE_LAMBDA_NODES = 65
COARSE_T_STEP = 0.05
FINE_STEP_CAP = 0.05
BLOCK_ROWS = 64
FOOTPRINT_MASS = 0.99


@dataclass
class SymbolSample:
    z: tuple
    xi: float
    eta: tuple
    h: float
    value: complex
    variant: str = "global"

    def to_dict(self):
        return {
            "z0": self.z[0],
            "z1": self.z[1],
            "z2": self.z[2],
            "xi": self.xi,
            "eta1": self.eta[0],
            "eta2": self.eta[1],
            "h": self.h,
            "re": self.value.real,
            "im": self.value.imag,
            "abs": abs(self.value),
            "variant": self.variant,
        }


def _eta_vector(eta):
    eta = np.asarray(eta, dtype=float).reshape(-1)
    if eta.size != 2:
        raise ValidationError(f"eta must have two leaf components, got {eta.size}")
    return eta


def leaf_alpha(geometry, z, theta):
    """alpha(z, 0, omega(theta)) for each angle"""
    omega = leaf_directions(geometry, z, theta)
    base = np.broadcast_to(np.asarray(z, dtype=float), omega.shape)
    return np.asarray(alpha(geometry, base, np.zeros(len(theta)), omega))


def principal_symbol(geometry, op_config, z, xi, eta, resolution=1.0, t_method="closed"):
    """
    a_0(z, xi, eta) with Gauss-Legendre / trapezoid quadrature in (lam_hat, theta);
    the t_hat integral is done in closed form, or by trapezoid quadrature of
    the h = 0 integrand with t_method="quadrature"

    Args:
        geometry: GeometrySpec
        op_config: NormalOpConfig (cutoff only)
        z: Base point
        xi: Transverse frequency
        eta: Leaf frequency (2,)
        resolution: Multiplier on all node counts
        t_method: "closed" or "quadrature"

    Returns:
        complex
    """
    if t_method not in ("closed", "quadrature"):
        raise ValidationError(f"Unknown t_hat method '{t_method}'")
    z = np.asarray(z, dtype=float)
    eta = _eta_vector(eta)
    xi = float(xi)
    eta_norm = float(np.linalg.norm(eta))

    n_theta = int(np.ceil(resolution * (64 + 24 * eta_norm)))
    theta, w_theta = omega_nodes(n_theta)
    alpha_theta = leaf_alpha(geometry, z, theta)
    lo, hi = op_config.cutoff.support()
    k_max = (max(abs(lo), abs(hi)) * abs(xi) + eta_norm) / (2.0 * alpha_theta.min())
    n_lambda = int(np.ceil(resolution * (48 + 16 * k_max)))
    lam_hat, w_lam = lambda_hat_nodes(op_config.cutoff, n_lambda)

    damped = 1.0 - 1j * xi
    t_hat = None
    chunk = max(1, 2_000_000 // lam_hat.size)
    if t_method == "quadrature":
        t_hat = _t_hat_nodes(alpha_theta, lam_hat, xi, eta_norm, resolution)
        chunk = max(1, 2_000_000 // (lam_hat.size * t_hat.size))
    total = 0j
    for start in range(0, n_theta, chunk):
        sl = slice(start, start + chunk)
        a = alpha_theta[sl][:, None]
        kappa = (eta[0] * np.cos(theta[sl]) + eta[1] * np.sin(theta[sl]))[:, None]
        lam = lam_hat[None, :]
        chi = op_config.cutoff.value(lam, a)
        if t_hat is None:
            t_integral = np.sqrt(np.pi / (a * damped)) * np.exp(
                (damped * lam - 1j * kappa) ** 2 / (4.0 * a * damped)
            )
        else:
            tt = t_hat[None, None, :]
            phase = (
                -damped * (lam[..., None] * tt + a[..., None] * tt * tt)
                + 1j * kappa[..., None] * tt
            )
            t_integral = np.trapezoid(np.exp(phase), t_hat, axis=-1)
        total += np.sum(w_theta[sl][:, None] * w_lam[None, :] * chi * t_integral)
    return complex(total)


def _t_hat_nodes(alpha_theta, lam_hat, xi, eta_norm, resolution):
    """
    Uniform t_hat grid for the h = 0 integrand: wide enough that the Gaussian
    envelope drops below exp(-LOG_TRUNCATION), fine enough that aliased
    frequencies of the trapezoid rule are suppressed to the same level
    """
    a_min, a_max = float(alpha_theta.min()), float(alpha_theta.max())
    lam_max = float(np.max(np.abs(lam_hat)))
    half = lam_max / (2.0 * a_min) + np.sqrt(LOG_TRUNCATION / a_min) + 1.0
    band = (
        abs(xi) * lam_max
        + eta_norm
        + 2.0 * np.sqrt(LOG_TRUNCATION * a_max * (1.0 + xi * xi))
    )
    n = int(np.ceil(resolution * 2.0 * half * band / (2.0 * np.pi))) + 1
    return np.linspace(-half, half, max(n, 65))


def gaussian_closed_form(geometry, z, xi, eta):
    """Integral over the leaf circle of (1+xi^2)^(-1/2) exp(-(eta.omega)^2 / (2 alpha (1+xi^2)))"""
    eta = _eta_vector(eta)
    n = int(np.ceil(256 + 16 * np.linalg.norm(eta)))
    theta, w = omega_nodes(n)
    alpha_theta = leaf_alpha(geometry, z, theta)
    kappa = eta[0] * np.cos(theta) + eta[1] * np.sin(theta)
    factor = 1.0 + float(xi) ** 2
    return float(
        np.sum(
            w
            * factor**CLOSED_FORM_XI_EXPONENT
            * np.exp(-(kappa**2) / (2.0 * alpha_theta * factor))
        )
    )


def highfreq_limit(geometry, op_config, z, direction):
    """
    Integral of the cutoff over the critical set lam_hat = -(eta_hat.omega)/xi_hat

    Args:
        direction: Unit vector (xi_hat, eta_hat_1, eta_hat_2)

    Returns:
        float
    """
    direction = np.asarray(direction, dtype=float).reshape(-1)
    if direction.size != 3 or abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValidationError("High-frequency direction must be a unit 3-vector")
    xi_hat, eta_hat = direction[0], direction[1:]
    eta_norm = float(np.linalg.norm(eta_hat))
    cutoff = op_config.cutoff

    grid, _ = omega_nodes(256)
    profile = leaf_alpha(geometry, z, grid)

    def alpha_at(th):
        return np.interp(np.mod(th, 2.0 * np.pi), grid, profile, period=2.0 * np.pi)

    lo, hi = cutoff.support()
    if max(abs(lo), abs(hi)) * abs(xi_hat) < 0.9 * eta_norm:
        # each lam_hat meets the circle at two angles
        lam, w = lambda_hat_nodes(cutoff, 256)
        theta_eta = np.arctan2(eta_hat[1], eta_hat[0])
        spread = np.arccos(np.clip(-xi_hat * lam / eta_norm, -1.0, 1.0))
        jacobian = 1.0 / np.sqrt(eta_norm**2 - (xi_hat * lam) ** 2)
        total = 0.0
        for sign in (1.0, -1.0):
            chi = cutoff.value(lam, alpha_at(theta_eta + sign * spread))
            total += np.sum(w * chi * jacobian)
        return float(total)

    theta, w = omega_nodes(2048)
    kappa = eta_hat[0] * np.cos(theta) + eta_hat[1] * np.sin(theta)
    chi = cutoff.value(-kappa / xi_hat, alpha_at(theta))
    return float(np.sum(w * chi) / abs(xi_hat))


# ---------------------------------------------------------------- h > 0


def _rescale(geometry, z, h, variant):
    """(transverse scale s, base foliation value x)"""
    x = float(geometry.foliation(z))
    if variant == "global":
        return np.sqrt(h), x
    if x <= 0.0:
        raise DomainError(f"Scattering symbol needs x(z) > 0, got {x:.4g}")
    return np.sqrt(h) * x, x


def symbol_window(geometry, op_config, z, h, variant="global"):
    """
    Half-width of the t_hat range: where the certified quadratic lower bound
    pushes the weighted integrand below 1e-12, capped by T_bound / scale
    """
    certificate = cached_certificate(geometry)
    s, _ = _rescale(geometry, z, h, variant)
    lo, hi = op_config.cutoff.support()
    reach = max(abs(lo), abs(hi))
    c = certificate.C_quad
    t_decay = 1.2 * (reach + np.sqrt(reach**2 + 2.0 * c * LOG_TRUNCATION)) / c
    return float(min(t_decay, certificate.T_bound / s))


def _rate(values, spacing, axis, mask):
    slope = np.abs(np.gradient(values, spacing, axis=axis))
    return float(slope[mask].max()) if mask.any() else 0.0


def _fine_step(rate, resolution):
    step = FINE_STEP_CAP if rate <= 0.0 else min(FINE_STEP_CAP, np.pi / (1.5 * rate))
    return step / resolution


def _plane_integral(op_config, alpha_value, lam_c, t_hat, G1, G2, log_d, xi, eta, resolution):
    """
    Double integral over (lam_hat, t_hat) of chi * exp(log_d + i phase) for one
    leaf direction, from coarse samples refined by bicubic splines
    """
    cutoff = op_config.cutoff
    with np.errstate(divide="ignore"):
        log_chi_c = np.maximum(np.log(cutoff.value(lam_c, alpha_value)), LOG_FLOOR)
    log_weight = log_chi_c[:, None] + log_d
    significant = log_weight >= log_weight.max() - LOG_TRUNCATION
    phase = xi * G1 + eta[0] * G2[..., 0] + eta[1] * G2[..., 1]

    d_lam = _fine_step(_rate(phase, lam_c[1] - lam_c[0], 0, significant), resolution)
    d_t = _fine_step(_rate(phase, t_hat[1] - t_hat[0], 1, significant), resolution)
    n_fine = int(np.ceil((lam_c[-1] - lam_c[0]) / d_lam)) + 1
    lam_f = np.linspace(lam_c[0], lam_c[-1], n_fine)
    w_lam = np.full(n_fine, lam_f[1] - lam_f[0])
    w_lam[[0, -1]] *= 0.5
    with np.errstate(divide="ignore"):
        log_chi_f = np.maximum(np.log(cutoff.value(lam_f, alpha_value)), LOG_FLOOR)

    splines = [
        RectBivariateSpline(lam_c, t_hat, arr)
        for arr in (G1, G2[..., 0], G2[..., 1], log_d)
    ]
    total = 0j
    for start in range(0, n_fine, BLOCK_ROWS):
        block = lam_f[start : start + BLOCK_ROWS]
        i0 = max(int(np.searchsorted(lam_c, block[0])) - 1, 0)
        i1 = min(int(np.searchsorted(lam_c, block[-1])) + 2, lam_c.size)
        cols = np.flatnonzero(significant[i0:i1].any(axis=0))
        if cols.size == 0:
            continue
        t_lo = t_hat[max(cols[0] - 1, 0)]
        t_hi = t_hat[min(cols[-1] + 1, t_hat.size - 1)]
        t_f = np.linspace(t_lo, t_hi, int(np.ceil((t_hi - t_lo) / d_t)) + 1)
        g1, g2a, g2b, dmp = (s(block, t_f) for s in splines)
        exponent = (
            log_chi_f[start : start + BLOCK_ROWS, None]
            + dmp
            + 1j * (xi * g1 + eta[0] * g2a + eta[1] * g2b)
        )
        rows = np.trapezoid(np.exp(exponent), dx=t_f[1] - t_f[0], axis=1)
        total += np.sum(w_lam[start : start + BLOCK_ROWS] * rows)
    return total


def symbol_quadrature(
    geometry, op_config, z, xi, eta, h, variant=None, resolution=1.0
):
    """
    a_h(z, xi, eta) by quadrature over exact geodesics in the rescaled
    variables t = s t_hat, lambda = s lam_hat (s = sqrt(h), or sqrt(h) x in the
    scattering variant). Geodesics run through the ambient space, not only M'.

    Args:
        geometry: GeometrySpec
        op_config: NormalOpConfig (cutoff, n_omega, damping check)
        z: Base point in M'
        xi: Transverse frequency (xi_sc in the scattering variant)
        eta: Leaf frequency (eta_sc in the scattering variant)
        h: Semiclassical parameter in (0, 0.5]
        variant: global | scattering, defaults to the config's weight
        resolution: Multiplier on every quadrature resolution

    Returns:
        complex: Includes the density factor s^2
    """
    variant = variant or op_config.variant
    if not 0.0 < h <= 0.5:
        raise ValidationError(f"Symbol quadrature needs h in (0, 0.5], got {h}")
    z = np.asarray(z, dtype=float)
    if not geometry.inside(z):
        raise DomainError(f"Point {z.tolist()} lies outside M'")
    eta = _eta_vector(eta)
    xi = float(xi)
    s, x0 = _rescale(geometry, z, h, variant)
    local = replace(op_config, h=h, weight=WeightSpec(variant))
    phi = local.weight.phi
    # rescaled transverse and leaf coordinates
    s1 = h if variant == "global" else h * x0**2
    s2 = np.sqrt(h) if variant == "global" else np.sqrt(h) * x0

    window = symbol_window(geometry, op_config, z, h, variant)
    n_theta = int(np.ceil(resolution * (op_config.n_omega + 12 * np.linalg.norm(eta))))
    theta, w_theta = omega_nodes(n_theta)
    alpha_theta = leaf_alpha(geometry, z, theta)
    lo, hi = op_config.cutoff.support()
    lam_c = np.linspace(lo, hi, COARSE_LAMBDA_NODES)
    T = transversal(geometry, z)

    total = 0j
    for start in range(0, n_theta, 16):
        sl = slice(start, start + 16)
        omega = leaf_directions(geometry, z, theta[sl])
        v = (s * lam_c)[None, :, None] * T + omega[:, None, :]
        W = omega.shape[0]
        trace = trace_batch(
            geometry,
            np.broadcast_to(z, (W * lam_c.size, 3)),
            v.reshape(-1, 3),
            COARSE_T_STEP * s,
            window=window * s,
        )
        t_hat = trace.t / s
        gamma1 = x0 + geometry.foliation_increment(z, trace.w)
        positive = gamma1 > 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            log_d = (phi(np.where(positive, gamma1, x0)) - phi(x0)) / h
        log_d = np.where(positive, np.maximum(log_d, LOG_FLOOR), LOG_FLOOR)
        if local.damping_check:
            check_damping(
                local,
                geometry,
                np.full(trace.w.shape[0], x0),
                np.tile(s * lam_c, W),
                trace.t,
                log_d,
                trace.inside & positive,
            )
        G1 = ((gamma1 - x0) / s1).reshape(W, lam_c.size, -1)
        G2 = (leaf_coordinates(geometry, z, trace.points) / s2).reshape(
            W, lam_c.size, -1, 2
        )
        log_d = log_d.reshape(W, lam_c.size, -1)
        for j in range(W):
            total += w_theta[start + j] * _plane_integral(
                op_config,
                alpha_theta[start + j],
                lam_c,
                t_hat,
                G1[j],
                G2[j],
                log_d[j],
                xi,
                eta,
                resolution,
            )
    return complex(s * s * total)


def scattering_symbol(geometry, op_config, z, xi_sc, eta_sc, h, resolution=1.0):
    """Scattering-variant a_h at the scattering frequencies (xi_sc, eta_sc)"""
    return symbol_quadrature(
        geometry, op_config, z, xi_sc, eta_sc, h, variant="scattering", resolution=resolution
    )


def scattering_principal(geometry, op_config, z, xi_sc, eta_sc):
    """x^2 times the principal integral at (xi_sc, eta_sc)"""
    x = float(geometry.foliation(z))
    if x <= 0.0:
        raise DomainError(f"Scattering principal symbol needs x(z) > 0, got {x:.4g}")
    return x * x * principal_symbol(geometry, op_config, z, xi_sc, eta_sc)


# ---------------------------------------------------------------- probe


def footprint_radius(points, z, mass, fraction=FOOTPRINT_MASS):
    """Smallest distance from z enclosing the given fraction of the sample mass"""
    m = np.abs(np.asarray(mass)).ravel()
    d = np.linalg.norm(np.asarray(points) - np.asarray(z), axis=-1).ravel()
    order = np.argsort(d)
    cumulative = np.cumsum(m[order])
    if cumulative[-1] == 0.0:
        return 0.0
    index = int(np.searchsorted(cumulative, fraction * cumulative[-1]))
    return float(d[order][min(index, d.size - 1)])


def plane_wave_probe(op_config, geometry, z, xi, eta, h=None):
    """
    Apply A_h at z to the oscillation exp(i(xi (x - x(z))/h + eta.y_z/sqrt(h)))
    restricted to M. The carrier is 1 at z, so the result estimates a_h.

    Raises:
        WindowError: If 99% of the kernel mass reaches beyond the distance
            from z to the boundary of M
    """
    local = op_config if h is None else replace(op_config, h=h)
    local.weight.validate(geometry)
    h = local.h
    z = np.asarray(z, dtype=float)
    if not geometry.inside(z, "M"):
        raise DomainError(f"Probe point {z.tolist()} lies outside M")
    eta = _eta_vector(eta)
    x0 = float(geometry.foliation(z))
    if local.variant == "global":
        s1, s2 = h, np.sqrt(h)
    else:
        s1, s2 = h * x0**2, np.sqrt(h) * x0

    bundle = build_bundle(local, geometry, z[None, :])
    trace = bundle.trace
    points = trace.points
    in_m = trace.inside & geometry.inside(points, "M")
    weight = np.where(in_m, np.exp(bundle.log_damping), 0.0)

    radius = footprint_radius(points, z, bundle.ray_weight[:, None] * weight)
    limit = float(geometry.distance_to_boundary(z, "M"))
    if radius > limit:
        raise WindowError(
            f"Probe footprint radius {radius:.4g} exceeds distance {limit:.4g} to the boundary of M"
        )

    phase = (
        float(xi) * geometry.foliation_increment(z, trace.w) / s1
        + leaf_coordinates(geometry, z, points) @ eta / s2
    )
    dt = local.t_step
    real = np.trapezoid(weight * np.cos(phase), dx=dt, axis=1)
    imag = np.trapezoid(weight * np.sin(phase), dx=dt, axis=1)
    value = np.sum(bundle.ray_weight * real) + 1j * np.sum(bundle.ray_weight * imag)
    logger.debug(f"Probe at {z.tolist()}: footprint {radius:.4g}, value {value:.6g}")
    return complex(value)


# ---------------------------------------------------------------- ellipticity


@dataclass(frozen=True)
class EllipticityPlan:
    points: tuple
    radii: tuple = config.SYMBOL_RADII
    n_directions: int = config.SYMBOL_DIRECTIONS

    @classmethod
    def default(cls, geometry):
        offset = np.array([0.5, 0.0, 0.0])
        c = geometry.c_M
        return cls(points=(tuple(c), tuple(c - offset), tuple(c + offset)))

    def directions(self):
        """Unit (xi_hat, eta_hat) spread from xi_hat = 1 to xi_hat = -1"""
        n = self.n_directions
        polar = np.pi * np.arange(n) / max(n - 1, 1)
        azimuth = 2.0 * np.pi * 0.6180339887498949 * np.arange(n)
        return np.stack(
            [
                np.cos(polar),
                np.sin(polar) * np.cos(azimuth),
                np.sin(polar) * np.sin(azimuth),
            ],
            axis=1,
        )

    def frequencies(self):
        freqs = []
        for radius in self.radii:
            if radius == 0:
                freqs.append(np.zeros(3))
            else:
                freqs.extend(radius * self.directions())
        return freqs

    def validate(self, geometry):
        if not self.points:
            raise ValidationError("Ellipticity plan needs at least one base point")
        if not np.all(geometry.inside(np.asarray(self.points), "M")):
            raise ValidationError("Ellipticity plan points must lie in M")
        if max(self.radii) < 100:
            raise ValidationError("Ellipticity plan must reach |zeta| = 100")


@dataclass
class EllipticityCertificate:
    c_min: float
    reference: float
    threshold: float
    passed: bool
    minimizer: dict
    n_samples: int
    samples: list = field(default_factory=list, repr=False)

    @property
    def normalised(self):
        return self.c_min / self.reference

    def to_dict(self):
        data = asdict(self)
        data.pop("samples")
        data["normalised"] = self.normalised
        return data


def certify_ellipticity(
    geometry, op_config, plan=None, margin=config.ELLIPTICITY_MARGIN
):
    """
    Sample |a_0| <zeta> over base points and frequencies up to |zeta| = 100

    Args:
        geometry: GeometrySpec
        op_config: NormalOpConfig
        plan: EllipticityPlan, default three points through the centre of M
        margin: Pass iff c_min > margin * |a_0(z0, 0, 0)|

    Returns:
        EllipticityCertificate: The minimising (z, zeta) is recorded either way
    """
    plan = plan or EllipticityPlan.default(geometry)
    plan.validate(geometry)
    jobs = [(p, zeta) for p in plan.points for zeta in plan.frequencies()]

    def evaluate(job):
        point, zeta = job
        value = principal_symbol(geometry, op_config, point, zeta[0], zeta[1:])
        return SymbolSample(
            z=tuple(float(c) for c in point),
            xi=float(zeta[0]),
            eta=(float(zeta[1]), float(zeta[2])),
            h=0.0,
            value=value,
            variant=op_config.variant,
        )

    with ThreadPoolExecutor(max_workers=max(op_config.workers, 1)) as pool:
        samples = list(
            tqdm(pool.map(evaluate, jobs), total=len(jobs), desc="ellipticity", disable=None)
        )

    scores = np.array(
        [
            abs(s.value) * np.sqrt(1.0 + s.xi**2 + s.eta[0] ** 2 + s.eta[1] ** 2)
            for s in samples
        ]
    )
    worst = int(np.argmin(scores))
    reference = abs(principal_symbol(geometry, op_config, plan.points[0], 0.0, (0.0, 0.0)))
    threshold = margin * reference
    certificate = EllipticityCertificate(
        c_min=float(scores[worst]),
        reference=float(reference),
        threshold=float(threshold),
        passed=bool(scores[worst] > threshold),
        minimizer={
            "z": list(samples[worst].z),
            "xi": samples[worst].xi,
            "eta": list(samples[worst].eta),
        },
        n_samples=len(samples),
        samples=samples,
    )
    status = "passed" if certificate.passed else "FAILED"
    logger.info(
        f"Ellipticity {status}: c_min={certificate.c_min:.4g}, "
        f"threshold={threshold:.4g}, minimizer={certificate.minimizer}"
    )
    return certificate
