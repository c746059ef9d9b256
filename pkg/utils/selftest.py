"""
Self-test Module
Runs the oracle comparisons behind the selftest subcommand and collects
them into one table. Every check uses fixed seeds so repeated runs agree
byte for byte.
"""
from dataclasses import replace

import numpy as np
import pandas as pd
from scipy.integrate import quad

from utils.errors import FolxrayError
from utils.geometry import (
    GeometrySpec,
    alpha,
    certify_convexity,
    christoffel,
    decompose_tangent,
    compose_tangent,
    leaf_frame,
    trace_batch,
    trace_geodesic,
)
from utils.inversion import reconstruct, solve_normal
from utils.logger_setup import setup_logger
from utils.normal_operator import (
    NormalOpConfig,
    apply_A,
    apply_at_points,
    assemble_A,
    conjugated_field,
    conjugated_rhs,
    grid_indices,
    lambda_hat_nodes,
    omega_nodes,
    quadrature_sinogram,
)
from utils.grid import GridFunction, RegularGrid
from utils.phantoms import GaussianBump
from utils.symbols import (
    GAUSSIAN_NORMALISATION,
    HIGHFREQ_CONSTANT,
    EllipticityPlan,
    certify_ellipticity,
    gaussian_closed_form,
    highfreq_limit,
    plane_wave_probe,
    principal_symbol,
    scattering_principal,
    scattering_symbol,
    symbol_quadrature,
)
from utils.transform import ray_velocities, xray_batch

logger = setup_logger()

CHECK_COLUMNS = ["name", "value", "reference", "error", "tolerance", "passed", "diagnostic"]
PROBE_TOLERANCE = 0.05
PROBE_FAULT = 0.20
BUMP_RECONSTRUCTION_TOLERANCE = 0.05
DECAY_BOUND = 0.05


def _row(name, value, reference, tolerance, relative=True, diagnostic=""):
    value = float(value)
    reference = float(reference)
    error = abs(value - reference)
    if relative and reference != 0.0:
        error /= abs(reference)
    return {
        "name": name,
        "value": value,
        "reference": reference,
        "error": error,
        "tolerance": float(tolerance),
        "passed": bool(error <= tolerance),
        "diagnostic": diagnostic,
    }


def check_straight_line(geometry):
    z = np.array(geometry.c_M)
    trace = trace_geodesic(geometry, z, np.array([0.0, 1.0, 0.0]))
    expected = z[None, :] + trace.t[:, None] * np.array([0.0, 1.0, 0.0])
    return _row(
        "euclidean_line", np.max(np.abs(trace.z - expected)), 0.0, 1e-10, relative=False
    )


def check_christoffel(geometry):
    worst = np.max(np.abs(christoffel(geometry, geometry.c_M)))
    return _row("euclidean_christoffel", worst, 0.0, 1e-15, relative=False)


def check_conformal_christoffel(eps=0.05, step=1e-5):
    """
    Christoffel symbols of the conformal metric against
    1/2 g^kl (d_i g_jl + d_j g_il - d_l g_ij) with central differences of g
    """
    geometry = GeometrySpec(metric_id="conformal", metric_eps=eps)
    z = geometry.c_M + np.array([0.3, -0.2, 0.1])

    def metric(p):
        return geometry.metric_factor(p) * np.eye(3)

    # dg[l, i, j] = d_l g_ij
    dg = np.stack(
        [(metric(z + step * d) - metric(z - step * d)) / (2.0 * step) for d in np.eye(3)]
    )
    bracket = dg + dg.transpose(1, 0, 2) - dg.transpose(1, 2, 0)
    expected = 0.5 * np.einsum("kl,ijl->kij", np.linalg.inv(metric(z)), bracket)
    worst = np.max(np.abs(christoffel(geometry, z) - expected))
    return _row("conformal_christoffel", worst, 0.0, 1e-6, relative=False)


def check_geodesic_integration(eps=0.05, seed=4):
    """RK4 step error, energy drift and observed order on the conformal metric"""
    rng = np.random.default_rng(seed)
    geometry = GeometrySpec(metric_id="conformal", metric_eps=eps)
    z = geometry.c_M + 0.4 * rng.uniform(-1.0, 1.0, size=(8, 3))
    v = rng.normal(size=(8, 3))
    v /= np.linalg.norm(v, axis=1)[:, None]

    coarse = trace_batch(geometry, z, v, 1e-2, exact_lines=False, window=1.0)
    fine = trace_batch(geometry, z, v, 1e-3, exact_lines=False, window=1.0)
    step_error = np.max(np.abs(coarse.w - fine.w[:, ::10]))

    full = trace_batch(geometry, z, v, 1e-2, exact_lines=False)
    energy = geometry.metric_norm_sq(full.points, full.v)
    start = energy[:, [int(np.argmin(np.abs(full.t)))]]
    drift = np.where(full.inside, np.abs(energy - start), 0.0)

    strong = GeometrySpec(metric_id="conformal", metric_eps=0.5)
    reference = trace_batch(strong, z, v, 0.0125, exact_lines=False, window=1.0)
    errors = []
    for step, stride in ((0.1, 8), (0.05, 4)):
        trace = trace_batch(strong, z, v, step, exact_lines=False, window=1.0)
        errors.append(np.max(np.abs(trace.w - reference.w[:, ::stride])))
    return [
        _row("geodesic_step_error", step_error, 0.0, 1e-7, relative=False),
        _row("geodesic_energy_drift", np.max(drift), 0.0, 1e-8, relative=False),
        _row("geodesic_observed_order", np.log2(errors[0] / errors[1]), 4.0, 0.6, relative=False),
    ]


def check_tangent_round_trip(geometry, n=1000, seed=1):
    rng = np.random.default_rng(seed)
    z = geometry.c_M + 0.5 * rng.uniform(-1.0, 1.0, size=(n, 3))
    v = rng.normal(size=(n, 3))
    parts = decompose_tangent(geometry, z, v)
    back = compose_tangent(geometry, z, parts.lam, parts.omega)
    return _row("tangent_round_trip", np.max(np.abs(back - v)), 0.0, 1e-12, relative=False)


def check_alpha(geometry):
    e1 = np.array([0.0, 1.0, 0.0])
    value = alpha(geometry, geometry.c_M, 0.0, e1)
    return _row("alpha_unit_leaf", float(np.ravel(value)[0]), 1.0, 1e-6)


def check_certificate(geometry):
    certificate = certify_convexity(geometry)
    return _row("certificate_C0", certificate.C0, 2.0, 1e-9, relative=False)


def check_xray(geometry, n=1000, seed=2):
    """Trapezoid X-ray of a Gaussian bump against its closed-form line integral"""
    rng = np.random.default_rng(seed)
    bump = GaussianBump(tuple(geometry.c_M), 0.2)
    z = geometry.c_M + 0.3 * rng.uniform(-1.0, 1.0, size=(n, 3))
    lam = rng.uniform(-2.0, 2.0, size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    v = ray_velocities(geometry, z, lam, theta)
    numeric = xray_batch(geometry, bump, z, v, step=5e-3)
    exact = bump.line_integral(z, v)
    worst = np.max(np.abs(numeric - exact) / np.maximum(np.abs(exact), 1e-3))
    return _row("xray_gaussian_bump", worst, 0.0, 1e-6, relative=False)


FREQUENCIES = ((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (2.0, 3.0, -1.0))


def check_closed_form(geometry, op_config, frequencies=FREQUENCIES):
    rows = []
    for xi, e1, e2 in frequencies:
        value = principal_symbol(geometry, op_config, geometry.c_M, xi, (e1, e2))
        reference = GAUSSIAN_NORMALISATION * gaussian_closed_form(
            geometry, geometry.c_M, xi, (e1, e2)
        )
        name = f"principal_vs_closed_form[{xi:g},{e1:g},{e2:g}]"
        rows.append(_row(name, abs(value), reference, 0.01))
    return rows


def check_xi_ratio(geometry, op_config):
    ratio = abs(principal_symbol(geometry, op_config, geometry.c_M, 1.0, (0.0, 0.0))) / abs(
        principal_symbol(geometry, op_config, geometry.c_M, 0.0, (0.0, 0.0))
    )
    return _row("principal_xi_ratio", ratio, 2.0**-0.5, 0.005)


def check_highfreq(geometry, op_config):
    value = highfreq_limit(geometry, op_config, geometry.c_M, (1.0, 0.0, 0.0))
    return _row("highfreq_transverse", value, HIGHFREQ_CONSTANT, 1e-3)


def flat_symbol_oracle(geometry, op_config, h):
    """
    a_h(c_M, 0, 0) for the flat metric and global weight: along straight
    lines x - x(z) = h (lam_hat t_hat + beta t_hat^2), so the t_hat integral is
    Gaussian and only the lam_hat integral is left to scipy
    """
    z = np.asarray(geometry.c_M)
    x_tilde = float(np.sum((z - np.asarray(geometry.foliation_center)) ** 2))
    cutoff = op_config.cutoff
    lo, hi = cutoff.support()

    def integrand(lam_hat):
        beta = 1.0 + h * lam_hat**2 / (4.0 * x_tilde)
        return float(cutoff.value(lam_hat, 1.0)) * np.sqrt(np.pi / beta) * np.exp(
            lam_hat**2 / (4.0 * beta)
        )

    value, _ = quad(integrand, lo, hi, limit=200, epsabs=0.0, epsrel=1e-12)
    return h * 2.0 * np.pi * value


def check_flat_symbol(geometry, op_config, h=0.1):
    value = symbol_quadrature(geometry, op_config, geometry.c_M, 0.0, (0.0, 0.0), h)
    reference = flat_symbol_oracle(geometry, op_config, h)
    return _row("symbol_zero_frequency", value.real, reference, 1e-3)


H_CONSISTENCY_VALUES = (0.2, 0.1, 0.05, 0.025)


def h_consistency_slope(geometry, op_config, h_values=H_CONSISTENCY_VALUES):
    """
    Log-log slope of |a_h / h - a_0| / |a_0| at (c_M, 0, 0) against h

    Returns:
        tuple: (fitted slope, relative errors in the order of h_values)
    """
    principal = principal_symbol(geometry, op_config, geometry.c_M, 0.0, (0.0, 0.0))
    values = np.array(
        [symbol_quadrature(geometry, op_config, geometry.c_M, 0.0, (0.0, 0.0), h) for h in h_values]
    )
    errors = np.abs(values / np.asarray(h_values) - principal) / abs(principal)
    slope = float(np.polyfit(np.log(h_values), np.log(errors), 1)[0])
    return slope, errors


def check_h_consistency(geometry, op_config):
    slope, errors = h_consistency_slope(geometry, op_config)
    return _row(
        "h_consistency_slope",
        slope,
        1.0,
        0.5,
        relative=False,
        diagnostic=f"smallest error {errors[-1]:.3e}",
    )


def check_probe(geometry, op_config, xi=1.0, eta=(1.0, 0.0), h=0.1):
    """Plane-wave probe against symbol quadrature; > 20% is a discretisation fault"""
    local = replace(op_config, h=h)
    probe = plane_wave_probe(local, geometry, geometry.c_M, xi, eta)
    symbol = symbol_quadrature(geometry, local, geometry.c_M, xi, eta, h)
    mismatch = abs(probe - symbol) / abs(symbol)
    diagnostic = "discretisation fault" if mismatch > PROBE_FAULT else ""
    if diagnostic:
        logger.warning(
            f"Probe mismatch {mismatch:.1%} at xi={xi}, eta={eta}: "
            f"probe {probe:.6g}, symbol {symbol:.6g}"
        )
    return _row("probe_vs_symbol", abs(probe), abs(symbol), PROBE_TOLERANCE, diagnostic=diagnostic)


def flat_apply_oracle(op_config, geometry, bump, z):
    """
    A_h f(z) for the flat metric, global weight and a Gaussian bump: on each
    quadrature line the t-integrand is a Gaussian, integrated in closed form
    """
    h = op_config.h
    lam_hat, w_lam = lambda_hat_nodes(op_config.cutoff, op_config.n_lambda)
    theta, w_theta = omega_nodes(op_config.n_omega)
    e1, e2 = leaf_frame(geometry, z)
    grad = geometry.foliation_grad(z)
    T = grad / (grad @ grad)
    s = np.sqrt(h)
    d = z - np.asarray(bump.center)
    w2 = bump.width**2
    total = 0.0
    for lh, wl in zip(lam_hat, w_lam):
        chi = float(op_config.cutoff.value(lh, 1.0))
        for th, wt in zip(theta, w_theta):
            v = s * lh * T + np.cos(th) * e1 + np.sin(th) * e2
            speed_sq = v @ v
            a = speed_sq / h + speed_sq / w2
            b = -s * lh / h - 2.0 * (d @ v) / w2
            integral = np.sqrt(np.pi / a) * np.exp(b * b / (4.0 * a) - (d @ d) / w2)
            total += s * wl * wt * chi * integral
    return bump.amplitude * total


def _small_operator(op_config):
    return replace(op_config, h=0.2, n_lambda=12, n_omega=24, t_step=0.02)


OFFSETS = np.array([[0.0, 0.0, 0.0], [0.1, -0.05, 0.2], [-0.2, 0.1, 0.0]])


def check_flat_apply(geometry, op_config):
    local = _small_operator(op_config)
    bump = GaussianBump(tuple(geometry.c_M), 0.2)
    points = geometry.c_M + OFFSETS
    values = apply_at_points(local, geometry, bump, points)
    expected = np.array([flat_apply_oracle(local, geometry, bump, z) for z in points])
    worst = np.max(np.abs(values - expected) / np.abs(expected))
    return _row("apply_vs_line_oracle", worst, 0.0, 1e-8, relative=False)


def check_conjugated_rhs(geometry, op_config, n=7):
    """exp(-Phi/h) L_h I(exp(Phi/h) f) on grid nodes against A_h f"""
    local = _small_operator(op_config)
    bump = GaussianBump(tuple(geometry.c_M), 0.2)
    grid = RegularGrid.covering(geometry, n)
    nodes = grid.nodes()
    base = nodes[np.linalg.norm(nodes - geometry.c_M, axis=1) <= 0.4]
    lifted = conjugated_field(local, geometry, bump, power=1.0)
    d = quadrature_sinogram(local, geometry, lifted, base, step=local.t_step)
    rhs = conjugated_rhs(local, geometry, d, grid, balance=0.0)
    values = rhs.values.ravel()[grid_indices(grid, base)]
    direct = apply_at_points(local, geometry, bump, base)
    worst = np.max(np.abs(values - direct)) / np.max(np.abs(direct))
    return _row("conjugated_rhs_identity", worst, 0.0, 1e-6, relative=False)


def check_assembly(geometry, op_config, n=7, seed=5):
    """Assembled matrix against matrix-free A_h, and n_omega refinement"""
    local = _small_operator(op_config)
    grid = RegularGrid.covering(geometry, n)
    mask = grid.mask(geometry, "M")
    values = np.where(mask, np.random.default_rng(seed).normal(size=grid.dims), 0.0)
    f = GridFunction(grid, values, mask, geometry.geometry_hash())
    assembled = assemble_A(local, geometry, grid)
    direct = assembled.restrict(apply_A(local, geometry, f, grid))
    matrix_error = np.max(np.abs(assembled.matrix @ assembled.restrict(f) - direct))
    matrix_error /= np.max(np.abs(direct))

    bump = GaussianBump(tuple(geometry.c_M), 0.2)
    points = geometry.c_M + OFFSETS
    coarse = apply_at_points(replace(local, n_omega=48), geometry, bump, points)
    fine = apply_at_points(replace(local, n_omega=96), geometry, bump, points)
    omega_change = np.max(np.abs(fine - coarse) / np.abs(fine))
    return [
        _row("assembled_vs_matrix_free", matrix_error, 0.0, 1e-10, relative=False),
        _row("omega_refinement", omega_change, 0.0, 1e-4, relative=False),
    ]


def check_bump_reconstruction(geometry, op_config, n=9, width=0.3):
    """Cubic-basis inversion of a Gaussian bump from quadrature data"""
    local = _small_operator(op_config)
    grid = RegularGrid.covering(geometry, n)
    bump = GaussianBump(tuple(geometry.c_M), width)
    base = grid.nodes()[grid.mask(geometry, "M").ravel()]
    d = quadrature_sinogram(local, geometry, bump, base)
    _, report = reconstruct(local, geometry, d, grid, truth=bump, basis="cubic")
    return _row(
        "bump_reconstruction",
        report.l2_error,
        0.0,
        BUMP_RECONSTRUCTION_TOLERANCE,
        relative=False,
        diagnostic=f"{report.iterations} iterations",
    )


def check_scattering_symbol(geometry, op_config, h=0.001):
    zero = scattering_principal(geometry, op_config, geometry.c_M, 0.0, (0.0, 0.0))
    one = scattering_principal(geometry, op_config, geometry.c_M, 1.0, (0.0, 0.0))
    value = scattering_symbol(geometry, op_config, geometry.c_M, 1.0, (0.0, 0.0), h)
    return [
        _row("scattering_xi_ratio", abs(one) / abs(zero), 2.0**-0.5, 0.005),
        _row("scattering_small_h", abs(value) / h, abs(one), 0.02),
    ]


def check_decay(geometry, op_config, xi=50.0):
    """Order -1: |a_0(z, xi, 0)| / |a_0(z, 0, 0)| is about 1/xi"""
    ratio = abs(principal_symbol(geometry, op_config, geometry.c_M, xi, (0.0, 0.0))) / abs(
        principal_symbol(geometry, op_config, geometry.c_M, 0.0, (0.0, 0.0))
    )
    return _row("principal_decay", ratio, 0.0, DECAY_BOUND, relative=False)


def check_ellipticity(geometry, op_config):
    """threshold / c_min on a one-point plan; below 1 means elliptic"""
    plan = EllipticityPlan(points=(tuple(geometry.c_M),), radii=(0, 1, 10, 100), n_directions=4)
    certificate = certify_ellipticity(geometry, op_config, plan)
    return _row(
        "ellipticity_margin",
        certificate.threshold / certificate.c_min,
        0.0,
        1.0,
        relative=False,
        diagnostic=f"minimizer {certificate.minimizer}",
    )


def check_left_inverse(geometry, op_config, n=9, h=0.2, tol=1e-8, seed=3):
    grid = RegularGrid.covering(geometry, n)
    assembled = assemble_A(replace(op_config, h=h), geometry, grid, balance=1.0)
    u = np.random.default_rng(seed).normal(size=assembled.n)
    _, report = solve_normal(assembled.matrix, assembled.matrix @ u, tol=tol)
    return _row("left_inverse_residual", report.residual, 0.0, tol, relative=False)


def run_selftest(workers=1):
    """
    Run every oracle check on the default geometry and cutoff

    Args:
        workers: Thread count handed to the operator pipelines

    Returns:
        tuple: (DataFrame with one row per check, all checks passed)
    """
    geometry = GeometrySpec()
    op_config = NormalOpConfig(workers=workers)
    checks = [
        (check_straight_line, (geometry,)),
        (check_christoffel, (geometry,)),
        (check_conformal_christoffel, ()),
        (check_geodesic_integration, ()),
        (check_tangent_round_trip, (geometry,)),
        (check_alpha, (geometry,)),
        (check_certificate, (geometry,)),
        (check_xray, (geometry,)),
        (check_flat_apply, (geometry, op_config)),
        (check_conjugated_rhs, (geometry, op_config)),
        (check_assembly, (geometry, op_config)),
        (check_closed_form, (geometry, op_config)),
        (check_xi_ratio, (geometry, op_config)),
        (check_scattering_symbol, (geometry, op_config)),
        (check_decay, (geometry, op_config)),
        (check_highfreq, (geometry, op_config)),
        (check_ellipticity, (geometry, op_config)),
        (check_flat_symbol, (geometry, op_config)),
        (check_h_consistency, (geometry, op_config)),
        (check_probe, (geometry, op_config)),
        (check_left_inverse, (geometry, op_config)),
        (check_bump_reconstruction, (geometry, op_config)),
    ]
    rows = []
    for check, args in checks:
        try:
            result = check(*args)
        except FolxrayError as e:
            logger.error(f"Self-test check raised {type(e).__name__}: {e}")
            result = {
                "name": check.__name__.removeprefix("check_"),
                "passed": False,
                "diagnostic": f"{type(e).__name__}: {e}",
            }
        rows.extend(result if isinstance(result, list) else [result])

    df = pd.DataFrame(rows)
    for col in CHECK_COLUMNS:
        if col not in df.columns:
            df[col] = np.nan
    df = df[CHECK_COLUMNS]
    passed = bool(df["passed"].all())
    for _, row in df.iterrows():
        status = "ok" if row["passed"] else "FAILED"
        logger.info(f"selftest {row['name']}: {status} (error {row['error']:.3e})")
    return df, passed
