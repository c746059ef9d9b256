#!/usr/bin/env python3
"""
folxray Main Script
Command-line front end for the modified normal operator laboratory: geodesic
tracing, certificates, forward data, operator application, symbols,
reconstruction, h sweeps and stability sweeps. Every run writes into its own run directory.
"""
import argparse
import sys
import warnings
from dataclasses import replace

import numpy as np

import config
from utils.errors import FolxrayError, ValidationError
from utils.experiment_config import ExperimentConfig, resolve_workers
from utils.geometry import certify_convexity, trace_geodesic
from utils.inversion import h_sweep, injectivity_probe, reconstruct, stability_sweep
from utils.local_storage_handler import LocalStorageHandler, load_sinogram
from utils.logger_setup import attach_run_log, setup_logger
from utils.normal_operator import apply_A, assemble_A, quadrature_sinogram
from utils.phantoms import stability_family
from utils.output_handler import (
    ellipticity_frame,
    ellipticity_summary,
    error_decay_order,
    report_frame,
    symbol_frame,
    trace_frame,
)
from utils.selftest import run_selftest
from utils.symbols import (
    GAUSSIAN_NORMALISATION,
    EllipticityPlan,
    SymbolSample,
    certify_ellipticity,
    gaussian_closed_form,
    highfreq_limit,
    plane_wave_probe,
    principal_symbol,
    symbol_quadrature,
)

warnings.simplefilter(action="ignore", category=FutureWarning)

logger = setup_logger()


def parse_vector(text, size=3):
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ValidationError(f"Cannot read '{text}' as {size} comma-separated numbers")
    if len(values) != size:
        raise ValidationError(f"Expected {size} components, got {len(values)} in '{text}'")
    return np.array(values)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Experiment config file")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config key (repeatable)",
    )
    common.add_argument("--out", help="Root directory for run directories")
    common.add_argument("--workers", type=int, help=f"Worker threads (env {config.WORKERS_ENV})")
    common.add_argument("--variant", choices=("global", "scattering"), help="Weight variant")
    common.add_argument("--h", type=float, help="Semiclassical parameter")

    parser = argparse.ArgumentParser(
        prog="folxray", description="Modified normal operator laboratory"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    trace = sub.add_parser("trace", parents=[common], help="Trace one geodesic")
    trace.add_argument("--z", help="Base point x,y,z (default: centre of M)")
    trace.add_argument("--v", default="0,1,0", help="Initial velocity")

    sub.add_parser("certify", parents=[common], help="Convexity certificate")
    sub.add_parser("forward", parents=[common], help="X-ray data of the phantom")

    apply = sub.add_parser("apply", parents=[common], help="Apply A_h to the phantom")
    apply.add_argument("--assemble", action="store_true", help="Also write the sparse matrix")

    symbol = sub.add_parser("symbol", parents=[common], help="Symbol samples at a point")
    symbol.add_argument("--z", help="Base point (default: centre of M)")
    symbol.add_argument("--xi", type=float, help="Transverse frequency")
    symbol.add_argument("--eta", help="Leaf frequency e1,e2")

    sub.add_parser("certify-ellipticity", parents=[common], help="Ellipticity certificate")

    recon = sub.add_parser("reconstruct", parents=[common], help="Invert X-ray data")
    recon.add_argument("--input", help="Sinogram file written by forward")
    recon.add_argument(
        "--probe", action="store_true", help="Also report singular values of the matrix"
    )

    sub.add_parser("sweep-h", parents=[common], help="Reconstruction errors over h")
    sub.add_parser(
        "stability", parents=[common], help="Stability ratio over a family of phantoms"
    )
    sub.add_parser("selftest", parents=[common], help="Run the oracle checks")
    return parser


def load_experiment(args):
    overrides = list(args.set)
    if args.variant:
        overrides.append(f"normal_op.variant={args.variant}")
    if args.h is not None:
        overrides.append(f"normal_op.h={args.h}")
    if args.out:
        overrides.append(f"output.root={args.out}")
    if getattr(args, "input", None):
        overrides.append(f"output.input={args.input}")
    return ExperimentConfig.load(args.config, overrides)


# ---------------------------------------------------------------- subcommands


def run_trace(args, cfg, storage, workers):
    geometry = cfg.build_geometry()
    z = parse_vector(args.z) if args.z else np.asarray(geometry.c_M)
    v = parse_vector(args.v)
    trace = trace_geodesic(geometry, z, v, step=cfg.geometry.trace_step)
    storage.save_table("trace.csv", trace_frame(trace, geometry))
    storage.save_json(
        "trace.json",
        {
            "exited_forward": trace.exited_forward,
            "exited_backward": trace.exited_backward,
            "t_exit_forward": trace.t_exit_forward,
            "t_exit_backward": trace.t_exit_backward,
            "samples": int(trace.t.size),
        },
    )
    return True, f"Traced {trace.t.size} samples, exit at t={trace.t_exit_forward:.6g}"


def run_certify(args, cfg, storage, workers):
    g = cfg.geometry
    certificate = certify_convexity(
        cfg.build_geometry(), g.certificate_samples, g.certificate_epsilon, g.trace_step
    )
    storage.save_json("certificate.json", certificate.to_dict())
    return True, f"C0={certificate.C0:.10g}, T_bound={certificate.T_bound:.6g}"


def _m_nodes(cfg, geometry):
    grid = cfg.build_grid(geometry)
    return grid, grid.nodes()[grid.mask(geometry, "M").ravel()]


def run_forward(args, cfg, storage, workers):
    geometry = cfg.build_geometry()
    op_config = cfg.build_op_config(workers)
    _, base_points = _m_nodes(cfg, geometry)
    d = quadrature_sinogram(
        op_config, geometry, cfg.build_phantom(), base_points, step=cfg.geometry.trace_step
    )
    storage.save_sinogram("sinogram.fxsg", d)
    return True, f"Sinogram {d.shape} written"


def run_apply(args, cfg, storage, workers):
    geometry = cfg.build_geometry()
    op_config = cfg.build_op_config(workers)
    grid = cfg.build_grid(geometry)
    phantom = cfg.build_phantom(geometry)
    result = apply_A(op_config, geometry, phantom, grid)
    storage.save_grid_function("apply.fxgf", result)
    summary = {
        "h": op_config.h,
        "variant": op_config.variant,
        "l2_norm": result.l2_norm(),
        "sup_norm": result.sup_norm(),
        **result.meta,
    }
    if args.assemble:
        assembled = assemble_A(
            op_config, geometry, grid, balance=cfg.solver.balance, basis=cfg.solver.basis
        )
        storage.save_triplets("operator.triplets", assembled)
        summary["nnz"] = int(assembled.matrix.nnz)
        summary["balance"] = assembled.balance
        summary["basis"] = assembled.basis
        if assembled.balance == 0.0:
            product = assembled.apply_sampled(geometry, phantom)
            mask = grid.mask(geometry, "M")
            diff = np.linalg.norm((product.values - result.values)[mask])
            summary["assembly_discrepancy"] = float(diff / np.linalg.norm(result.values[mask]))
    storage.save_json("apply.json", summary)
    return True, f"A_h applied: sup norm {summary['sup_norm']:.6g}"


def run_symbol(args, cfg, storage, workers):
    geometry = cfg.build_geometry()
    op_config = cfg.build_op_config(workers)
    sweep = cfg.sweep
    z = parse_vector(args.z) if args.z else np.asarray(geometry.c_M)
    xi = sweep.probe_xi if args.xi is None else args.xi
    eta = tuple(sweep.probe_eta) if args.eta is None else tuple(parse_vector(args.eta, 2))
    variant = op_config.variant

    def sample(h, value):
        return SymbolSample(tuple(z), xi, eta, h, complex(value), variant)

    samples = [sample(0.0, principal_symbol(geometry, op_config, z, xi, eta))]
    if variant == "scattering":
        x = float(geometry.foliation(z))
        samples[0] = sample(0.0, x * x * samples[0].value)
    for h in sweep.h_values:
        if h <= 0.5:
            samples.append(sample(h, symbol_quadrature(geometry, op_config, z, xi, eta, h)))
    storage.save_table("symbols.csv", symbol_frame(samples))

    plan = EllipticityPlan(
        points=(tuple(z),), radii=sweep.symbol_radii, n_directions=sweep.symbol_directions
    )
    summary = {
        "z": z.tolist(),
        "xi": xi,
        "eta": list(eta),
        "variant": variant,
        "gaussian_closed_form": GAUSSIAN_NORMALISATION
        * gaussian_closed_form(geometry, z, xi, eta),
        "highfreq_limit": [
            highfreq_limit(geometry, op_config, z, direction)
            for direction in plan.directions()
        ],
    }
    try:
        summary["probe"] = plane_wave_probe(op_config, geometry, z, xi, eta)
    except FolxrayError as e:
        logger.warning(f"Plane-wave probe skipped: {e}")
        summary["probe_error"] = str(e)
    storage.save_json("symbol.json", summary)
    return True, f"{len(samples)} symbol samples at z={z.tolist()}"


def run_certify_ellipticity(args, cfg, storage, workers):
    geometry = cfg.build_geometry()
    op_config = cfg.build_op_config(workers)
    default = EllipticityPlan.default(geometry)
    plan = EllipticityPlan(
        points=default.points,
        radii=cfg.sweep.symbol_radii,
        n_directions=cfg.sweep.symbol_directions,
    )
    certificate = certify_ellipticity(geometry, op_config, plan, cfg.sweep.ellipticity_margin)
    df = ellipticity_frame(certificate.samples)
    storage.save_table("ellipticity.csv", df)
    storage.save_table("ellipticity_summary.csv", ellipticity_summary(df))
    storage.save_json("ellipticity.json", certificate.to_dict())
    message = (
        f"c_min={certificate.c_min:.6g} vs threshold {certificate.threshold:.6g}, "
        f"minimizer {certificate.minimizer}"
    )
    return certificate.passed, message


def run_reconstruct(args, cfg, storage, workers):
    geometry = cfg.build_geometry()
    op_config = cfg.build_op_config(workers)
    grid, base_points = _m_nodes(cfg, geometry)
    phantom = None
    if cfg.output.input:
        d = load_sinogram(cfg.output.input)
    else:
        phantom = cfg.build_phantom()
        d = quadrature_sinogram(
            op_config, geometry, phantom, base_points, step=cfg.geometry.trace_step
        )
    s = cfg.solver
    assembled = assemble_A(op_config, geometry, grid, balance=s.balance, basis=s.basis)
    f_hat, report = reconstruct(
        op_config,
        geometry,
        d,
        grid,
        s.tol,
        s.max_iter,
        s.balance,
        truth=phantom,
        basis=s.basis,
        assembled=assembled,
    )
    if args.probe:
        probe = injectivity_probe(assembled)
        report.sigma_min, report.sigma_ratio = probe.sigma_min, probe.sigma_ratio
    storage.save_grid_function("reconstruction.fxgf", f_hat)
    storage.save_table("report.csv", report_frame([report]))
    storage.save_json("report.json", report.to_dict())
    return True, f"Converged in {report.iterations} iterations, residual {report.residual:.3e}"


def run_sweep_h(args, cfg, storage, workers):
    geometry = cfg.build_geometry()
    op_config = cfg.build_op_config(workers)
    s = cfg.solver
    reports = h_sweep(
        op_config,
        geometry,
        cfg.build_phantom(),
        cfg.sweep.h_values,
        cfg.build_grid(geometry),
        s.tol,
        s.max_iter,
        s.balance,
        s.basis,
    )
    df = report_frame(reports)
    storage.save_table("sweep.csv", df)
    order = error_decay_order(df)
    storage.save_json(
        "sweep.json",
        {"l2_error_order": order, "rows": len(reports), "failed": int((~df["converged"]).sum())},
    )
    return True, f"{len(reports)} sweep rows, L2 error order {order:.3g}"


def run_stability(args, cfg, storage, workers):
    geometry = cfg.build_geometry()
    op_config = cfg.build_op_config(workers)
    s = cfg.solver
    phantoms = stability_family(
        geometry, cfg.sweep.stability_phantoms, seed=cfg.sweep.stability_seed
    )
    reports, spread = stability_sweep(
        op_config,
        geometry,
        phantoms,
        cfg.build_grid(geometry),
        s.tol,
        s.max_iter,
        s.balance,
        s.basis,
    )
    df = report_frame(reports)
    storage.save_table("stability.csv", df)
    storage.save_json(
        "stability.json",
        {
            "ratio_spread": spread,
            "rows": len(reports),
            "failed": int((~df["converged"]).sum()),
            "balance": s.balance,
            "basis": s.basis,
        },
    )
    passed = bool(np.isfinite(spread) and spread <= config.STABILITY_SPREAD_LIMIT)
    return passed, f"Stability ratio varies {spread:.3g}x over {len(reports)} phantoms"


def run_selftest_command(args, cfg, storage, workers):
    df, passed = run_selftest(workers)
    storage.save_table("selftest.csv", df)
    storage.save_json(
        "selftest.json",
        {"passed": passed, "checks": len(df), "failed": df.loc[~df["passed"], "name"].tolist()},
    )
    failed = int((~df["passed"]).sum())
    return passed, f"{len(df) - failed}/{len(df)} checks passed"


PHANTOM_COMMANDS = ("forward", "apply", "reconstruct", "sweep-h")

HANDLERS = {
    "trace": run_trace,
    "certify": run_certify,
    "forward": run_forward,
    "apply": run_apply,
    "symbol": run_symbol,
    "certify-ellipticity": run_certify_ellipticity,
    "reconstruct": run_reconstruct,
    "sweep-h": run_sweep_h,
    "stability": run_stability,
    "selftest": run_selftest_command,
}


def run_command(args):
    """
    Load the config, open a run directory and run one subcommand

    Returns:
        tuple: (success_flag, message)
    """
    cfg = load_experiment(args)
    workers = resolve_workers(args.workers)
    if args.command == "reconstruct" and cfg.output.input:
        # fail on a missing input before a run directory is created
        load_sinogram(cfg.output.input)
    elif args.command in PHANTOM_COMMANDS:
        cfg.build_phantom()
    storage = LocalStorageHandler(args.command, cfg.digest(), cfg.output.root)
    handler = attach_run_log(logger, storage.run_dir)
    try:
        logger.info(f"Running {args.command} with {workers} worker(s)")
        storage.save_config(cfg.to_text())
        success, message = HANDLERS[args.command](args, cfg, storage, workers)
        storage.write_manifest({"success": success})
        return success, message
    finally:
        logger.removeHandler(handler)
        handler.close()


def main(argv=None):
    """Main entry point; returns the process exit code"""
    args = build_parser().parse_args(argv)
    try:
        success, message = run_command(args)
    except FolxrayError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"folxray {args.command}: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Process interrupted by user")
        return 1
    except Exception as e:
        logger.exception(f"An unexpected error occurred: {e}")
        print(f"folxray {args.command}: unexpected error: {e}", file=sys.stderr)
        return 1

    if success:
        logger.info(f"{args.command} completed: {message}")
        return 0
    logger.error(f"{args.command} failed: {message}")
    print(f"folxray {args.command}: {message}", file=sys.stderr)
    return 3


if __name__ == "__main__":
    sys.exit(main())
