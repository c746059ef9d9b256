"""
Inversion Module
Discrete left inversion of A_h by restarted GMRES, end-to-end reconstruction
from X-ray data, singular-value injectivity probes and h sweeps.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
import scipy.sparse
from scipy.linalg import svdvals
from scipy.sparse.linalg import LinearOperator, aslinearoperator, gmres
from tqdm import tqdm

import config
from utils.errors import CoverageError, FolxrayError, NonConvergence, ValidationError
from utils.grid import GridFunction, RegularGrid
from utils.logger_setup import setup_logger
from utils.normal_operator import (
    AssembledOperator,
    assemble_A,
    conjugated_rhs,
    quadrature_sinogram,
)

logger = setup_logger()

MAX_PROBE_N = 13


@dataclass
class SolveReport:
    iterations: int = 0
    residual: float = 0.0
    unscaled_residual: float = 0.0
    converged: bool = False
    l2_error: float = float("nan")
    sup_error: float = float("nan")
    h: float = float("nan")
    grid_dims: tuple = ()
    stability_ratio: float = float("nan")
    sigma_min: float = float("nan")
    sigma_ratio: float = float("nan")
    variant: str = "global"
    balance: float = float("nan")
    basis: str = ""
    message: str = ""

    def to_dict(self):
        data = asdict(self)
        data["grid_dims"] = "x".join(str(n) for n in self.grid_dims)
        return data


class _Stagnation(Exception):
    pass


def _as_operator(A):
    if isinstance(A, AssembledOperator):
        A = A.matrix
    if isinstance(A, LinearOperator):
        return A
    if callable(A) and not scipy.sparse.issparse(A) and not isinstance(A, np.ndarray):
        raise ValidationError("Matrix-free operators must be wrapped in a LinearOperator")
    return aslinearoperator(A)


def solve_normal(
    A,
    b,
    tol=config.SOLVER_TOL,
    max_iter=config.SOLVER_MAX_ITER,
    restart=config.SOLVER_RESTART,
    scaling=None,
):
    """
    Restarted GMRES on the square system A g = b

    Args:
        A: AssembledOperator, matrix or LinearOperator over the unknowns
        b: Right-hand side vector, or GridFunction when A is an AssembledOperator
        tol: Relative residual target
        max_iter: Maximum number of restart cycles
        restart: Krylov dimension per cycle
        scaling: Optional diagonal D; the unscaled residual is |D r| / |D b|

    Returns:
        tuple: (solution, SolveReport); the solution is a GridFunction when b is one

    Raises:
        NonConvergence: Stagnation over a restart cycle or max_iter exhausted
    """
    assembled = A if isinstance(A, AssembledOperator) else None
    as_grid = isinstance(b, GridFunction)
    if as_grid:
        if assembled is None:
            raise ValidationError("GridFunction right-hand sides need an AssembledOperator")
        vector = assembled.restrict(b)
    else:
        vector = np.asarray(b, dtype=float).ravel()

    op = _as_operator(A)
    if op.shape != (vector.size, vector.size):
        raise ValidationError(f"Operator shape {op.shape} does not match rhs size {vector.size}")
    scale = np.ones(vector.size) if scaling is None else np.asarray(scaling, dtype=float)

    def finish(solution):
        if as_grid:
            return assembled.extend(solution)
        return solution

    b_norm = float(np.linalg.norm(vector))
    if b_norm == 0.0:
        return finish(np.zeros(vector.size)), SolveReport(converged=True, message="zero rhs")

    calls = {"matvec": 0}

    def matvec(x):
        calls["matvec"] += 1
        return op.matvec(x)

    counted = LinearOperator(op.shape, matvec=matvec, dtype=float)
    history = [b_norm]

    def check_cycle(xk):
        r = float(np.linalg.norm(vector - op.matvec(xk)))
        if r > (1.0 - config.STAGNATION_REDUCTION) * history[-1]:
            history.append(r)
            raise _Stagnation()
        history.append(r)

    def report_for(solution, converged, message=""):
        r = vector - op.matvec(solution)
        return SolveReport(
            iterations=calls["matvec"],
            residual=float(np.linalg.norm(r)) / b_norm,
            unscaled_residual=float(np.linalg.norm(scale * r))
            / float(np.linalg.norm(scale * vector)),
            converged=converged,
            message=message,
        )

    try:
        solution, info = gmres(
            counted,
            vector,
            rtol=0.5 * tol,
            atol=0.0,
            restart=restart,
            maxiter=max_iter,
            callback=check_cycle,
            callback_type="x",
        )
    except _Stagnation:
        report = SolveReport(
            iterations=calls["matvec"],
            residual=history[-1] / b_norm,
            converged=False,
            message="stagnated",
        )
        logger.warning(f"GMRES stagnated at relative residual {report.residual:.3e}")
        raise NonConvergence(
            f"GMRES stagnated: residual {report.residual:.3e} after {report.iterations} iterations",
            report=report,
        )

    report = report_for(solution, converged=True)
    if info != 0 or report.residual > tol:
        report.converged = False
        report.message = f"gmres info={info}"
        raise NonConvergence(
            f"GMRES did not reach {tol:.1e}: residual {report.residual:.3e} "
            f"after {report.iterations} iterations",
            report=report,
        )
    logger.info(
        f"GMRES converged in {report.iterations} iterations, residual {report.residual:.3e}"
    )
    return finish(solution), report


def sinogram_norm(d, grid):
    """Discrete L2 norm over base points, lambda and omega"""
    d_theta = 2.0 * np.pi / d.omega_angles.size
    lam = d.lambda_nodes if d.lambda_nodes.ndim == 2 else d.lambda_nodes[None, :]
    d_lam = np.gradient(lam, axis=-1)
    d_lam = np.broadcast_to(d_lam, d.data.shape[:2])
    mass = np.sum(d.data**2 * d_lam[:, :, None]) * d_theta * grid.spacing**3
    return float(np.sqrt(mass))


def relative_errors(estimate, truth_values, mask):
    """(relative L2 error, relative sup error) over the mask"""
    diff = (estimate.values - truth_values)[mask]
    truth = truth_values[mask]
    l2 = np.linalg.norm(diff) / max(np.linalg.norm(truth), 1e-300)
    sup = np.max(np.abs(diff)) / max(np.max(np.abs(truth)), 1e-300)
    return float(l2), float(sup)


def reconstruct(
    op_config,
    geometry,
    d,
    grid=None,
    tol=config.SOLVER_TOL,
    max_iter=config.SOLVER_MAX_ITER,
    balance=config.SOLVER_BALANCE,
    truth=None,
    basis=config.SOLVER_BASIS,
    assembled=None,
):
    """
    Recover f from X-ray data: solve A_h g = exp(-Phi/h) L_h d in the
    balanced unknown and undo the conjugation

    Args:
        op_config: NormalOpConfig
        geometry: GeometrySpec
        d: Sinogram with a base point at every M node of the grid
        grid: RegularGrid, default covering M' with config.GRID_N nodes
        tol: Solver tolerance
        max_iter: Restart cycles
        balance: Balancing exponent s
        truth: Optional field for error reporting
        basis: Discretisation of the unknown, "cubic" or "trilinear"
        assembled: Operator from assemble_A to reuse across data sets

    Returns:
        tuple: (GridFunction f_hat masked to M, SolveReport)
    """
    grid = grid or RegularGrid.covering(geometry, config.GRID_N)
    if assembled is None:
        assembled = assemble_A(op_config, geometry, grid, balance=balance, basis=basis)
    elif not (
        assembled.grid.same_as(grid)
        and assembled.balance == balance
        and assembled.h == op_config.h
        and assembled.geometry_hash == geometry.geometry_hash()
    ):
        raise ValidationError("Assembled operator does not match the reconstruction setup")
    rhs = conjugated_rhs(op_config, geometry, d, grid, balance=balance)
    missing = ~rhs.support_mask.ravel()[assembled.unknowns]
    if missing.any():
        raise CoverageError(
            f"Sinogram has no base point at {int(missing.sum())} of {assembled.n} M nodes"
        )

    nodes = grid.nodes()[assembled.unknowns]
    x = geometry.foliation(nodes)
    weight = op_config.weight
    scaling = weight.conjugation(geometry, x, op_config.h, power=balance)
    u, report = solve_normal(
        assembled.matrix, assembled.restrict(rhs), tol, max_iter, scaling=scaling
    )
    u_nodes = assembled.restrict(assembled.nodal_values(u))
    values = weight.conjugation(geometry, x, op_config.h, power=balance - 1.0) * u_nodes
    f_hat = assembled.extend(values)

    report.h = op_config.h
    report.grid_dims = tuple(grid.dims)
    report.variant = op_config.variant
    report.balance = balance
    report.basis = assembled.basis
    data_norm = sinogram_norm(d, grid)
    report.stability_ratio = f_hat.l2_norm() / data_norm if data_norm > 0 else float("nan")
    if truth is not None:
        mask = grid.mask(geometry, "M")
        truth_values = np.where(mask.ravel(), truth(grid.nodes()), 0.0).reshape(grid.dims)
        report.l2_error, report.sup_error = relative_errors(f_hat, truth_values, mask)
        logger.info(
            f"Reconstruction h={op_config.h}: L2 error {report.l2_error:.3e}, "
            f"sup error {report.sup_error:.3e}"
        )
    return f_hat, report


def injectivity_probe(A):
    """
    Smallest and largest singular values of a discretised operator

    Returns:
        SolveReport: sigma_min and sigma_min / sigma_max populated
    """
    if isinstance(A, AssembledOperator):
        if max(A.grid.dims) > MAX_PROBE_N:
            raise ValidationError(
                f"Singular values need a grid of at most {MAX_PROBE_N}^3, got {A.grid.dims}"
            )
        report = SolveReport(h=A.h, grid_dims=tuple(A.grid.dims))
        A = A.matrix
    else:
        report = SolveReport()
    dense = A.toarray() if scipy.sparse.issparse(A) else np.asarray(A, dtype=float)
    sigma = svdvals(dense)
    report.sigma_min = float(sigma[-1])
    report.sigma_ratio = float(sigma[-1] / sigma[0]) if sigma[0] > 0 else 0.0
    report.converged = True
    logger.info(
        f"Injectivity probe: sigma_min={report.sigma_min:.4e}, "
        f"sigma_min/sigma_max={report.sigma_ratio:.4e}"
    )
    return report


def h_sweep(
    op_config,
    geometry,
    phantom,
    h_values,
    grid=None,
    tol=config.SOLVER_TOL,
    max_iter=config.SOLVER_MAX_ITER,
    balance=config.SOLVER_BALANCE,
    basis=config.SOLVER_BASIS,
):
    """
    Reconstruct one phantom for several h; failing rows are recorded, not raised

    Returns:
        list[SolveReport]: One row per h, in the given order
    """
    h_values = list(h_values)
    if len(h_values) < 3:
        raise ValidationError(f"h sweep needs at least 3 values, got {len(h_values)}")
    grid = grid or RegularGrid.covering(geometry, config.GRID_N)
    base_points = grid.nodes()[grid.mask(geometry, "M").ravel()]

    rows = []
    for h in tqdm(h_values, desc="sweep-h", disable=None):
        try:
            local = replace(op_config, h=float(h))
            d = quadrature_sinogram(local, geometry, phantom, base_points)
            _, report = reconstruct(
                local, geometry, d, grid, tol, max_iter, balance, truth=phantom, basis=basis
            )
            report.message = "ok"
        except FolxrayError as e:
            logger.error(f"h={h}: {e}")
            report = getattr(e, "report", None) or SolveReport()
            report.h = float(h)
            report.grid_dims = tuple(grid.dims)
            report.variant = op_config.variant
            report.converged = False
            report.message = f"{type(e).__name__}: {e}"
        rows.append(report)
    return rows


def stability_sweep(
    op_config,
    geometry,
    phantoms,
    grid=None,
    tol=config.SOLVER_TOL,
    max_iter=config.SOLVER_MAX_ITER,
    balance=config.SOLVER_BALANCE,
    basis=config.SOLVER_BASIS,
):
    """
    Reconstruct a family of phantoms with one assembled operator and report
    |f_hat| / |d| for each

    Returns:
        tuple: (list[SolveReport], max/min stability ratio over converged rows)
    """
    phantoms = list(phantoms)
    if len(phantoms) < 2:
        raise ValidationError(f"Stability sweep needs at least 2 phantoms, got {len(phantoms)}")
    grid = grid or RegularGrid.covering(geometry, config.GRID_N)
    assembled = assemble_A(op_config, geometry, grid, balance=balance, basis=basis)
    base_points = grid.nodes()[grid.mask(geometry, "M").ravel()]

    rows = []
    for k, phantom in enumerate(tqdm(phantoms, desc="stability", disable=None)):
        try:
            d = quadrature_sinogram(op_config, geometry, phantom, base_points)
            _, report = reconstruct(
                op_config,
                geometry,
                d,
                grid,
                tol,
                max_iter,
                balance,
                truth=phantom,
                basis=basis,
                assembled=assembled,
            )
            report.message = "ok"
        except FolxrayError as e:
            logger.error(f"Phantom {k}: {e}")
            report = getattr(e, "report", None) or SolveReport()
            report.h = op_config.h
            report.grid_dims = tuple(grid.dims)
            report.variant = op_config.variant
            report.converged = False
            report.message = f"{type(e).__name__}: {e}"
        rows.append(report)

    ratios = np.array([r.stability_ratio for r in rows if r.converged])
    ratios = ratios[np.isfinite(ratios) & (ratios > 0)]
    spread = float(ratios.max() / ratios.min()) if ratios.size >= 2 else float("nan")
    logger.info(f"Stability ratio spread over {ratios.size} phantoms: {spread:.3f}")
    return rows, spread
