"""
Default settings for the folxray laboratory.
Every key of the experiment config file falls back to a value defined here.
"""

# Geometry
METRIC = "euclidean"
METRIC_EPS = 0.05
DOMAIN_CENTER = (2.0, 0.0, 0.0)
RADIUS_M = 1.0
RADIUS_MPRIME = 1.1
FOLIATION_CENTER = (0.0, 0.0, 0.0)
LAYER_OFFSET = 0.0
DIMENSION = 3
TRACE_STEP = 1e-2
CERTIFICATE_SAMPLES = 1000
CERTIFICATE_EPSILON = 1.0
CERTIFICATE_MARGIN = 0.98

# Phantom
PHANTOM_KIND = "gaussian_bump"
PHANTOM_CENTER = (2.0, 0.0, 0.0)
PHANTOM_WIDTH = 0.2
PHANTOM_AMPLITUDE = 1.0
PHANTOM_RADIUS = 0.9
PHANTOM_SEPARATION = 0.6

# Modified normal operator
H = 0.1
CUTOFF_LAMBDA = 4.0
CUTOFF_PROFILE = "bump"
CUTOFF_SHIFT = 3.0
ALPHA_MATCHED = True
WEIGHT_VARIANT = "global"
N_LAMBDA = 16
N_OMEGA = 48
OPERATOR_T_STEP = 0.02
DAMPING_TOLERANCE = 1.01

# Solver
GRID_N = 13
MAX_GRID_N = 17
SOLVER_TOL = 1e-8
SOLVER_MAX_ITER = 40
SOLVER_RESTART = 50
SOLVER_BALANCE = 1.0
SOLVER_BASIS = "cubic"
STAGNATION_REDUCTION = 1e-3

# Sweeps and symbol experiments
H_VALUES = (0.4, 0.2, 0.1)
SYMBOL_RADII = (0.0, 1.0, 3.0, 10.0, 30.0, 100.0)
SYMBOL_DIRECTIONS = 8
PROBE_XI = 1.0
PROBE_ETA = (1.0, 0.0)
ELLIPTICITY_MARGIN = 0.01
STABILITY_PHANTOMS = 10
STABILITY_SEED = 0
STABILITY_SPREAD_LIMIT = 10.0

# Output
OUTPUT_ROOT = "runs"
LOG_DIR = "logs"
DEFAULT_WORKERS = 1
WORKERS_ENV = "FOLXRAY_WORKERS"
