"""
Configuration settings for the GPE multilevel-correction solver
"""

import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Paths
CACHE_DIR = os.getenv("GPE_MLC_CACHE_DIR", os.path.join(".cache", "gpe_mlc"))
LOGS_DIR = os.getenv("GPE_MLC_LOGS_DIR", "logs")
LOG_LEVEL = os.getenv("GPE_MLC_LOG_LEVEL", "INFO")

# Problem defaults (harmonic trap W = x1^2 + x2^2, zeta = 1 on the unit square)
DEFAULT_DOMAIN = "unit-square"
DEFAULT_GAMMA = (1.0, 1.0)
DEFAULT_ZETA = 1.0
DEFAULT_BASE_N = 6
DEFAULT_LEVELS = 4

# Self-consistent field iteration
SCF_LAMBDA_TOL = 1e-10   # |d lambda| <= tol * max(1, |lambda|)
SCF_U_TOL = 1e-8         # ||d u||_M
SCF_MAX_ITERS = 200
SCF_MIXING = 0.6
SCF_OSCILLATION_FLIPS = 2  # sign flips of d lambda before the mixing is halved

# Composite-space SCF inside one correction step
MLC_MIXING = 1.0
MLC_SCF_FACTOR = 1e-3    # tolerances scale as factor * h_{k+1}^2

# Inner eigensolvers
DENSE_MAX_DIM = 2000     # hard cap for the dense pencil solver
DENSE_SWITCH = 600       # SCF uses the dense path up to this dimension
DENSE_RESIDUAL_TOL = 1e-10  # backward error of the dense pencil solution
LOBPCG_TOL = 1e-11       # residual tolerance, relative to max |A_ij|
LOBPCG_MAX_ITERS = 500

# Multigrid
MG_PRE_SWEEPS = 2
MG_POST_SWEEPS = 2
MG_C = 0.1               # rel_tol = MG_C * h^2 in the correction step
MG_MAX_CYCLES = 50
MG_DIVERGENCE_CYCLES = 3

# Composite-space conditioning guard
GUARD_TOL = 1e-10        # Schur complement threshold relative to u^T M u
GUARD_ZERO_TOL = 1e-14   # orthogonalized direction below this is treated as lost

# Adaptive refinement
DORFLER_THETA = 0.5
ADAPTIVE_ITERATIONS = 15
BISECTION_MAX_SWEEPS = 100

# Output
SCHEMA_VERSION = 1
TABLE_FILENAME = "table.csv"
REPORT_FILENAME = "report.json"
FLOAT_FORMAT = "{:.12e}"
