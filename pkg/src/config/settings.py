import os
from pathlib import Path

from dotenv import load_dotenv

# Environment overrides (.env next to the project is honoured)
load_dotenv()

# Base directory (project root: src/config/settings.py -> go up to project)
BASE_DIR = Path(__file__).resolve().parent.parent.parent

# Output directories
OUTPUT_DIR = Path(os.getenv("DYADIC_OUTPUT_DIR", BASE_DIR / "runs"))

# Project metadata
VERSION = "0.1.0"

# Logging
LOG_LEVEL = os.getenv("DYADIC_LOG_LEVEL", "INFO").upper()

# Worker threads for Monte-Carlo chunks and block sampling; 1 forces sequential runs
DEFAULT_THREADS = max(1, int(os.getenv("DYADIC_THREADS", "1")))

# Function representation
BUILTIN_GRID_DEPTH = 14  # builtins are resolved on 2^14 cells for quadrature
GAUSS_NODES_PER_CELL = 4
MODULUS_PROBE_DEPTH = 10

# Haar analysis - every Haar sum is truncated at this rank
HAAR_DEPTH = 14
TAIL_LADDER_SIZE = 64
HAAR_RESOLUTION_MARGIN = 4  # sampled functions need grid_depth >= depth + 4

# Homeomorphisms
THETA_MIN, THETA_MAX = 0.25, 0.75
ADMISSIBLE_SPREAD = 0.125  # eta * sup q <= 1/8 keeps theta in [3/8, 5/8]
DERIVATIVE_CONSTANT = 8.0 / 3.0  # calibrated: -log(1 - x) <= (4/3) x for x <= 1/4
HOLDER_TOLERANCE = 1e-12

# Sign solver
SOLVER_ALPHA = 1.0
SOLVER_BETA = 1.0 / 50.0
SOLVER_BLOCK_SIZE = 4
SOLVER_LEAF_SIZE = 8
SOLVER_SIGMA_SCALE = 1.0
SOLVER_MAX_RETRIES = 200
SOLVER_C2 = 4.0
SOLVER_C4 = 1e-28
BRUTE_FORCE_LIMIT = 20
BRUTE_FORCE_CHUNK = 256

# Monte-Carlo
MC_SAMPLES = 4096
MC_CHUNK_SIZE = 256  # fixed chunking keeps results independent of the thread count

# Reduction pipeline
PIPELINE_DEPTH = 12
PIPELINE_ETA = 0.125
U_MAX = 6
M_MAX = 8
DELTA_MIN = 2.0 ** -8
SPLIT_FACTOR = 5.0 / 8.0
PRECISION_FRACTION = 0.25
GAMMA_INSTANCE = 91
XI_SUBSAMPLE_ABOVE = 8
QUADRATURE_MIN_NODES = 16
MAX_MAGNITUDE_CLASS = 2 ** 20
EVAL_GRID_DEPTH = 13
CALIBRATION_HEADROOM = 4.0  # C1 is this multiple of the first nonzero peak ratio of a stage
TELESCOPING_CONSTANT = 1.0  # C in omega_f(C 2^{-4u/5})
