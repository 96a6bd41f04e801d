import os


# Directories
BASE_DIR = os.path.dirname(os.path.abspath(__file__))
DATA_DIR = os.path.join(BASE_DIR, "../data/")
RUNS_DIRECTORY = os.path.join(BASE_DIR, "../runs/")

# Static resources (primary path, fallback path relative to the repository root)
CORRUPTION_PARAMS_FILE = "data/corruption_params.json"
PUBLISHED_RATES_FILE = "data/published_error_rates.json"


# Worker parallelism (SETMIX_THREADS caps every pool)
THREADS = max(1, int(os.environ.get("SETMIX_THREADS", os.cpu_count() or 1)))


# Geometry
KNN_BACKEND = "brute"  # "brute" or "kdtree" (identical output contract)
NORMALIZE_TOLERANCE = 1e-6  # allowed excess over the unit sphere before corruption
DEGENERATE_PROJECTION = 1e-12  # PCS: projected points shorter than this sort first
DEGENERATE_REFERENCE = 1e-9  # PCS: minimum in-plane length of the reference vector


# Network numerics
NORM_EPSILON = 1e-5
BATCH_NORM_MOMENTUM = 0.9  # running = momentum * running + (1 - momentum) * batch
MIXER_HIDDEN_D = 8  # output width d of the point-dimension MLP (canonical)
DESK_MIXER_HIDDEN_D = 2
HEAD_DROPOUT = 0.5
MIXER_DROPOUT = 0.2


# Optimizer and training
LEARNING_RATE = 1e-3
ADAM_BETAS = (0.9, 0.999)
ADAM_EPSILON = 1e-8
LR_DECAY = 0.7
LR_DECAY_EVERY = 10  # epochs
BATCH_SIZE = 32
DEFAULT_SEED = 0


# Gradient verification
GRADCHECK_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_ABS_FLOOR = 1e-6  # denominator floor of the relative error
GRADCHECK_MAX_ENTRIES = None  # sampled coordinates per parameter tensor; None checks all


# Robustness metrics: PointNet++ baseline error rates (clean 7.0 %, noise 21.5 %)
BASELINE_CLEAN = 0.070
BASELINE_NOISE = 0.215
SEVERITIES = (1, 2, 3, 4, 5)


# File formats
PCF_MAGIC = b"PCF1"
CHECKPOINT_HEADER = "SETMIX-CKPT v1"
METRICS_SCHEMA = "setmix-metrics-1"
CORRUPTION_MANIFEST = "corruption_manifest.json"
DATASET_INDEX = "index.csv"
DATASET_MANIFEST = "dataset.json"
RUN_MANIFEST = "run_manifest.json"


# Exit codes
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_VERIFICATION = 4
