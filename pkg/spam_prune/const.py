DOMAIN = "spam_prune"

# Environment
ENV_DATA_DIR = "SPAM_PRUNE_DATA_DIR"

# Numerical tolerances
SYMMETRY_TOLERANCE = 1e-10
KRON_MAX_ENTRIES = 10**8

# Caps
JACOBIAN_MAX_PARAMS = 10**5
DENSE_GGN_MAX_PARAMS = 200

# Marginal likelihood training
DEFAULT_PRIOR_PRECISION = 1.0
DEFAULT_HYPER_LR = 0.1
DEFAULT_HYPER_STEPS = 100
DEFAULT_TEMPERATURE = 1.0
DEFAULT_MIN_LR = 1e-6

# Curvature kinds
CURVATURE_DIAG_GGN = "diag_ggn"
CURVATURE_DIAG_EF = "diag_ef"
CURVATURE_KFAC_EF = "kfac_ef"
CURVATURE_KFAC_GGN = "kfac_ggn"
CURVATURE_KFAC_GGN_EXACT = "kfac_ggn_exact"
CURVATURE_KINDS = [
    CURVATURE_DIAG_GGN,
    CURVATURE_DIAG_EF,
    CURVATURE_KFAC_EF,
    CURVATURE_KFAC_GGN,
    CURVATURE_KFAC_GGN_EXACT,
]

# Prior kinds
PRIOR_SCALAR = "scalar"
PRIOR_LAYERWISE = "layerwise"
PRIOR_UNITWISE = "unitwise"
PRIOR_PARAMETERWISE = "parameterwise"
PRIOR_KINDS = [PRIOR_SCALAR, PRIOR_LAYERWISE, PRIOR_UNITWISE, PRIOR_PARAMETERWISE]

# Training modes
MODE_MAP = "map"
MODE_SPAM = "spam"
MODE_L1 = "l1"
TRAIN_MODES = [MODE_MAP, MODE_SPAM, MODE_L1]

# Pruning criteria
CRITERION_OPD = "opd"
CRITERION_MAGNITUDE = "magnitude"
CRITERION_RANDOM = "random"
CRITERION_SNIP = "snip"
CRITERION_GRASP = "grasp"
CRITERION_SYNFLOW = "synflow"
CRITERIA = [
    CRITERION_OPD,
    CRITERION_MAGNITUDE,
    CRITERION_RANDOM,
    CRITERION_SNIP,
    CRITERION_GRASP,
    CRITERION_SYNFLOW,
]

SCOPE_GLOBAL = "global"
SCOPE_UNIFORM = "uniform"

RAMP_LINEAR = "linear"
RAMP_CUBIC = "cubic"

# Pruning defaults
DEFAULT_SCORING_BATCH = 128
GRASP_FD_STEP = 1e-3
DEFAULT_SPARSITIES = [0.2, 0.4, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99]

# Metrics
ECE_BINS = 15

# Experiment defaults
DEFAULT_SEEDS = [0, 1, 2, 3]
DEFAULT_TRAIN_FRACTION = 0.8
DEFAULT_MNIST_TRAIN_LIMIT = 10_000

# Artifact file names
CHECKPOINT_FILE = "network.ckpt"
POSTERIOR_FILE = "posterior.snap"
MASK_FILE = "mask.bin"
TRAIN_LOG_FILE = "train_log.jsonl"
MANIFEST_FILE = "manifest.json"
PROVENANCE_FILE = "provenance.json"
REPORT_CSV_FILE = "prune_report.csv"
REPORT_JSON_FILE = "prune_report.json"
SWEEP_CSV_FILE = "sweep_summary.csv"
DIAGNOSTICS_FILE = "diagnostics.json"
EVAL_FILE = "eval.json"
COMPACT_DIR = "compact"

# Frozen column order of prune reports
REPORT_COLUMNS = [
    "seed",
    "mode",
    "criterion",
    "sparsity",
    "realized_sparsity",
    "accuracy",
    "nll",
    "ece",
    "brier",
    "n",
    "params_total",
    "flops_per_forward",
    "bytes_on_disk",
    "wall_time",
]

SWEEP_COLUMNS = [
    "mode",
    "criterion",
    "sparsity",
    "metric",
    "mean",
    "stderr",
    "count",
]

# CLI exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

# Data
DEFAULT_CHUNK_SIZE = 1000
MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
