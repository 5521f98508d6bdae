"""
All settings of the Co-DA lab are here.
"""

# Numerics
EPS_FLOOR = 1e-8
PROB_CLAMP = 1e-12
SIMPLEX_TOL = 1e-9

# Alignment
DEFAULT_ALPHA = 0.99

# Segmenter
FEATURE_DIM = 5
# Index of the normalized column coordinate in the feature stack
COLUMN_FEATURE = 2
DEFAULT_HIDDEN = 32
DEFAULT_LR = 0.05
DEFAULT_MOMENTUM = 0.9
DEFAULT_LR_POWER = 0.9
# `exponential` schedule ends at lr * EXPONENTIAL_LR_FLOOR
EXPONENTIAL_LR_FLOOR = 0.001

# Co-training engine
DEFAULT_LABELED_BATCH = 1024
DEFAULT_UNLABELED_BATCH = 1024
DEFAULT_MAX_ITERATIONS = 5000
DEFAULT_EVAL_EVERY = 200
DEFAULT_AUG_NOISE = 0.01

# Binary formats
PMAP_MAGIC = b"CODAPMAP"
SEGMENTER_MAGIC = b"CODASEG1"
PGM_MAGIC = b"P5"
DUMP_DIGITS = 17

# Metrics
BRUTE_FORCE_LIMIT = 500
HD_PERCENTILE = 95

# Synthetic data: the standard "tail5" benchmark
TAIL5_SIZE = (64, 64)
TAIL5_WEIGHTS = (1.0, 1 / 3, 1 / 9, 1 / 27, 1 / 54)
TAIL5_MEANS = (0.1, 0.3, 0.5, 0.7, 0.9)
TAIL5_NOISE = 0.15
TAIL5_LABELED_FRACTION = 0.1
DEFAULT_EVAL_FRACTION = 0.2
DEFAULT_IMAGES = 50
MAX_SHAPE_ATTEMPTS = 400
# A class is generated successfully when it reaches this share of its target
MIN_COVERAGE = 0.75

# Ablation
ABLATION_MODES = [
    "cotrain",
    "cotrain+naiveDA",
    "cotrain+OE",
    "cotrain+CoDA",
    "cotrain+CoDA+OE",
]
THRESHOLD_GRID = [0.5, 0.6, 0.7, 0.8, 0.9, None]

# Output files
CSV_BASE_COLUMNS = [
    "iter",
    "L_s",
    "L_u",
    "mask_frac_1",
    "mask_frac_2",
    "mIoU_1",
    "mIoU_2",
]
ABLATION_COLUMNS = ["mode", "threshold", "seed", "mIoU", "minority_IoU"]
DATASET_MANIFEST = "manifest.json"
IMAGES_DIR = "images"
LABELS_DIR = "labels"

# Logging
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Environment
THREADS_ENV = "CODA_THREADS"
