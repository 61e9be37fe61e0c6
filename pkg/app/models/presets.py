"""
Presets - Variant sizes and per-task training defaults
"""
from typing import Dict, Tuple

# (H, D, C, E, F). Wide uses D = C / H = 6 so that C = H * D = 72 holds.
VARIANT_SIZES: Dict[str, Tuple[int, int, int, int, int]] = {
    "slim": (4, 2, 8, 16, 256),
    "fit": (8, 4, 32, 128, 512),
    "wide": (12, 6, 72, 432, 768),
}

# Reported sizes for the 72-class task, used as the ±5% reference.
REFERENCE_PARAMETER_COUNTS: Dict[str, float] = {
    "slim": 4.56e6,
    "fit": 11.52e6,
    "wide": 23.55e6,
}

TASK_IDS = ("6cat", "72ex", "hf-io", "hf", "io")

# (epochs, weight_decay, gamma) per task and variant
TRAINING_DEFAULTS: Dict[str, Dict[str, Tuple[int, float, float]]] = {
    "6cat": {"slim": (35, 0.135, 0.5), "fit": (35, 0.180, 0.5), "wide": (40, 0.170, 0.6)},
    "72ex": {"slim": (80, 0.016, 0.7), "fit": (35, 0.030, 0.7), "wide": (35, 0.035, 0.7)},
    "hf-io": {"slim": (70, 0.600, 0.6), "fit": (70, 0.750, 0.6), "wide": (10, 0.750, 0.6)},
    "hf": {"slim": (70, 0.100, 0.6), "fit": (70, 0.400, 0.6), "wide": (10, 0.400, 0.6)},
    "io": {"slim": (70, 0.150, 0.6), "fit": (70, 0.350, 0.6), "wide": (10, 0.375, 0.6)},
}

DEFAULT_LR = 1e-4
DEFAULT_BATCH_SIZE = 64
MILESTONE_START = 15
MILESTONE_STEP = 5

# Stimulus categories in exemplar order: exemplar e belongs to category e // 12
CATEGORIES = ("HB", "HF", "AB", "AF", "FV", "IO")
EXEMPLARS_PER_CATEGORY = 12
NUM_EXEMPLARS = len(CATEGORIES) * EXEMPLARS_PER_CATEGORY
HF_CATEGORY = CATEGORIES.index("HF")
IO_CATEGORY = CATEGORIES.index("IO")

RECORDING_SAMPLE_RATE_HZ = 62.5
RECORDING_CHANNELS = 124
RECORDING_TIME_FRAMES = 32
