"""
Configuration settings for the TAFE segmentation toolkit
"""
import os

# Worker threads for conv kernels and evaluation (1 keeps runs bit-reproducible)
THREADS = int(os.getenv("TAFE_THREADS", "1"))

# Logging
LOG_LEVEL = os.getenv("TAFE_LOG_LEVEL", "INFO")

# Run registry (SQLite), kept outside run output directories
METADATA_DB = os.getenv("METADATA_DB", "metadata/runs_metadata.db")

# Model defaults
EMBED_DIM = 16
STAGES = 2
HEADS = 4
CLASSES = 4
IMAGE_SIZE = 64
ENCODER_DEPTH = 1
STRIP_KERNELS = (3, 5, 7)
AGGREGATE_KERNEL = 5
INIT_STD = 0.02
# "fan_in": conv and linear weights scaled by 1/sqrt(fan in); "normal": every weight N(0, INIT_STD)
INIT_SCHEME = os.getenv("TAFE_INIT", "fan_in")
LN_EPS = 1e-6

# Training defaults
LEARNING_RATE = float(os.getenv("TAFE_LR", "0.1"))
# Global gradient-norm ceiling per step; 0 disables clipping
GRAD_CLIP = float(os.getenv("TAFE_GRAD_CLIP", "5.0"))
ITERATIONS = 200
BATCH_SIZE = 4
CHECKPOINT_EVERY = 50

# Gradient checking
FD_STEP = float(os.getenv("FD_STEP", "1e-6"))
GRADCHECK_TOL = float(os.getenv("GRADCHECK_TOL", "1e-5"))
GRADCHECK_BUDGET = 5000
GRADCHECK_COORDS = 4

# Synthetic data
SCENE_RETRIES = 10

# Toolkit version
TAFE_VERSION = "1.0.0"
