import os

SEED = 7

# Scene corpus
IMAGE_SIZE = 64
NUM_CLASSES = 5
N_SOURCE = 256
N_TARGET = 128
SOURCE_FILE = 'source.ibad'
TARGET_FILE = 'target.ibad'

# Model geometry
STAGE_WIDTHS = (16, 32, 64, 128)
BLOCKS_PER_STAGE = (2, 2, 2, 2)
HEADS_PER_STAGE = (1, 2, 4, 8)
PATCH_KERNELS = (7, 3, 3, 3)
PATCH_STRIDES = (4, 2, 2, 2)
MLP_RATIO = 2
DECODER_WIDTH = 64
FUSION_SITE_COUNT = 4
INIT_STD = 0.02
LAYER_NORM_EPS = 1e-5

# Optimisation
BATCH_SIZE = 4
TRAIN_STEPS = 2000
WARMUP_STEPS = 60
LR_BACKBONE = 1e-4
LR_CLASSIFIER = 1e-3
WEIGHT_DECAY = 0.01
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
RICA_STRENGTH = 0.5
CROP_PAD = 4
LOG_EVERY = 50
EVAL_EVERY = 500

# Gradient checking
FD_EPS = 1e-5
FD_FLOOR = 1e-8
GRADCHECK_LAYER_TOL = 1e-5
GRADCHECK_MODEL_TOL = 1e-4
GRADCHECK_MODEL_ENTRIES = 50
GRADCHECK_FLOOR = 1e-4

CHECK_FINITE = os.environ.get('IBA_CHECK_FINITE', '0') == '1'

# File names inside a run directory
CHECKPOINT_FILE = 'model.ibac'
METRICS_FILE = 'metrics.csv'
EVAL_FILE = 'eval.csv'
RUN_CONFIG_FILE = 'run_config.json'
ABLATION_FILE = 'ablation.csv'
RICA_ABLATION_FILE = 'ablation_rica.csv'

LOG_LEVEL = os.environ.get('IBA_LOG_LEVEL', 'INFO')
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
