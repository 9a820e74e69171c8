import os
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Base directory of the project
BASE_DIR = Path(__file__).resolve().parent.parent

# Workspace configuration
WORKSPACE_DIR = Path(os.getenv('TACTILE_WORKSPACE', str(BASE_DIR / 'workspace')))
REGISTRY_FILE = os.getenv('TACTILE_REGISTRY_FILE', 'runs.jsonl')
DEFAULT_DEVICE = os.getenv('TACTILE_DEVICE', 'cpu')
DATA_WORKERS = int(os.getenv('TACTILE_DATA_WORKERS', '1'))

# Synthetic tactile data
DATASET_CONFIG = {
    'image_height': 128,
    'image_width': 160,
    'px_per_mm': 8.0,
    'gel_thickness_mm': 2.0,
    'membrane_sigma_px': 2.0,
    'noise_std': 0.01,
    'marker_rows': 7,
    'marker_cols': 9,
    'marker_spacing_px': 16.0,
    'marker_radius_px': 2.5,
    'shear_falloff': 'raised_cosine',
    'rate_hz': 10.0,
    'frames_per_episode': 200,
    'train_frames': None,  # total trainer frames; overrides train_episodes when set
    'max_depth_mm': 1.2,
    'min_depth_mm': 0.15,
    'shear_max_px': 3.0,
    'train_objects': ['ball'],
    'train_episodes': 24,
    'eval_objects': ['hex-rod', 'textured-blob', 'edge'],
    'eval_sensor_variants': 3,
    'eval_episodes_per_cell': 1,
    'eval_frames_per_episode': 60,
    'pose_object': 'hex-rod',
    'pose_episodes': 56,
    'pose_frames_per_episode': 200,
    'workers': DATA_WORKERS,
}

# Representation learning (VQ-regularized adversarial autoencoder)
AUTOENCODER_CONFIG = {
    'downsample_factor': 16,
    'latent_channels': 4,
    'base_channels': 64,
    'max_channels': 256,
    'codebook_size': 512,
    'commitment_weight': 0.25,
    'adversarial_weight': 0.1,
    'disc_start_fraction': 0.3,
    'disc_base_channels': 64,
    'disc_layers': 3,
    'vq_enabled': True,
    'downstream_latent': 'pre_quant',
    'dead_code_steps': 2000,
    'lr_generator': 2e-4,
    'lr_discriminator': 2e-4,
    'batch_size': 16,
    'total_steps': 6000,
    'log_every': 50,
    'checkpoint_every': 1000,
    'num_workers': 0,
    'seed': 0,
}

# Downstream decoder head
HEAD_CONFIG = {
    'channels': None,  # None -> 2 blocks for 8x10 latents, 3 blocks for 16x20
    'groups': 8,
    'se_reduction': 8,
    'output_dim': 4,
}

# Pose regression task
POSE_CONFIG = {
    'mode': 'frozen',
    'train_ratio': 0.9,
    'split_seed': 42,
    'epochs': 30,
    'batch_size': 64,
    'lr': 1e-3,
    'train_clamp_eps': 1e-7,
    'cache_frozen_latents': True,
    'seed': 0,
}

# Marker tracking
MARKER_CONFIG = {
    'area_band': [0.3, 3.0],
    'min_contrast': 0.08,
    'marker_color': 0.04,
    'gate_fraction': 0.6,
    'min_shear_px': 1.0,
}

# Benchmark matrix
BENCH_CONFIG = {
    'methods': ['unit', 'unit_no_vq', 'scratch', 'frozen_random'],
    'downsample_factors': [16, 8],
    'seeds': [0, 1, 2],
    'trainer_objects': ['ball'],
    'frozen_gain_ratio': 0.7,
    'vq_trend_ratio': 1.1,
}

# Logging Configuration
LOG_DIR = Path(os.getenv('TACTILE_LOG_DIR', str(BASE_DIR / 'logs')))
LOG_LEVEL = os.getenv('TACTILE_LOG_LEVEL', 'INFO')

LOGGING_CONFIG = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'standard': {
            'format': '%(asctime)s [%(levelname)s] %(name)s: %(message)s'
        },
        'json': {
            '()': 'pythonjsonlogger.jsonlogger.JsonFormatter',
            'format': '%(asctime)s %(levelname)s %(name)s %(message)s'
        },
    },
    'handlers': {
        'default': {
            'level': LOG_LEVEL,
            'formatter': 'standard',
            'class': 'logging.StreamHandler',
            'stream': 'ext://sys.stderr',
        },
        'file': {
            'level': LOG_LEVEL,
            'formatter': 'json',
            'class': 'logging.FileHandler',
            'filename': str(LOG_DIR / 'tactile.log'),
            'mode': 'a',
            'delay': True,
        },
    },
    'loggers': {
        '': {
            'handlers': ['default', 'file'],
            'level': LOG_LEVEL,
            'propagate': True
        }
    }
}
