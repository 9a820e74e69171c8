import copy

import numpy as np
import pytest

from app.models.models import AutoencoderConfig, ContactScene, SensorProfile
from app.simulation.dataset_store import generate_dataset, load_manifest
from app.simulation.episode_generator import OBJECT_LIBRARY
from config import DATASET_CONFIG


def tiny_dataset_settings(**updates):
    settings = copy.deepcopy(DATASET_CONFIG)
    settings.update({
        'image_height': 64,
        'image_width': 80,
        'marker_rows': 3,
        'marker_cols': 4,
        'marker_spacing_px': 14.0,
        'marker_radius_px': 2.0,
        'frames_per_episode': 6,
        'train_episodes': 2,
        'eval_objects': ['hex-rod'],
        'eval_sensor_variants': 1,
        'eval_episodes_per_cell': 1,
        'eval_frames_per_episode': 4,
        'pose_episodes': 4,
        'pose_frames_per_episode': 5,
        'workers': 1,
    })
    settings.update(updates)
    return settings


def tiny_autoencoder_config(**updates):
    fields = dict(
        input_height=64,
        input_width=80,
        downsample_factor=16,
        latent_channels=4,
        base_channels=8,
        max_channels=16,
        codebook_size=16,
        disc_base_channels=8,
        disc_layers=2,
        disc_start_step=1,
        batch_size=4,
        total_steps=3,
        log_every=1,
        checkpoint_every=100,
        seed=0,
    )
    fields.update(updates)
    return AutoencoderConfig(**fields)


@pytest.fixture
def profile():
    return SensorProfile()


@pytest.fixture
def small_profile():
    return SensorProfile(height=64, width=80, marker_rows=3, marker_cols=4, marker_spacing_px=14.0,
                         marker_radius_px=2.0, noise_std=0.0)


@pytest.fixture
def sphere_scene():
    def make(depth=0.5, offset=(0.0, 0.0), shear=(0.0, 0.0), kind='ball'):
        return ContactScene(shape=OBJECT_LIBRARY[kind], orientation=(1.0, 0.0, 0.0, 0.0),
                            offset=offset, depth_mm=depth, shear=shear)
    return make


@pytest.fixture(scope='session')
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp('dataset')
    generate_dataset(tiny_dataset_settings(), 7, root)
    return load_manifest(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
