import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, Tuple

import numpy as np

from app.models.models import (ContactScene, Episode, Frame, ObjectShape,
                               SensorProfile)
from app.simulation.gel_renderer import GelRenderer
from app.utils import quaternions
from app.utils.exceptions import ConfigError

logger = logging.getLogger("episode_generator")

# object name -> procedural shape; 'ball' and 'hex-rod' are the trainer objects
OBJECT_LIBRARY: Dict[str, ObjectShape] = {
    'ball': ObjectShape('sphere', radius_mm=3.0),
    'sphere': ObjectShape('sphere', radius_mm=4.0),
    'hex-rod': ObjectShape('hex-rod', rod_width_mm=1.5, length_mm=14.0),
    'textured-blob': ObjectShape('textured-blob', radius_mm=3.5, texture_amplitude_mm=0.08,
                                 texture_frequency_per_mm=0.8),
    'edge': ObjectShape('edge', edge_radius_mm=1.5),
    'corner': ObjectShape('corner', edge_radius_mm=1.5),
}

# (yaw, pitch, roll) half-ranges in degrees; the rod stays inside a contactable cone
ANGLE_LIMITS_DEG = {
    'hex-rod': (80.0, 8.0, 25.0),
    'default': (170.0, 10.0, 10.0),
}

STATE_FIELDS = ('yaw', 'pitch', 'roll', 'u', 'v', 'depth', 'sx', 'sy')


def object_shape(name: str) -> ObjectShape:
    if name not in OBJECT_LIBRARY:
        raise ConfigError(f"Unknown object '{name}'", [name])
    return OBJECT_LIBRARY[name]


def stable_hash(*parts: Any) -> int:
    """Process-independent 63-bit seed derived from the given parts"""
    text = ':'.join(str(p) for p in parts)
    return int(hashlib.sha256(text.encode('utf-8')).hexdigest()[:16], 16) >> 1


def base_profile(settings: Dict[str, Any]) -> SensorProfile:
    """Sensor profile from the 'dataset' config section"""
    profile = SensorProfile(
        height=settings['image_height'],
        width=settings['image_width'],
        px_per_mm=settings['px_per_mm'],
        marker_rows=settings['marker_rows'],
        marker_cols=settings['marker_cols'],
        marker_spacing_px=settings['marker_spacing_px'],
        marker_radius_px=settings['marker_radius_px'],
        noise_std=settings['noise_std'],
        membrane_sigma_px=settings['membrane_sigma_px'],
        gel_thickness_mm=settings['gel_thickness_mm'],
    )
    profile.validate()
    return profile


@dataclass
class EpisodeConfig:
    object_name: str
    profile: SensorProfile
    frames: int = 200
    rate_hz: float = 10.0
    max_depth_mm: float = 1.2
    min_depth_mm: float = 0.15
    shear_max_px: float = 3.0
    falloff: str = 'raised_cosine'
    split: str = 'train'
    episode_id: str = 'episode'
    # per-frame step limits
    angle_step_deg: float = 3.0
    offset_step_px: float = 1.5
    depth_step_mm: float = 0.05
    shear_step_px: float = 0.3
    momentum: float = 0.85
    extras: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigError("An episode needs at least one frame", ['frames'])
        if not 0.0 <= self.min_depth_mm <= self.max_depth_mm:
            raise ConfigError("Depth range is empty", ['min_depth_mm', 'max_depth_mm'])
        object_shape(self.object_name).validate(self.profile.gel_thickness_mm)

    @property
    def shape(self) -> ObjectShape:
        return object_shape(self.object_name)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        yaw, pitch, roll = np.radians(ANGLE_LIMITS_DEG.get(self.shape.kind, ANGLE_LIMITS_DEG['default']))
        u_max = self.profile.width / 5.0
        v_max = self.profile.height / 5.0
        s_max = self.shear_max_px / np.sqrt(2.0)
        hi = np.array([yaw, pitch, roll, u_max, v_max, self.max_depth_mm, s_max, s_max])
        lo = -hi
        lo[5] = self.min_depth_mm
        return lo, hi

    def step_limits(self) -> np.ndarray:
        a = np.radians(self.angle_step_deg)
        return np.array([a, a, a, self.offset_step_px, self.offset_step_px, self.depth_step_mm,
                         self.shear_step_px, self.shear_step_px])


def sample_trajectory(config: EpisodeConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth bounded random walk over (yaw, pitch, roll, u, v, depth, sx, sy), one row per frame"""
    lo, hi = config.bounds()
    step = config.step_limits()
    state = rng.uniform(lo, hi)
    velocity = np.zeros_like(state)
    states = np.empty((config.frames, len(STATE_FIELDS)))
    for k in range(config.frames):
        states[k] = state
        velocity = config.momentum * velocity + rng.normal(0.0, 0.5 * step)
        velocity = np.clip(velocity, -step, step)
        proposal = state + velocity
        # reflect off the bounds so per-frame deltas stay within the step limits
        over, under = proposal > hi, proposal < lo
        proposal = np.where(over, 2 * hi - proposal, proposal)
        proposal = np.where(under, 2 * lo - proposal, proposal)
        velocity = np.where(over | under, -velocity, velocity)
        state = np.clip(proposal, lo, hi)
    return states


def scene_from_state(shape: ObjectShape, state: np.ndarray) -> ContactScene:
    yaw, pitch, roll, u, v, depth, sx, sy = (float(s) for s in state)
    q = quaternions.from_euler(yaw, pitch, roll)
    return ContactScene(shape=shape, orientation=tuple(float(c) for c in q), offset=(u, v),
                        depth_mm=depth, shear=(sx, sy))


def iter_frames(config: EpisodeConfig, episode_seed: int) -> Iterator[Frame]:
    """Render an episode lazily; identical seeds give bit-identical frames"""
    trajectory_rng = np.random.default_rng([episode_seed, 0])
    noise_rng = np.random.default_rng([episode_seed, 1])
    renderer = GelRenderer(config.profile, config.falloff)
    shape = config.shape
    for state in sample_trajectory(config, trajectory_rng):
        scene = scene_from_state(shape, state)
        scene.validate(config.max_depth_mm, config.shear_max_px)
        image, markers, _ = renderer.render(scene, noise_rng)
        yield Frame(image=image, scene=scene, markers=markers)
    if renderer.empty_frames:
        logger.debug(f"Episode {config.episode_id}: {renderer.empty_frames} frames without contact")


def generate_episode(config: EpisodeConfig, episode_seed: int) -> Episode:
    frames = list(iter_frames(config, episode_seed))
    return Episode(
        id=config.episode_id,
        frames=frames,
        rate_hz=config.rate_hz,
        object_kind=config.object_name,
        sensor_variant=config.profile.variant,
        split=config.split,
        seed=episode_seed,
    )
