from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from app.utils.exceptions import ConfigError, ContractViolation

SHAPE_KINDS = ('sphere', 'hex-rod', 'textured-blob', 'edge', 'corner')
SPLIT_TAGS = ('train', 'eval', 'pose')
TRANSFER_MODES = ('frozen', 'finetune', 'scratch', 'frozen_random')


@dataclass(frozen=True)
class ObjectShape:
    kind: str
    radius_mm: float = 3.0
    rod_width_mm: float = 1.5
    length_mm: float = 14.0
    texture_amplitude_mm: float = 0.08
    texture_frequency_per_mm: float = 0.8
    edge_radius_mm: float = 1.5

    def validate(self, gel_thickness_mm: float) -> None:
        if self.kind not in SHAPE_KINDS:
            raise ConfigError(f"Unknown object kind: {self.kind}", ['kind'])
        sizes = {
            'radius_mm': self.radius_mm,
            'rod_width_mm': self.rod_width_mm,
            'length_mm': self.length_mm,
            'texture_amplitude_mm': self.texture_amplitude_mm,
            'texture_frequency_per_mm': self.texture_frequency_per_mm,
            'edge_radius_mm': self.edge_radius_mm,
        }
        bad = [name for name, value in sizes.items() if not value > 0]
        if self.texture_amplitude_mm >= gel_thickness_mm:
            bad.append('texture_amplitude_mm')
        if bad:
            raise ConfigError(f"Invalid size parameters for {self.kind}: {', '.join(bad)}", bad)


@dataclass(frozen=True)
class ContactScene:
    shape: ObjectShape
    orientation: Tuple[float, float, float, float]  # (w, x, y, z)
    offset: Tuple[float, float] = (0.0, 0.0)  # (u, v) pixels
    depth_mm: float = 0.0
    shear: Tuple[float, float] = (0.0, 0.0)  # (sx, sy) pixels

    def validate(self, max_depth_mm: float, shear_max_px: float) -> None:
        norm = float(np.linalg.norm(self.orientation))
        if abs(norm - 1.0) > 1e-6:
            raise ContractViolation(f"Scene orientation is not a unit quaternion (norm={norm:.9f})")
        if not 0.0 <= self.depth_mm <= max_depth_mm:
            raise ContractViolation(f"Indentation depth {self.depth_mm} outside [0, {max_depth_mm}]")
        if float(np.hypot(*self.shear)) > shear_max_px + 1e-9:
            raise ContractViolation(f"Shear {self.shear} exceeds limit {shear_max_px}")

    def to_record(self) -> Dict[str, Any]:
        return {
            'kind': self.shape.kind,
            'quaternion': [float(q) for q in self.orientation],
            'offset': [float(o) for o in self.offset],
            'depth': float(self.depth_mm),
            'shear': [float(s) for s in self.shear],
        }


@dataclass(frozen=True)
class SensorProfile:
    height: int = 128
    width: int = 160
    px_per_mm: float = 8.0
    light_directions: Tuple[Tuple[float, float, float], ...] = (
        (0.612372, 0.353553, 0.707107),
        (-0.612372, 0.353553, 0.707107),
        (0.0, -0.707107, 0.707107),
    )
    light_colors: Tuple[Tuple[float, float, float], ...] = (
        (0.55, 0.05, 0.05),
        (0.05, 0.55, 0.05),
        (0.05, 0.05, 0.55),
    )
    background_tint: Tuple[float, float, float] = (0.45, 0.47, 0.50)
    marker_rows: int = 7
    marker_cols: int = 9
    marker_spacing_px: float = 16.0
    marker_radius_px: float = 2.5
    marker_offset: Tuple[float, float] = (0.0, 0.0)
    marker_color: float = 0.04
    noise_std: float = 0.01
    membrane_sigma_px: float = 2.0
    gel_thickness_mm: float = 2.0
    variant: int = 0

    def light_direction_array(self) -> np.ndarray:
        dirs = np.asarray(self.light_directions, dtype=np.float64)
        return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    def rest_markers(self) -> np.ndarray:
        """Marker rest positions as an (N, 2) array of (x, y) pixel coordinates"""
        if self.marker_rows == 0 or self.marker_cols == 0:
            return np.zeros((0, 2))
        cx = (self.width - 1) / 2.0 + self.marker_offset[0]
        cy = (self.height - 1) / 2.0 + self.marker_offset[1]
        xs = cx + (np.arange(self.marker_cols) - (self.marker_cols - 1) / 2.0) * self.marker_spacing_px
        ys = cy + (np.arange(self.marker_rows) - (self.marker_rows - 1) / 2.0) * self.marker_spacing_px
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def validate(self) -> None:
        bad = []
        norms = np.linalg.norm(np.asarray(self.light_directions, dtype=np.float64), axis=1)
        if len(self.light_directions) != 3 or np.any(np.abs(norms - 1.0) > 1e-4):
            bad.append('light_directions')
        if len(self.light_colors) != 3:
            bad.append('light_colors')
        markers = self.rest_markers()
        if len(markers):
            r = self.marker_radius_px
            if (markers[:, 0].min() - r < 0 or markers[:, 0].max() + r > self.width - 1
                    or markers[:, 1].min() - r < 0 or markers[:, 1].max() + r > self.height - 1):
                bad.append('marker_grid')
        if bad:
            raise ConfigError(f"Invalid sensor profile: {', '.join(bad)}", bad)

    def to_record(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class MarkerField:
    rest: np.ndarray  # (N, 2) x, y
    current: np.ndarray  # (N, 2) x, y
    valid: np.ndarray = None  # (N,) bool

    def __post_init__(self):
        self.rest = np.asarray(self.rest, dtype=np.float64).reshape(-1, 2)
        self.current = np.asarray(self.current, dtype=np.float64).reshape(-1, 2)
        if self.valid is None:
            self.valid = np.ones(len(self.rest), dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def displacements(self) -> np.ndarray:
        return self.current - self.rest

    def __len__(self) -> int:
        return len(self.rest)

    def to_record(self) -> Dict[str, Any]:
        return {
            'rest': self.rest.tolist(),
            'current': self.current.tolist(),
            'valid': self.valid.tolist(),
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> 'MarkerField':
        return cls(np.asarray(record['rest']), np.asarray(record['current']), np.asarray(record['valid']))


@dataclass
class TactileImage:
    pixels: np.ndarray  # (H, W, 3) float in [0, 1]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.pixels.shape

    def to_uint8(self) -> np.ndarray:
        return np.round(np.clip(self.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass
class Frame:
    image: TactileImage
    scene: ContactScene
    markers: MarkerField


@dataclass
class Episode:
    id: str
    frames: List[Frame]
    rate_hz: float = 10.0
    object_kind: str = 'ball'
    sensor_variant: int = 0
    split: str = 'train'
    seed: int = 0

    @property
    def duration_s(self) -> float:
        return len(self.frames) / self.rate_hz


@dataclass
class EpisodeEntry:
    id: str
    frames: int
    split: str
    object_kind: str
    sensor_variant: int
    seed: int


@dataclass
class DatasetManifest:
    root: str
    episodes: List[EpisodeEntry]
    config_hash: str
    global_seed: int
    templates: Dict[int, str] = field(default_factory=dict)

    @property
    def total_frames(self) -> int:
        return sum(e.frames for e in self.episodes)

    def episode_ids(self, split: Optional[str] = None) -> List[str]:
        return [e.id for e in self.episodes if split is None or e.split == split]

    def to_record(self) -> Dict[str, Any]:
        return {
            'root': self.root,
            'episodes': [asdict(e) for e in self.episodes],
            'config_hash': self.config_hash,
            'global_seed': self.global_seed,
            'total_frames': self.total_frames,
            'templates': {str(k): v for k, v in self.templates.items()},
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> 'DatasetManifest':
        return cls(
            root=record['root'],
            episodes=[EpisodeEntry(**e) for e in record['episodes']],
            config_hash=record['config_hash'],
            global_seed=record['global_seed'],
            templates={int(k): v for k, v in record.get('templates', {}).items()},
        )


@dataclass(frozen=True)
class AutoencoderConfig:
    input_height: int = 128
    input_width: int = 160
    downsample_factor: int = 16
    latent_channels: int = 4
    base_channels: int = 64
    max_channels: int = 256
    codebook_size: int = 512
    commitment_weight: float = 0.25
    adversarial_weight: float = 0.1
    disc_start_step: int = 1800
    disc_base_channels: int = 64
    disc_layers: int = 3
    vq_enabled: bool = True
    downstream_latent: str = 'pre_quant'
    dead_code_steps: int = 2000
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    batch_size: int = 16
    total_steps: int = 6000
    log_every: int = 50
    checkpoint_every: int = 1000
    num_workers: int = 0
    seed: int = 0

    def __post_init__(self):
        bad = []
        f = self.downsample_factor
        if f <= 0 or f & (f - 1):
            bad.append('downsample_factor')
        elif self.input_height % f or self.input_width % f:
            bad.append('input_size')
        if self.codebook_size < 2:
            bad.append('codebook_size')
        if not self.commitment_weight > 0:
            bad.append('commitment_weight')
        if self.adversarial_weight < 0:
            bad.append('adversarial_weight')
        if bad:
            raise ConfigError(f"Invalid autoencoder config: {', '.join(bad)}", bad)

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        """(c, h, w) of the encoder output"""
        f = self.downsample_factor
        return (self.latent_channels, self.input_height // f, self.input_width // f)

    @property
    def tag(self) -> str:
        return 'UniT' if self.vq_enabled else 'UniT w/o VQ'

    @classmethod
    def from_settings(cls, ae: Dict[str, Any], dataset: Dict[str, Any]) -> 'AutoencoderConfig':
        """Build from the 'autoencoder' and 'dataset' config sections"""
        keys = set(cls.__dataclass_fields__) - {'input_height', 'input_width', 'disc_start_step'}
        kwargs = {k: ae[k] for k in keys if k in ae}
        return cls(
            input_height=dataset['image_height'],
            input_width=dataset['image_width'],
            disc_start_step=int(ae['disc_start_fraction'] * ae['total_steps']),
            **kwargs,
        )

    def to_record(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class HeadConfig:
    latent_channels: int
    latent_height: int
    latent_width: int
    channels: Tuple[int, ...] = ()
    groups: int = 8
    se_reduction: int = 8
    output_dim: int = 4

    def __post_init__(self):
        if not self.channels:
            default = (128, 256) if self.latent_height * self.latent_width <= 80 else (128, 256, 256)
            object.__setattr__(self, 'channels', default)
        object.__setattr__(self, 'channels', tuple(int(c) for c in self.channels))
        bad = []
        if len(self.channels) < 1:
            bad.append('channels')
        if any(c % self.groups for c in self.channels):
            bad.append('groups')
        if self.se_reduction < 1 or any(c % self.se_reduction for c in self.channels):
            bad.append('se_reduction')
        h, w = self.latent_height, self.latent_width
        for _ in self.channels:
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                bad.append('pooling_underflow')
                break
        if self.output_dim < 1:
            bad.append('output_dim')
        if bad:
            raise ConfigError(f"Invalid head config: {', '.join(bad)}", bad)

    @property
    def pooled_shape(self) -> Tuple[int, int]:
        h, w = self.latent_height, self.latent_width
        for _ in self.channels:
            h, w = h // 2, w // 2
        return h, w

    @property
    def embedding_dim(self) -> int:
        h, w = self.pooled_shape
        return self.channels[-1] * h * w

    def to_record(self) -> Dict[str, Any]:
        record = asdict(self)
        record['channels'] = list(self.channels)
        return record


@dataclass(frozen=True)
class SplitSpec:
    ratio: float = 0.9
    seed: int = 42
    unit: str = 'episode'

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"Split ratio must lie in (0, 1), got {self.ratio}", ['ratio'])


@dataclass
class PoseSample:
    image: np.ndarray
    label: np.ndarray  # (w, x, y, z)
    episode_id: str


@dataclass
class RunRecord:
    run_id: str
    command: str
    config: Dict[str, Any]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, Dict[str, str]] = field(default_factory=dict)
    metrics: Dict[str, Any] = field(default_factory=dict)
    wall_time_s: float = 0.0
    status: str = 'ok'
    started_at: str = ''

    def to_record(self) -> Dict[str, Any]:
        return asdict(self)
