import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset
from tqdm import tqdm

from app.models.models import DatasetManifest, EpisodeEntry, SensorProfile
from app.simulation.episode_generator import (EpisodeConfig, base_profile,
                                              iter_frames, stable_hash)
from app.simulation.gel_renderer import background_template, sensor_variants
from app.utils.artifacts import (config_sha256, decimal_json, tree_sha256,
                                 write_decimal_json)
from app.utils.exceptions import DatasetError

logger = logging.getLogger("dataset_store")

MANIFEST_FILE = 'manifest.json'
CONFIG_FILE = 'config.json'
LABELS_FILE = 'labels.jsonl'


@dataclass
class EpisodeTask:
    index: int
    episode_id: str
    object_name: str
    split: str
    variant: int
    frames: int
    seed: int


def episode_dir(root: Path, episode_id: str) -> Path:
    return Path(root) / 'episodes' / f'ep_{episode_id}'


def frame_path(root: Path, episode_id: str, k: int) -> Path:
    return episode_dir(root, episode_id) / f'frame_{k}.png'


def template_path(root: Path, variant: int) -> Path:
    return Path(root) / 'templates' / f'sensor_{variant}.png'


def write_png(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)).save(path)


def read_png(path: Path) -> np.ndarray:
    """8-bit RGB PNG -> (H, W, 3) float32 in [0, 1]"""
    with Image.open(path) as img:
        return np.asarray(img.convert('RGB'), dtype=np.float32) / 255.0


def plan_episodes(settings: Dict[str, Any], global_seed: int) -> List[EpisodeTask]:
    """Episode list for the train, eval and pose sections, in a fixed order"""
    tasks: List[EpisodeTask] = []

    def add(object_name: str, split: str, variant: int, frames: int):
        index = len(tasks)
        episode_id = f'{split}-{object_name}-s{variant}-{index:04d}'
        tasks.append(EpisodeTask(index, episode_id, object_name, split, variant, frames,
                                 stable_hash(global_seed, index)))

    objects = settings['train_objects']
    train_frames = settings.get('train_frames')
    if train_frames:
        # a total frame budget overrides the episode count; the last episode may be shorter
        per = settings['frames_per_episode']
        count = math.ceil(train_frames / per)
        for i in range(count):
            add(objects[i % len(objects)], 'train', 0, min(per, train_frames - i * per))
    else:
        for i in range(settings['train_episodes']):
            add(objects[i % len(objects)], 'train', 0, settings['frames_per_episode'])

    for name in settings['eval_objects']:
        for variant in range(1, settings['eval_sensor_variants'] + 1):
            for _ in range(settings['eval_episodes_per_cell']):
                add(name, 'eval', variant, settings['eval_frames_per_episode'])

    for _ in range(settings['pose_episodes']):
        add(settings['pose_object'], 'pose', 0, settings['pose_frames_per_episode'])
    return tasks


def _episode_config(settings: Dict[str, Any], task: EpisodeTask, profile: SensorProfile) -> EpisodeConfig:
    return EpisodeConfig(
        object_name=task.object_name,
        profile=profile,
        frames=task.frames,
        rate_hz=settings['rate_hz'],
        max_depth_mm=settings['max_depth_mm'],
        min_depth_mm=settings['min_depth_mm'],
        shear_max_px=settings['shear_max_px'],
        falloff=settings['shear_falloff'],
        split=task.split,
        episode_id=task.episode_id,
    )


def write_episode(root: Path, settings: Dict[str, Any], task: EpisodeTask,
                  profile: SensorProfile) -> EpisodeEntry:
    """Render one episode to PNG frames plus a JSON-lines label file"""
    out = episode_dir(root, task.episode_id)
    out.mkdir(parents=True, exist_ok=True)
    config = _episode_config(settings, task, profile)
    with open(out / LABELS_FILE, 'w') as labels:
        for k, frame in enumerate(iter_frames(config, task.seed)):
            write_png(frame_path(root, task.episode_id, k), frame.image.pixels)
            record = frame.scene.to_record()
            record.update({
                'frame': k,
                'timestamp': k / config.rate_hz,
                'empty_contact': bool(frame.image.metadata.get('empty_contact', False)),
                'markers': frame.markers.to_record(),
            })
            labels.write(decimal_json(record) + '\n')
    return EpisodeEntry(id=task.episode_id, frames=task.frames, split=task.split,
                        object_kind=task.object_name, sensor_variant=task.variant, seed=task.seed)


def _write_episode_job(args: Tuple[str, Dict[str, Any], EpisodeTask, SensorProfile]) -> EpisodeEntry:
    root, settings, task, profile = args
    return write_episode(Path(root), settings, task, profile)


def generate_dataset(settings: Dict[str, Any], global_seed: int, root: Path,
                     workers: Optional[int] = None) -> DatasetManifest:
    """Write every planned episode under root, then the config and manifest"""
    root = Path(root)
    try:
        (root / 'episodes').mkdir(parents=True, exist_ok=True)
        (root / 'templates').mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"Cannot write dataset to {root}: {str(e)}", {'path': str(root)})
    if not settings['train_objects']:
        raise DatasetError("Dataset needs at least one trainer object")

    base = base_profile(settings)
    profiles = {0: base}
    profiles.update({p.variant: p for p in sensor_variants(base, settings['eval_sensor_variants'], global_seed)})

    tasks = plan_episodes(settings, global_seed)
    logger.info(f"Generating {len(tasks)} episodes ({sum(t.frames for t in tasks)} frames) into {root}")

    workers = workers or settings.get('workers', 1) or 1
    jobs = [(str(root), settings, task, profiles[task.variant]) for task in tasks]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(tqdm(pool.map(_write_episode_job, jobs), total=len(jobs), desc='episodes'))
    else:
        entries = [_write_episode_job(job) for job in tqdm(jobs, desc='episodes')]

    templates = {}
    for variant, profile in profiles.items():
        path = template_path(root, variant)
        write_png(path, background_template(profile).pixels)
        templates[variant] = path.relative_to(root).as_posix()

    stored_config = {
        'dataset': {k: v for k, v in settings.items() if k != 'workers'},
        'global_seed': global_seed,
        'profiles': {str(v): p.to_record() for v, p in profiles.items()},
    }
    write_decimal_json(root / CONFIG_FILE, stored_config, indent=2, sort_keys=True)

    manifest = DatasetManifest(
        root=str(root),
        episodes=entries,
        config_hash=config_sha256(_stored_config(root)),
        global_seed=global_seed,
        templates=templates,
    )
    write_decimal_json(root / MANIFEST_FILE, manifest.to_record(), indent=2)
    logger.info(f"Dataset written: {len(entries)} episodes, {manifest.total_frames} frames")
    return manifest


def _stored_config(root: Path) -> Dict[str, Any]:
    with open(Path(root) / CONFIG_FILE, 'r') as f:
        return json.load(f)


def load_manifest(root: Path, verify_files: bool = True) -> DatasetManifest:
    """Read a manifest and check it against the stored config and the files on disk"""
    root = Path(root)
    path = root / MANIFEST_FILE
    if not path.exists():
        raise DatasetError(f"No dataset manifest at {path}", {'path': str(path)})
    with open(path, 'r') as f:
        manifest = DatasetManifest.from_record(json.load(f))
    manifest.root = str(root)

    if config_sha256(_stored_config(root)) != manifest.config_hash:
        raise DatasetError(f"Stored config in {root} does not match the manifest hash",
                           {'path': str(root), 'config_hash': manifest.config_hash})
    if verify_files:
        missing = []
        for entry in manifest.episodes:
            if not (episode_dir(root, entry.id) / LABELS_FILE).exists():
                missing.append(entry.id)
                continue
            for k in range(entry.frames):
                if not frame_path(root, entry.id, k).exists():
                    missing.append(f'{entry.id}/frame_{k}')
                    break
        if missing:
            raise DatasetError(f"Dataset {root} is missing files for {len(missing)} episodes",
                               {'missing': missing[:20]})
    return manifest


def load_profiles(root: Path) -> Dict[int, SensorProfile]:
    stored = _stored_config(root)
    profiles = {}
    for key, record in stored['profiles'].items():
        record = dict(record)
        record['light_directions'] = tuple(tuple(d) for d in record['light_directions'])
        record['light_colors'] = tuple(tuple(c) for c in record['light_colors'])
        record['background_tint'] = tuple(record['background_tint'])
        record['marker_offset'] = tuple(record['marker_offset'])
        profiles[int(key)] = SensorProfile(**record)
    return profiles


def load_episode_labels(root: Path, episode_id: str) -> List[Dict[str, Any]]:
    path = episode_dir(root, episode_id) / LABELS_FILE
    if not path.exists():
        raise DatasetError(f"No labels for episode {episode_id}", {'path': str(path)})
    with open(path, 'r') as f:
        return [json.loads(line) for line in f if line.strip()]


def dataset_hash(root: Path) -> str:
    """Content hash of frames, labels, templates and stored config; the manifest is derived data"""
    return tree_sha256(Path(root), exclude=[MANIFEST_FILE])


@dataclass
class FrameRecord:
    episode_id: str
    frame: int
    path: str
    quaternion: Tuple[float, float, float, float]
    shear: Tuple[float, float]
    object_kind: str
    sensor_variant: int
    split: str


class TactileFrameDataset(Dataset):
    """Frames of a generated dataset as (image CHW float32, quaternion, index) samples"""

    def __init__(self, manifest: DatasetManifest, splits: Iterable[str] = ('train',),
                 objects: Optional[Sequence[str]] = None, variants: Optional[Sequence[int]] = None,
                 episode_ids: Optional[Iterable[str]] = None):
        self.manifest = manifest
        self.root = Path(manifest.root)
        self.logger = logging.getLogger("tactile_dataset")
        splits = set(splits)
        wanted = set(episode_ids) if episode_ids is not None else None

        self.records: List[FrameRecord] = []
        for entry in manifest.episodes:
            if entry.split not in splits:
                continue
            if objects is not None and entry.object_kind not in objects:
                continue
            if variants is not None and entry.sensor_variant not in variants:
                continue
            if wanted is not None and entry.id not in wanted:
                continue
            for label in load_episode_labels(self.root, entry.id):
                self.records.append(FrameRecord(
                    episode_id=entry.id,
                    frame=label['frame'],
                    path=str(frame_path(self.root, entry.id, label['frame'])),
                    quaternion=tuple(label['quaternion']),
                    shear=tuple(label['shear']),
                    object_kind=entry.object_kind,
                    sensor_variant=entry.sensor_variant,
                    split=entry.split,
                ))
        self.logger.debug(f"Indexed {len(self.records)} frames for splits {sorted(splits)}")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int):
        record = self.records[index]
        image = torch.from_numpy(read_png(Path(record.path))).permute(2, 0, 1).contiguous()
        quaternion = torch.tensor(record.quaternion, dtype=torch.float32)
        return image, quaternion, index

    def episode_ids(self) -> List[str]:
        return sorted({r.episode_id for r in self.records})

    def labels(self, index: int) -> Dict[str, Any]:
        return asdict(self.records[index])
