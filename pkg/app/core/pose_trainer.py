import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
import torch
from sklearn.model_selection import train_test_split
from torch.utils.data import DataLoader, TensorDataset

from app.core.losses import quat_angle_errors, quat_angle_loss
from app.core.transfer import PerceptionModel, parameter_checksum
from app.models.models import DatasetManifest, SplitSpec
from app.simulation.dataset_store import TactileFrameDataset
from app.utils.exceptions import (ContractViolation, DatasetError, LeakageError,
                                  SplitError)

logger = logging.getLogger("pose_trainer")


def split_episodes(episode_ids: Sequence[str], spec: SplitSpec = SplitSpec()) -> Tuple[List[str], List[str]]:
    """Seeded episode-level partition; frames of one episode never straddle the split"""
    ids = sorted(set(episode_ids))
    n = len(ids)
    if n < 2:
        raise SplitError(f"Need at least 2 episodes to split, got {n}", {'episodes': n})
    n_train = min(max(int(math.floor(spec.ratio * n)), 1), n - 1)
    train, test = train_test_split(ids, train_size=n_train, random_state=spec.seed, shuffle=True)
    return list(train), list(test)


def check_leakage(train_ids: Sequence[str], test_ids: Sequence[str]) -> None:
    shared = sorted(set(train_ids) & set(test_ids))
    if shared:
        raise LeakageError(f"{len(shared)} episodes appear in both train and test splits", {'episodes': shared})


@dataclass
class PoseEvaluation:
    mae: float
    frames: int
    per_episode: Dict[str, float] = field(default_factory=dict)

    def to_record(self) -> Dict[str, Any]:
        return {'mae': self.mae, 'frames': self.frames, 'per_episode': self.per_episode}


@dataclass
class PoseTrainingResult:
    history: List[Dict[str, float]]
    train: PoseEvaluation
    test: PoseEvaluation
    encoder_checksum: str


class PoseTrainer:
    def __init__(self, model: PerceptionModel, settings: Dict[str, Any], device: str = 'cpu'):
        self.model = model.to(device)
        self.settings = settings
        self.device = torch.device(device)
        self.logger = logging.getLogger("pose_trainer")
        if model.head.config.output_dim != 4:
            raise ContractViolation("Pose regression needs a 4-dimensional head output")

    @torch.no_grad()
    def _cache_latents(self, dataset: TactileFrameDataset) -> TensorDataset:
        latents, labels, indices = [], [], []
        loader = DataLoader(dataset, batch_size=self.settings['batch_size'], shuffle=False)
        for images, quats, idx in loader:
            latents.append(self.model.latent(images.to(self.device)).cpu())
            labels.append(quats)
            indices.append(idx)
        return TensorDataset(torch.cat(latents), torch.cat(labels), torch.cat(indices))

    def train(self, train_set: TactileFrameDataset, test_set: TactileFrameDataset) -> PoseTrainingResult:
        """Minimise the quaternion angle loss on the train split; the test split is only scored"""
        if len(train_set) == 0 or len(test_set) == 0:
            raise DatasetError("Pose train and test splits must both be non-empty",
                               {'train': len(train_set), 'test': len(test_set)})
        check_leakage(train_set.episode_ids(), test_set.episode_ids())

        seed = self.settings['seed']
        eps = self.settings['train_clamp_eps']
        cache = self.model.frozen and self.settings.get('cache_frozen_latents', True)
        checksum_before = parameter_checksum(self.model.encoder)

        data = self._cache_latents(train_set) if cache else train_set
        loader = DataLoader(data, batch_size=self.settings['batch_size'], shuffle=True,
                            generator=torch.Generator().manual_seed(seed))
        optimizer = torch.optim.Adam(self.model.trainable_parameters(), lr=self.settings['lr'])

        history = []
        for epoch in range(1, self.settings['epochs'] + 1):
            self.model.train()
            total, count = 0.0, 0
            for inputs, quats, _ in loader:
                inputs, quats = inputs.to(self.device), quats.to(self.device)
                prediction = self.model.head(inputs) if cache else self.model(inputs)
                loss = quat_angle_loss(prediction, quats, eps=eps)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                total += float(loss.item()) * len(quats)
                count += len(quats)
            test_eval = self.evaluate(test_set)
            record = {'epoch': epoch, 'train_loss': total / count, 'test_mae': test_eval.mae}
            history.append(record)
            self.logger.info(f"epoch {epoch}: train loss {record['train_loss']:.4f} rad, test MAE {test_eval.mae:.4f} rad")

        checksum_after = parameter_checksum(self.model.encoder)
        if self.model.frozen and checksum_after != checksum_before:
            raise ContractViolation("Frozen encoder parameters changed during pose training",
                                    {'before': checksum_before, 'after': checksum_after})

        return PoseTrainingResult(
            history=history,
            train=self.evaluate(train_set),
            test=self.evaluate(test_set),
            encoder_checksum=checksum_after,
        )

    @torch.no_grad()
    def evaluate(self, dataset: TactileFrameDataset) -> PoseEvaluation:
        return eval_pose(self.model, dataset, self.settings['batch_size'], self.device)


@torch.no_grad()
def eval_pose(model: PerceptionModel, dataset: TactileFrameDataset, batch_size: int = 64,
              device='cpu') -> PoseEvaluation:
    """Mean absolute rotation error in radians over all frames, plus a per-episode breakdown"""
    model.eval()
    errors = np.zeros(len(dataset))
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    for images, quats, idx in loader:
        prediction = model(images.to(device))
        errors[idx.numpy()] = quat_angle_errors(prediction, quats.to(device)).cpu().numpy()
    per_episode: Dict[str, List[float]] = {}
    for i, record in enumerate(dataset.records):
        per_episode.setdefault(record.episode_id, []).append(errors[i])
    return PoseEvaluation(
        mae=float(errors.mean()) if len(errors) else float('nan'),
        frames=len(errors),
        per_episode={k: float(np.mean(v)) for k, v in sorted(per_episode.items())},
    )


@dataclass
class PoseSplit:
    train_ids: List[str]
    test_ids: List[str]
    train_set: TactileFrameDataset
    test_set: TactileFrameDataset


def pose_split(manifest: DatasetManifest, spec: SplitSpec, split_tag: str = 'pose') -> PoseSplit:
    episode_ids = manifest.episode_ids(split_tag)
    if not episode_ids:
        raise DatasetError(f"Dataset {manifest.root} has no '{split_tag}' episodes", {'split': split_tag})
    train_ids, test_ids = split_episodes(episode_ids, spec)
    check_leakage(train_ids, test_ids)
    return PoseSplit(
        train_ids=train_ids,
        test_ids=test_ids,
        train_set=TactileFrameDataset(manifest, splits=(split_tag,), episode_ids=train_ids),
        test_set=TactileFrameDataset(manifest, splits=(split_tag,), episode_ids=test_ids),
    )


def train_pose(model: PerceptionModel, manifest: DatasetManifest, spec: SplitSpec, settings: Dict[str, Any],
               device: str = 'cpu') -> Tuple[PoseTrainingResult, PoseSplit]:
    """Episode-level split of the pose section, then head (and, if trainable, encoder) training"""
    split = pose_split(manifest, spec)
    logger.info(f"Pose split: {len(split.train_ids)} train / {len(split.test_ids)} test episodes "
                f"({len(split.train_set)} / {len(split.test_set)} frames)")
    result = PoseTrainer(model, settings, device).train(split.train_set, split.test_set)
    return result, split
