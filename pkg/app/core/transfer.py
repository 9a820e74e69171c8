import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from app.models.models import TRANSFER_MODES, AutoencoderConfig, HeadConfig
from app.networks.autoencoder import TactileAutoencoder, load_autoencoder
from app.networks.heads import DecoderHead
from app.utils.artifacts import (expect_kind, file_sha256, read_checkpoint,
                                 write_checkpoint)
from app.utils.exceptions import ArtifactMismatchError, ConfigError

logger = logging.getLogger("transfer")

FROZEN_MODES = ('frozen', 'frozen_random')


def head_config_for(ae_config: AutoencoderConfig, settings: Dict[str, Any]) -> HeadConfig:
    """Head config sized to the encoder's latent grid from the 'head' config section"""
    c, h, w = ae_config.latent_shape
    return HeadConfig(
        latent_channels=c,
        latent_height=h,
        latent_width=w,
        channels=tuple(settings.get('channels') or ()),
        groups=settings.get('groups', 8),
        se_reduction=settings.get('se_reduction', 8),
        output_dim=settings.get('output_dim', 4),
    )


def parameter_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode('utf-8'))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class PerceptionModel(nn.Module):
    """Encoder (frozen or trainable) feeding a downstream decoder head"""

    def __init__(self, autoencoder: TactileAutoencoder, head: DecoderHead, mode: str, encoder_hash: str):
        super().__init__()
        if mode not in TRANSFER_MODES:
            raise ConfigError(f"Unknown transfer mode: {mode}", ['mode'])
        self.ae_config = autoencoder.config
        self.encoder = autoencoder.encoder
        self.quantizer = autoencoder.quantizer
        self.head = head
        self.mode = mode
        self.encoder_hash = encoder_hash
        if self.frozen:
            self.encoder.requires_grad_(False)
            self.quantizer.requires_grad_(False)

    @property
    def frozen(self) -> bool:
        return self.mode in FROZEN_MODES

    @property
    def embedding_dim(self) -> int:
        return self.head.config.embedding_dim

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen:
            self.encoder.eval()
            self.quantizer.eval()
        return self

    def latent(self, x: torch.Tensor) -> torch.Tensor:
        expected = (3, self.ae_config.input_height, self.ae_config.input_width)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ConfigError(f"Image batch {tuple(x.shape)} does not match encoder input (B, {expected})", ['input'])
        z = self.encoder(x)
        if self.ae_config.downstream_latent == 'post_quant' and self.ae_config.vq_enabled:
            z = self.quantizer(z).z_q
        return z

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.latent(x))

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.head.embed(self.latent(x))

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]


def attach(checkpoint: Path, head: Union[HeadConfig, Dict[str, Any]], mode: str = 'frozen', seed: int = 0,
           device: str = 'cpu') -> PerceptionModel:
    """Build a perception model on top of an autoencoder checkpoint in the given transfer mode"""
    if mode not in TRANSFER_MODES:
        raise ConfigError(f"Unknown transfer mode: {mode}", ['mode'])
    autoencoder, header = load_autoencoder(checkpoint)
    encoder_hash = file_sha256(Path(checkpoint))

    head_config = head if isinstance(head, HeadConfig) else head_config_for(autoencoder.config, head)
    if (head_config.latent_channels, head_config.latent_height, head_config.latent_width) != autoencoder.config.latent_shape:
        raise ConfigError("Head latent shape does not match the encoder", ['head'])

    torch.manual_seed(seed)
    if mode in ('scratch', 'frozen_random'):
        autoencoder = TactileAutoencoder(autoencoder.config)
    head = DecoderHead(head_config)
    model = PerceptionModel(autoencoder, head, mode, encoder_hash).to(device)
    logger.info(f"Attached {mode} head ({head_config.channels}) to {header['tag']} encoder {encoder_hash[:12]}")
    return model


def save_perception_model(path: Path, model: PerceptionModel, extra: Optional[Dict[str, Any]] = None) -> str:
    header = {
        'kind': 'perception',
        'mode': model.mode,
        'encoder_hash': model.encoder_hash,
        'autoencoder_config': model.ae_config.to_record(),
        'head_config': model.head.config.to_record(),
        'embedding_dim': model.embedding_dim,
        'downstream_latent': model.ae_config.downstream_latent,
    }
    header.update(extra or {})
    tensors = {'head': model.head.state_dict()}
    if model.mode != 'frozen':
        # finetuned and randomly initialised encoders cannot be recovered from the source checkpoint
        tensors['encoder'] = model.encoder.state_dict()
        tensors['quantizer'] = model.quantizer.state_dict()
    return write_checkpoint(path, header, tensors)


def load_perception_model(path: Path, encoder_checkpoint: Path, device: str = 'cpu') -> Tuple[PerceptionModel, Dict[str, Any]]:
    """Rebuild a perception model; the encoder checkpoint must be the one it was trained against"""
    header, tensors = read_checkpoint(path)
    expect_kind(header, 'perception', Path(path))
    actual = file_sha256(Path(encoder_checkpoint))
    if actual != header['encoder_hash']:
        raise ArtifactMismatchError(
            f"Encoder checkpoint {encoder_checkpoint} does not match the hash recorded in {path}",
            {'expected': header['encoder_hash'], 'actual': actual},
        )
    autoencoder, _ = load_autoencoder(encoder_checkpoint)
    if 'encoder' in tensors:
        autoencoder.encoder.load_state_dict(tensors['encoder'])
        autoencoder.quantizer.load_state_dict(tensors['quantizer'])
    head_record = dict(header['head_config'])
    head_record['channels'] = tuple(head_record['channels'])
    head = DecoderHead(HeadConfig(**head_record))
    head.load_state_dict(tensors['head'])
    model = PerceptionModel(autoencoder, head, header['mode'], header['encoder_hash']).to(device)
    model.eval()
    return model, header


@torch.no_grad()
def embed(images: Iterable[np.ndarray], model: PerceptionModel, batch_size: int = 32,
          device: str = 'cpu') -> np.ndarray:
    """(H, W, 3) images in [0, 1] -> (N, D) embeddings, order preserved"""
    model.eval()
    rows = []
    batch = []
    for image in images:
        batch.append(torch.from_numpy(np.asarray(image, dtype=np.float32)).permute(2, 0, 1))
        if len(batch) == batch_size:
            rows.append(model.embed(torch.stack(batch).to(device)).cpu().numpy())
            batch = []
    if batch:
        rows.append(model.embed(torch.stack(batch).to(device)).cpu().numpy())
    if not rows:
        return np.zeros((0, model.embedding_dim), dtype=np.float32)
    return np.concatenate(rows, axis=0)
