import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.models.models import AutoencoderConfig
from app.utils.artifacts import expect_kind, read_checkpoint, write_checkpoint
from app.utils.exceptions import ContractViolation

logger = logging.getLogger("autoencoder")


def normalize(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(num_groups=math.gcd(32, channels), num_channels=channels, eps=1e-6, affine=True)


def swish(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=3, stride=2, padding=0)

    def forward(self, x):
        x = F.pad(x, (0, 1, 0, 1), mode='constant', value=0)
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=3, stride=1, padding=1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2.0, mode='nearest')
        return self.conv(x)


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: Optional[int] = None):
        super().__init__()
        out_channels = out_channels or in_channels
        self.norm1 = normalize(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=1, padding=1)
        self.norm2 = normalize(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=3, stride=1, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, kernel_size=1) if in_channels != out_channels else None

    def forward(self, x_in):
        x = self.conv1(swish(self.norm1(x_in)))
        x = self.conv2(swish(self.norm2(x)))
        if self.skip is not None:
            x_in = self.skip(x_in)
        return x + x_in


def stage_channels(config: AutoencoderConfig) -> List[int]:
    """Channel width of each resolution stage, doubling from the base width up to the cap"""
    stages = int(math.log2(config.downsample_factor))
    return [min(config.base_channels * 2 ** i, config.max_channels) for i in range(stages)]


class Encoder(nn.Module):
    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        widths = stage_channels(config)
        blocks: List[nn.Module] = [nn.Conv2d(3, config.base_channels, kernel_size=3, stride=1, padding=1)]
        ch = config.base_channels
        for width in widths:
            blocks.append(ResBlock(ch, width))
            blocks.append(Downsample(width))
            ch = width
        blocks.append(ResBlock(ch, ch))
        self.blocks = nn.Sequential(*blocks)
        self.norm_out = normalize(ch)
        self.conv_out = nn.Conv2d(ch, config.latent_channels, kernel_size=3, stride=1, padding=1)

    def forward(self, x):
        return self.conv_out(swish(self.norm_out(self.blocks(x))))


class Decoder(nn.Module):
    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        widths = stage_channels(config)
        ch = widths[-1]
        blocks: List[nn.Module] = [
            nn.Conv2d(config.latent_channels, ch, kernel_size=3, stride=1, padding=1),
            ResBlock(ch, ch),
        ]
        for width in reversed(widths):
            blocks.append(ResBlock(ch, width))
            blocks.append(Upsample(width))
            ch = width
        self.blocks = nn.Sequential(*blocks)
        self.norm_out = normalize(ch)
        self.conv_out = nn.Conv2d(ch, 3, kernel_size=3, stride=1, padding=1)

    def forward(self, z):
        return torch.sigmoid(self.conv_out(swish(self.norm_out(self.blocks(z)))))


class StraightThrough(torch.autograd.Function):
    """Forward returns the quantized tensor unchanged; backward hands the gradient to the encoder output"""

    @staticmethod
    def forward(ctx, z, z_q):
        return z_q.clone()

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


@dataclass
class QuantizeOutput:
    indices: torch.Tensor  # (B, h, w) long
    z_q: torch.Tensor  # (B, c, h, w), straight-through towards z
    codebook_loss: torch.Tensor
    commitment_loss: torch.Tensor
    perplexity: torch.Tensor


def codebook_perplexity(indices: torch.Tensor, codebook_size: int) -> torch.Tensor:
    """exp of the entropy of code usage within a batch"""
    counts = torch.bincount(indices.reshape(-1), minlength=codebook_size).double()
    probs = counts / counts.sum().clamp(min=1.0)
    nonzero = probs[probs > 0]
    return torch.exp(-(nonzero * nonzero.log()).sum())


class VectorQuantizer(nn.Module):
    def __init__(self, codebook_size: int, embedding_dim: int, dead_code_steps: int = 2000):
        super().__init__()
        self.codebook_size = codebook_size
        self.embedding_dim = embedding_dim
        self.dead_code_steps = dead_code_steps
        self.embedding = nn.Embedding(codebook_size, embedding_dim)
        self.embedding.weight.data.uniform_(-1.0 / codebook_size, 1.0 / codebook_size)
        self.register_buffer('usage_counts', torch.zeros(codebook_size, dtype=torch.long))
        self.register_buffer('last_used', torch.zeros(codebook_size, dtype=torch.long))
        self.register_buffer('steps', torch.zeros((), dtype=torch.long))

    def nearest(self, flat: torch.Tensor) -> torch.Tensor:
        # exact squared distances; argmin keeps the lowest index on ties
        distances = ((flat[:, None, :] - self.embedding.weight[None, :, :]) ** 2).sum(dim=-1)
        return torch.argmin(distances, dim=1)

    def forward(self, z: torch.Tensor) -> QuantizeOutput:
        if z.dim() != 4 or z.shape[1] != self.embedding_dim:
            raise ContractViolation(f"Latent of shape {tuple(z.shape)} does not match codebook dim {self.embedding_dim}")
        b, c, h, w = z.shape
        flat = z.permute(0, 2, 3, 1).reshape(-1, c)
        indices = self.nearest(flat.detach())
        z_q = self.embedding(indices).view(b, h, w, c).permute(0, 3, 1, 2)

        codebook_loss = ((z.detach() - z_q) ** 2).sum(dim=1).mean()
        commitment_loss = ((z - z_q.detach()) ** 2).sum(dim=1).mean()

        if self.training:
            with torch.no_grad():
                used = torch.bincount(indices, minlength=self.codebook_size)
                self.usage_counts += used
                self.steps += 1
                self.last_used[used > 0] = self.steps.item()

        return QuantizeOutput(
            indices=indices.view(b, h, w),
            z_q=StraightThrough.apply(z, z_q.detach()),
            codebook_loss=codebook_loss,
            commitment_loss=commitment_loss,
            perplexity=codebook_perplexity(indices, self.codebook_size),
        )

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        return self.embedding(indices).permute(0, 3, 1, 2)

    @torch.no_grad()
    def reseed_dead_codes(self, z: torch.Tensor) -> int:
        """Move codes unused for dead_code_steps steps onto random encoder outputs from the batch"""
        dead = (self.steps - self.last_used) >= self.dead_code_steps
        count = int(dead.sum().item())
        if count == 0:
            return 0
        flat = z.detach().permute(0, 2, 3, 1).reshape(-1, self.embedding_dim)
        picks = torch.randint(0, flat.shape[0], (count,), device=flat.device)
        self.embedding.weight.data[dead] = flat[picks].to(self.embedding.weight.dtype)
        self.last_used[dead] = self.steps.item()
        return count

    def active_codes(self) -> int:
        return int((self.usage_counts > 0).sum().item())


class PatchDiscriminator(nn.Module):
    """Strided conv critic emitting one logit per receptive-field patch"""

    def __init__(self, base_channels: int = 64, n_layers: int = 3):
        super().__init__()
        layers: List[nn.Module] = [nn.Conv2d(3, base_channels, kernel_size=4, stride=2, padding=1),
                                   nn.LeakyReLU(0.2, True)]
        mult = 1
        for n in range(1, n_layers):
            prev, mult = mult, min(2 ** n, 8)
            layers += [
                nn.Conv2d(base_channels * prev, base_channels * mult, kernel_size=4, stride=2, padding=1, bias=False),
                normalize(base_channels * mult),
                nn.LeakyReLU(0.2, True),
            ]
        layers += [
            nn.Conv2d(base_channels * mult, base_channels * mult, kernel_size=3, stride=1, padding=1, bias=False),
            normalize(base_channels * mult),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(base_channels * mult, 1, kernel_size=3, stride=1, padding=1),
        ]
        self.main = nn.Sequential(*layers)

    def forward(self, x):
        return self.main(x)


@dataclass
class AutoencoderOutput:
    reconstruction: torch.Tensor
    latent: torch.Tensor
    quantized: Optional[QuantizeOutput]


class TactileAutoencoder(nn.Module):
    """Encoder -> (vector quantizer) -> decoder; the quantizer lives on the decoder side"""

    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.quantizer = VectorQuantizer(config.codebook_size, config.latent_channels, config.dead_code_steps)
        self.decoder = Decoder(config)

    def _check_image(self, x: torch.Tensor) -> None:
        expected = (3, self.config.input_height, self.config.input_width)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ContractViolation(f"Image batch of shape {tuple(x.shape)} does not match (B, {expected})",
                                    {'expected': list(expected), 'got': list(x.shape)})

    def _check_latent(self, z: torch.Tensor) -> None:
        expected = self.config.latent_shape
        if z.dim() != 4 or tuple(z.shape[1:]) != expected:
            raise ContractViolation(f"Latent of shape {tuple(z.shape)} does not match (B, {expected})",
                                    {'expected': list(expected), 'got': list(z.shape)})

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        return self.encoder(x)

    def quantize(self, z: torch.Tensor) -> QuantizeOutput:
        self._check_latent(z)
        return self.quantizer(z)

    def decode(self, z: torch.Tensor, vq_enabled: Optional[bool] = None) -> torch.Tensor:
        self._check_latent(z)
        if vq_enabled is None:
            vq_enabled = self.config.vq_enabled
        if vq_enabled:
            z = self.quantizer(z).z_q
        return self.decoder(z)

    def forward(self, x: torch.Tensor) -> AutoencoderOutput:
        z = self.encode(x)
        quantized = self.quantizer(z) if self.config.vq_enabled else None
        reconstruction = self.decoder(quantized.z_q if quantized is not None else z)
        return AutoencoderOutput(reconstruction, z, quantized)

    def downstream_latent(self, x: torch.Tensor) -> torch.Tensor:
        z = self.encode(x)
        if self.config.downstream_latent == 'post_quant' and self.config.vq_enabled:
            return self.quantizer(z).z_q
        return z


def save_autoencoder(path: Path, model: TactileAutoencoder, discriminator: Optional[PatchDiscriminator] = None,
                     step: int = 0, history: Optional[List[Dict[str, Any]]] = None) -> str:
    """Write a checkpoint; returns its content hash"""
    header = {
        'kind': 'autoencoder',
        'tag': model.config.tag,
        'config': model.config.to_record(),
        'latent_shape': list(model.config.latent_shape),
        'step': step,
        'metrics_tail': (history or [])[-20:],
    }
    tensors = {'model': model.state_dict()}
    if discriminator is not None:
        tensors['discriminator'] = discriminator.state_dict()
    return write_checkpoint(path, header, tensors)


def load_autoencoder(path: Path, map_location: str = 'cpu') -> Tuple[TactileAutoencoder, Dict[str, Any]]:
    header, tensors = read_checkpoint(path, map_location=map_location)
    expect_kind(header, 'autoencoder', Path(path))
    model = TactileAutoencoder(AutoencoderConfig(**header['config']))
    model.load_state_dict(tensors['model'])
    model.eval()
    logger.debug(f"Loaded {header['tag']} autoencoder from {path} (step {header['step']})")
    return model, header
