import logging
from typing import List

import torch
import torch.nn as nn

from app.models.models import HeadConfig
from app.utils.exceptions import ContractViolation

logger = logging.getLogger("heads")


class SEBlock(nn.Module):
    """Squeeze-and-excitation channel gate"""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        self.avg_pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Sequential(
            nn.Linear(channels, channels // reduction),
            nn.ReLU(inplace=True),
            nn.Linear(channels // reduction, channels),
            nn.Sigmoid(),
        )

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        b, c = x.shape[:2]
        return self.fc(self.avg_pool(x).view(b, c)).view(b, c, 1, 1)

    def forward(self, x):
        return x * self.gates(x)


class HeadBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, groups: int, reduction: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=1, padding=1)
        self.norm = nn.GroupNorm(groups, out_channels)
        self.act = nn.ReLU(inplace=True)
        self.se = SEBlock(out_channels, reduction)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        return self.pool(self.se(self.act(self.norm(self.conv(x)))))


class DecoderHead(nn.Module):
    """Conv/GroupNorm/SE/MaxPool blocks over a latent grid, then flatten and an affine map"""

    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        blocks: List[nn.Module] = []
        ch = config.latent_channels
        for width in config.channels:
            blocks.append(HeadBlock(ch, width, config.groups, config.se_reduction))
            ch = width
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(config.embedding_dim, config.output_dim)

    def embed(self, z: torch.Tensor) -> torch.Tensor:
        expected = (self.config.latent_channels, self.config.latent_height, self.config.latent_width)
        if z.dim() != 4 or tuple(z.shape[1:]) != expected:
            raise ContractViolation(f"Head expects latents of shape (B, {expected}), got {tuple(z.shape)}")
        return torch.flatten(self.blocks(z), start_dim=1)

    def forward(self, z):
        return self.fc(self.embed(z))
