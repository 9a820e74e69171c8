import logging
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F

from app.models.models import AutoencoderConfig
from app.networks.autoencoder import QuantizeOutput
from app.utils.exceptions import ContractViolation, DegeneratePredictionError

logger = logging.getLogger("losses")

GENERATOR_COMPONENTS = ('reconstruction', 'codebook', 'commitment', 'adversarial')


def l1_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    return torch.mean(torch.abs(x - x_hat))


def hinge_gen_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return -torch.mean(fake_logits)


def discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Hinge loss for the patch discriminator"""
    if real_logits.shape != fake_logits.shape:
        raise ContractViolation(f"Logit maps differ in shape: {tuple(real_logits.shape)} vs {tuple(fake_logits.shape)}")
    return torch.mean(F.relu(1.0 - real_logits)) + torch.mean(F.relu(1.0 + fake_logits))


def adversarial_weight(config: AutoencoderConfig, step: int) -> float:
    return config.adversarial_weight if step >= config.disc_start_step else 0.0


def generator_loss(x: torch.Tensor, x_hat: torch.Tensor, quantized: Optional[QuantizeOutput],
                   fake_logits: Optional[torch.Tensor], config: AutoencoderConfig,
                   step: int) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Total generator objective and its weighted components; the components sum to the total"""
    zero = x_hat.new_zeros(())
    components = {
        'reconstruction': l1_loss(x, x_hat),
        'codebook': quantized.codebook_loss if quantized is not None else zero,
        'commitment': config.commitment_weight * quantized.commitment_loss if quantized is not None else zero,
        'adversarial': zero,
    }
    weight = adversarial_weight(config, step)
    if fake_logits is not None and weight > 0:
        components['adversarial'] = weight * hinge_gen_loss(fake_logits)
    total = sum(components[name] for name in GENERATOR_COMPONENTS)
    return total, components


def quat_angle_errors(q_hat: torch.Tensor, q: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """Per-sample rotation angle 2*arccos(|q_hat . q|) in radians, q_hat normalized first"""
    q_hat = q_hat.reshape(-1, 4)
    q = q.reshape(-1, 4).to(q_hat.dtype)
    norms = torch.linalg.norm(q_hat, dim=1, keepdim=True)
    if bool((norms < 1e-8).any()):
        raise DegeneratePredictionError("Predicted quaternion has near-zero norm",
                                        {'min_norm': float(norms.min().item())})
    q_hat = q_hat / norms
    dot = torch.sum(q_hat * q, dim=1)
    if eps > 0:
        return 2.0 * torch.acos(torch.clamp(torch.abs(dot), 0.0, 1.0 - eps))
    # same angle as 2*arccos(|dot|) without the precision loss near identity
    q = torch.sign(dot).detach()[:, None] * q
    return 4.0 * torch.atan2(torch.linalg.norm(q_hat - q, dim=1), torch.linalg.norm(q_hat + q, dim=1))


def quat_angle_loss(q_hat: torch.Tensor, q: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """Mean geodesic angle; eps > 0 switches to the clamped arccos form used in training"""
    return quat_angle_errors(q_hat, q, eps).mean()
