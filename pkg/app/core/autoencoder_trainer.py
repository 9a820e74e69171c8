import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from app.core.losses import discriminator_loss, generator_loss
from app.models.models import AutoencoderConfig, DatasetManifest
from app.networks.autoencoder import (PatchDiscriminator, TactileAutoencoder,
                                      save_autoencoder)
from app.simulation.dataset_store import TactileFrameDataset
from app.utils.artifacts import decimal_json, write_decimal_json
from app.utils.exceptions import DatasetError, TrainingDivergedError


@dataclass
class TrainingResult:
    checkpoint: Path
    checkpoint_hash: str
    steps: int
    history: List[Dict[str, Any]] = field(default_factory=list)
    metrics_file: Optional[Path] = None

    @property
    def final_loss(self) -> Optional[float]:
        return self.history[-1]['total'] if self.history else None


class AutoencoderTrainer:
    def __init__(self, config: AutoencoderConfig, out_dir: Path, device: str = 'cpu'):
        self.config = config
        self.out_dir = Path(out_dir)
        self.device = torch.device(device)
        self.logger = logging.getLogger("autoencoder_trainer")

    def _loader(self, dataset: TactileFrameDataset) -> DataLoader:
        generator = torch.Generator().manual_seed(self.config.seed)
        return DataLoader(
            dataset,
            batch_size=self.config.batch_size,
            shuffle=True,
            drop_last=len(dataset) >= self.config.batch_size,
            num_workers=self.config.num_workers,
            generator=generator,
        )

    def _dump_diagnostics(self, step: int, components: Dict[str, float], batch: torch.Tensor) -> Path:
        path = self.out_dir / f'diverged_step_{step}.json'
        write_decimal_json(path, {
            'step': step,
            'components': components,
            'batch_min': float(batch.min().item()),
            'batch_max': float(batch.max().item()),
            'config': self.config.to_record(),
        }, indent=2)
        return path

    def train(self, manifest: DatasetManifest, objects: Optional[Sequence[str]] = None) -> TrainingResult:
        """Alternating generator / discriminator updates over the trainer split"""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        dataset = TactileFrameDataset(manifest, splits=('train',), objects=objects)
        if len(dataset) == 0:
            raise DatasetError("Training set is empty", {'root': manifest.root, 'objects': list(objects or [])})
        kinds = sorted({r.object_kind for r in dataset.records})
        if len(kinds) > 1:
            self.logger.warning(f"Training set mixes objects {kinds}; single-object training is the intended protocol")

        torch.manual_seed(self.config.seed)
        model = TactileAutoencoder(self.config).to(self.device)
        discriminator = PatchDiscriminator(self.config.disc_base_channels, self.config.disc_layers).to(self.device)
        opt_g = torch.optim.Adam(model.parameters(), lr=self.config.lr_generator, betas=(0.5, 0.9))
        opt_d = torch.optim.Adam(discriminator.parameters(), lr=self.config.lr_discriminator, betas=(0.5, 0.9))

        metrics_file = self.out_dir / 'metrics.jsonl'
        history: List[Dict[str, Any]] = []
        loader = self._loader(dataset)
        self.logger.info(f"Training {self.config.tag} (f={self.config.downsample_factor}) on {len(dataset)} frames "
                         f"of {kinds} for {self.config.total_steps} steps")

        step = 0
        progress = tqdm(total=self.config.total_steps, desc=self.config.tag)
        with open(metrics_file, 'w') as metrics_out:
            while step < self.config.total_steps:
                for images, _, _ in loader:
                    if step >= self.config.total_steps:
                        break
                    x = images.to(self.device)
                    model.train()
                    output = model(x)
                    disc_active = step >= self.config.disc_start_step and self.config.adversarial_weight > 0
                    fake_logits = discriminator(output.reconstruction) if disc_active else None
                    total, components = generator_loss(x, output.reconstruction, output.quantized,
                                                       fake_logits, self.config, step)
                    values = {name: float(v.item()) for name, v in components.items()}
                    if not torch.isfinite(total):
                        path = self._dump_diagnostics(step, values, x)
                        raise TrainingDivergedError(f"Non-finite generator loss at step {step}",
                                                    {'step': step, 'diagnostics': str(path)})

                    opt_g.zero_grad(set_to_none=True)
                    total.backward()
                    opt_g.step()

                    d_loss = None
                    if disc_active:
                        opt_d.zero_grad(set_to_none=True)
                        d_loss = discriminator_loss(discriminator(x), discriminator(output.reconstruction.detach()))
                        d_loss.backward()
                        opt_d.step()

                    reseeded = 0
                    if output.quantized is not None:
                        reseeded = model.quantizer.reseed_dead_codes(output.latent)

                    step += 1
                    progress.update(1)
                    if step % self.config.log_every == 0 or step == self.config.total_steps:
                        record = {
                            'step': step,
                            'total': float(total.item()),
                            **values,
                            'discriminator': float(d_loss.item()) if d_loss is not None else None,
                            'perplexity': float(output.quantized.perplexity.item()) if output.quantized is not None else None,
                            'active_codes': model.quantizer.active_codes() if output.quantized is not None else None,
                            'reseeded_codes': reseeded,
                        }
                        history.append(record)
                        metrics_out.write(decimal_json(record) + '\n')
                        metrics_out.flush()
                        progress.set_postfix(loss=f"{record['total']:.4f}")
                        self.logger.debug(f"step {step}: {record}")
                    if step % self.config.checkpoint_every == 0 and step < self.config.total_steps:
                        save_autoencoder(self.out_dir / 'checkpoints' / f'step_{step}.ckpt', model, discriminator,
                                         step, history)
        progress.close()

        model.eval()
        checkpoint = self.out_dir / 'autoencoder.ckpt'
        checkpoint_hash = save_autoencoder(checkpoint, model, discriminator, step, history)
        self.logger.info(f"Saved {self.config.tag} checkpoint {checkpoint} ({checkpoint_hash[:12]})")
        return TrainingResult(checkpoint, checkpoint_hash, step, history, metrics_file)
