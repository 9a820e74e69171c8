import copy
import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd

from app.analysis.reconstruction_analyzer import ReconstructionAnalyzer
from app.core.autoencoder_trainer import AutoencoderTrainer
from app.core.pose_trainer import train_pose
from app.core.transfer import attach, save_perception_model
from app.models.models import AutoencoderConfig, DatasetManifest, SplitSpec
from app.networks.autoencoder import load_autoencoder
from app.utils.artifacts import write_decimal_json

# method -> (table label, autoencoder flavour, transfer mode)
METHODS = {
    'unit': ('UniT', 'vq', 'frozen'),
    'unit_no_vq': ('UniT w/o VQ', 'no_vq', 'frozen'),
    'scratch': ('Scratch', 'vq', 'scratch'),
    'frozen_random': ('Frozen random', 'vq', 'frozen_random'),
}


def representation_dimension(ae_config: AutoencoderConfig) -> str:
    _, h, w = ae_config.latent_shape
    return f'{h} × {w}'


def classify_error(e: Exception) -> Tuple[str, str]:
    first_line = str(e).split('\n')[0][:120]
    return type(e).__name__, first_line


class BenchmarkRunner:
    """Method x representation dimension x seed matrix over one generated dataset"""

    def __init__(self, cfg: Dict[str, Any], manifest: DatasetManifest, dataset_hash: str, out_dir: Path,
                 device: str = 'cpu'):
        self.cfg = cfg
        self.manifest = manifest
        self.dataset_hash = dataset_hash
        self.out_dir = Path(out_dir)
        self.device = device
        self.bench = cfg['bench']
        self.logger = logging.getLogger("benchmark")

    def _ae_config(self, factor: int, vq: bool, seed: int) -> AutoencoderConfig:
        base = AutoencoderConfig.from_settings(self.cfg['autoencoder'], self.cfg['dataset'])
        return replace(base, downsample_factor=factor, vq_enabled=vq, seed=seed)

    def _train_autoencoders(self) -> Dict[Tuple[str, int, str, int], Dict[str, Any]]:
        flavours = sorted({METHODS[m][1] for m in self.bench['methods']})
        results = {}
        for trainer in self.bench['trainer_objects']:
            for factor in self.bench['downsample_factors']:
                for flavour in flavours:
                    for seed in self.bench['seeds']:
                        key = (trainer, factor, flavour, seed)
                        results[key] = self._train_autoencoder(trainer, factor, flavour, seed)
        return results

    def _train_autoencoder(self, trainer: str, factor: int, flavour: str, seed: int) -> Dict[str, Any]:
        config = self._ae_config(factor, flavour == 'vq', seed)
        entry = {
            'trainer_object': trainer,
            'representation_dimension': representation_dimension(config),
            'tag': config.tag,
            'seed': seed,
            'status': 'ok',
        }
        out = self.out_dir / 'autoencoders' / f'{trainer}_f{factor}_{flavour}_seed{seed}'
        try:
            result = AutoencoderTrainer(config, out, self.device).train(self.manifest, objects=[trainer])
            model, _ = load_autoencoder(result.checkpoint)
            analyzer = ReconstructionAnalyzer(model, self.manifest, self.device, self.cfg['markers'])
            recon = analyzer.evaluate(splits=('eval',), track_markers=False)
            entry.update({
                'checkpoint': str(result.checkpoint),
                'checkpoint_hash': result.checkpoint_hash,
                'final_loss': result.final_loss,
                'psnr': recon.get('mean_psnr'),
                'baseline_psnr': recon.get('mean_baseline_psnr'),
            })
        except Exception as e:
            error_type, message = classify_error(e)
            self.logger.error(f"Error training autoencoder {trainer}/f{factor}/{flavour}/seed{seed}: {str(e)}")
            entry.update({'status': f'failed: {error_type}: {message}'})
        return entry

    def _pose_cell(self, method: str, trainer: str, factor: int, seed: int,
                   autoencoder: Dict[str, Any]) -> Dict[str, Any]:
        label, _, mode = METHODS[method]
        cell = {
            'trainer_object': trainer,
            'method': method,
            'label': label,
            'representation_dimension': autoencoder['representation_dimension'],
            'seed': seed,
            'encoder_hash': autoencoder.get('checkpoint_hash'),
            'status': 'ok',
        }
        if autoencoder['status'] != 'ok':
            cell['status'] = 'failed: upstream autoencoder failed'
            return cell
        try:
            pose = copy.deepcopy(self.cfg['pose'])
            pose['seed'] = seed
            model = attach(Path(autoencoder['checkpoint']), self.cfg['head'], mode=mode, seed=seed, device=self.device)
            spec = SplitSpec(ratio=pose['train_ratio'], seed=pose['split_seed'])
            result, _ = train_pose(model, self.manifest, spec, pose, self.device)
            path = self.out_dir / 'pose' / f'{trainer}_f{factor}_{method}_seed{seed}.ckpt'
            model_hash = save_perception_model(path, model, {'seed': seed, 'method': method})
            cell.update({
                'train_mae': result.train.mae,
                'test_mae': result.test.mae,
                'model_hash': model_hash,
            })
        except Exception as e:
            error_type, message = classify_error(e)
            self.logger.error(f"Error in pose cell {method}/{trainer}/f{factor}/seed{seed}: {str(e)}")
            cell['status'] = f'failed: {error_type}: {message}'
        return cell

    def run(self) -> Dict[str, Any]:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        autoencoders = self._train_autoencoders()
        cells: List[Dict[str, Any]] = []
        for trainer in self.bench['trainer_objects']:
            for factor in self.bench['downsample_factors']:
                for method in self.bench['methods']:
                    for seed in self.bench['seeds']:
                        flavour = METHODS[method][1]
                        cells.append(self._pose_cell(method, trainer, factor, seed,
                                                     autoencoders[(trainer, factor, flavour, seed)]))

        report = {
            'dataset_hash': self.dataset_hash,
            'autoencoders': list(autoencoders.values()),
            'cells': cells,
            'checks': self.acceptance_checks(cells),
        }
        report['table'] = self.format_table(cells, report['autoencoders'])
        write_decimal_json(self.out_dir / 'report.json', report, indent=2)
        with open(self.out_dir / 'report.txt', 'w') as f:
            f.write(report['table'] + '\n')
        failed = sum(1 for c in cells if c['status'] != 'ok')
        self.logger.info(f"Benchmark finished: {len(cells)} pose cells, {failed} failed")
        return report

    @staticmethod
    def format_table(cells: List[Dict[str, Any]], autoencoders: Optional[List[Dict[str, Any]]] = None) -> str:
        """Seed-mean test MAE (rad) with methods as rows and representation dimensions as columns

        Autoencoder reconstruction PSNR on the eval split follows as a second block when given.
        """
        frame = pd.DataFrame([c for c in cells if c['status'] == 'ok'])
        if frame.empty:
            return 'no successful cells'
        table = frame.pivot_table(index=['trainer_object', 'label'], columns='representation_dimension',
                                  values='test_mae', aggfunc='mean')
        table.columns.name = 'Representation Dimension'
        text = table.to_string(float_format=lambda v: f'{v:.4f}')

        scored = pd.DataFrame([a for a in autoencoders or []
                               if a['status'] == 'ok' and a.get('psnr') is not None])
        if not scored.empty:
            psnr = scored.pivot_table(index=['trainer_object', 'tag'], columns='representation_dimension',
                                      values='psnr', aggfunc='mean')
            psnr.columns.name = 'Reconstruction PSNR (dB)'
            text += '\n\n' + psnr.to_string(float_format=lambda v: f'{v:.2f}')
        return text

    def acceptance_checks(self, cells: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
        frame = pd.DataFrame([c for c in cells if c['status'] == 'ok'])
        checks = []
        if frame.empty:
            return checks
        means = frame.groupby(['trainer_object', 'representation_dimension', 'method'])['test_mae'].mean()
        for (trainer, dim), group in means.groupby(level=[0, 1]):
            by_method = {k[2]: float(v) for k, v in group.items()}
            if 'unit' in by_method and 'frozen_random' in by_method:
                limit = self.bench['frozen_gain_ratio'] * by_method['frozen_random']
                checks.append({
                    'check': 'frozen_transfer_utility',
                    'trainer_object': trainer,
                    'representation_dimension': dim,
                    'unit_mae': by_method['unit'],
                    'reference_mae': by_method['frozen_random'],
                    'passed': bool(by_method['unit'] <= limit),
                    'severity': 'error',
                })
            if 'unit' in by_method and 'unit_no_vq' in by_method:
                limit = self.bench['vq_trend_ratio'] * by_method['unit_no_vq']
                passed = bool(by_method['unit'] <= limit)
                if not passed:
                    self.logger.warning(f"VQ ablation trend not reproduced for {trainer} {dim}: "
                                        f"UniT {by_method['unit']:.4f} vs w/o VQ {by_method['unit_no_vq']:.4f}")
                checks.append({
                    'check': 'vq_ablation_trend',
                    'trainer_object': trainer,
                    'representation_dimension': dim,
                    'unit_mae': by_method['unit'],
                    'reference_mae': by_method['unit_no_vq'],
                    'passed': passed,
                    'severity': 'warning',
                })
        return checks


def count_cells(bench: Dict[str, Any]) -> int:
    return (len(bench['methods']) * len(bench['downsample_factors']) * len(bench['seeds'])
            * len(bench['trainer_objects']))
