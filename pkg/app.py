import argparse
import json
import logging
import logging.config
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from app.analysis.marker_tracker import MarkerTracker, reference_markers
from app.analysis.reconstruction_analyzer import ReconstructionAnalyzer
from app.core.autoencoder_trainer import AutoencoderTrainer
from app.core.benchmark import BenchmarkRunner, representation_dimension
from app.core.pose_trainer import eval_pose, pose_split, train_pose
from app.core.transfer import (attach, embed, load_perception_model,
                               save_perception_model)
from app.models.models import TRANSFER_MODES, AutoencoderConfig, RunRecord, SplitSpec
from app.networks.autoencoder import load_autoencoder
from app.simulation.dataset_store import (dataset_hash, generate_dataset,
                                          load_manifest, read_png)
from app.utils.artifacts import (RunRegistry, decimal_json, file_sha256,
                                 write_decimal_json)
from app.utils.exceptions import ConfigError, DatasetError, TactileError
from config import LOG_DIR, LOGGING_CONFIG, REGISTRY_FILE
from config.config import load_config, parse_overrides

logger = logging.getLogger("tactile")

# (inputs, outputs, metrics) recorded in the run registry
CommandResult = Tuple[Dict[str, str], Dict[str, Dict[str, str]], Dict[str, Any]]


def configure_logging() -> None:
    LOG_DIR.mkdir(parents=True, exist_ok=True)
    logging.config.dictConfig(LOGGING_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument('--config', help='YAML run config merged over the defaults')
    common.add_argument('--seed', type=int, help='global seed (also seeds training)')
    common.add_argument('--out', help='output directory (default: under the workspace)')
    common.add_argument('--device', choices=['cpu', 'accelerator'])

    parser = argparse.ArgumentParser(
        description='Synthetic tactile data, representation learning and transfer benchmarks',
        epilog='Any config key can be overridden with a flag of the same dotted name, '
               'e.g. --autoencoder.total_steps 200',
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('generate', parents=[common], allow_abbrev=False, help='write a synthetic dataset')
    p.add_argument('--frames', type=int, help='trainer-only dataset with exactly this many frames')

    p = sub.add_parser('train-repr', parents=[common], allow_abbrev=False, help='train the autoencoder')
    p.add_argument('--dataset', required=True)
    p.add_argument('--object', action='append', dest='objects', help='restrict training to an object kind')

    p = sub.add_parser('recon-eval', parents=[common], allow_abbrev=False, help='reconstruction metrics')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--dataset', required=True)
    p.add_argument('--max-frames', type=int, help='frames per episode to score')
    p.add_argument('--no-markers', action='store_true', help='skip marker-field comparison')

    p = sub.add_parser('train-pose', parents=[common], allow_abbrev=False, help='train the pose head')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--dataset', required=True)
    p.add_argument('--mode', choices=TRANSFER_MODES)

    p = sub.add_parser('eval-pose', parents=[common], allow_abbrev=False, help='score a pose model')
    p.add_argument('--model', required=True)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--dataset', required=True)

    p = sub.add_parser('track-markers', parents=[common], allow_abbrev=False, help='marker displacement fields')
    p.add_argument('--images', required=True, help='directory of PNG frames')
    p.add_argument('--reference', required=True, help='no-contact reference PNG')
    p.add_argument('--overlay', action='store_true', help='also write quiver overlays')

    p = sub.add_parser('export-embed', parents=[common], allow_abbrev=False, help='export head embeddings')
    p.add_argument('--model', required=True)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--images', required=True, help='directory of PNG frames')

    p = sub.add_parser('bench', parents=[common], allow_abbrev=False, help='method x dimension x seed matrix')
    p.add_argument('--dataset', required=True)
    return parser


def collect_overrides(extra: List[str]) -> List[str]:
    """['--a.b', '1', '--c=x'] -> ['a.b=1', 'c=x']"""
    pairs = []
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith('--'):
            raise ConfigError(f"Unexpected argument: {token}", [token])
        key = token[2:]
        if '=' in key:
            pairs.append(key)
        elif i + 1 < len(extra) and not extra[i + 1].startswith('--'):
            pairs.append(f'{key}={extra[i + 1]}')
            i += 1
        else:
            raise ConfigError(f"Override --{key} needs a value", [key])
        i += 1
    return pairs


def resolve_device(requested: str) -> str:
    if requested == 'cpu':
        return 'cpu'
    if torch.cuda.is_available():
        return 'cuda'
    if getattr(torch.backends, 'mps', None) is not None and torch.backends.mps.is_available():
        return 'mps'
    raise ConfigError("An accelerator was requested but none is available", ['device'])


def list_images(directory: str) -> List[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"Image directory not found: {root}", {'path': str(root)})
    images = sorted(root.glob('*.png'))
    if not images:
        raise DatasetError(f"No PNG images in {root}", {'path': str(root)})
    return images


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_decimal_json(path, payload, indent=2)


class CommandRunner:
    """Runs one subcommand and records it in the run registry"""

    def __init__(self, args: argparse.Namespace, cfg: Dict[str, Any]):
        self.args = args
        self.cfg = cfg
        self.device = resolve_device(cfg['device'])
        self.workspace = Path(cfg['workspace'])
        self.registry = RunRegistry(self.workspace, REGISTRY_FILE)
        self.run_id = self.registry.new_run_id()
        self.logger = logging.getLogger("tactile")
        section = 'datasets' if args.command == 'generate' else 'runs'
        default_out = self.workspace / section / f'{args.command}-{self.run_id}'
        self.out_dir = Path(args.out) if args.out else default_out

    def run(self) -> int:
        handlers: Dict[str, Callable[[], CommandResult]] = {
            'generate': self.cmd_generate,
            'train-repr': self.cmd_train_repr,
            'recon-eval': self.cmd_recon_eval,
            'train-pose': self.cmd_train_pose,
            'eval-pose': self.cmd_eval_pose,
            'track-markers': self.cmd_track_markers,
            'export-embed': self.cmd_export_embed,
            'bench': self.cmd_bench,
        }
        record = RunRecord(run_id=self.run_id, command=self.args.command, config=self.cfg,
                           started_at=self.registry.now())
        start = time.monotonic()
        try:
            record.inputs, record.outputs, record.metrics = handlers[self.args.command]()
            record.status = record.metrics.pop('_status', 'ok')
        except Exception as e:
            record.status = 'failed'
            record.metrics = {'error': type(e).__name__, 'message': str(e)}
            raise
        finally:
            record.wall_time_s = time.monotonic() - start
            self.registry.append(record)
        return 0 if record.status == 'ok' else 1

    def _dataset(self) -> Tuple[Path, Any, str]:
        root = self.registry.resolve_artifact(self.args.dataset)
        manifest = load_manifest(root)
        return root, manifest, dataset_hash(root)

    def _emit(self, payload: Dict[str, Any]) -> None:
        print(decimal_json(payload, indent=2))

    def cmd_generate(self) -> CommandResult:
        settings = dict(self.cfg['dataset'])
        if self.args.frames is not None:
            if self.args.frames < 1:
                raise ConfigError("--frames must be positive", ['frames'])
            settings.update({'train_frames': self.args.frames, 'eval_objects': [], 'pose_episodes': 0})
        manifest = generate_dataset(settings, self.cfg['seed'], self.out_dir)
        content_hash = dataset_hash(self.out_dir)
        summary = {
            'run_id': self.run_id,
            'dataset': str(self.out_dir),
            'dataset_hash': content_hash,
            'episodes': len(manifest.episodes),
            'total_frames': manifest.total_frames,
            'splits': {s: len(manifest.episode_ids(s)) for s in ('train', 'eval', 'pose')},
        }
        self._emit(summary)
        return {}, {'dataset': {'path': str(self.out_dir), 'hash': content_hash}}, summary

    def cmd_train_repr(self) -> CommandResult:
        root, manifest, data_hash = self._dataset()
        config = AutoencoderConfig.from_settings(self.cfg['autoencoder'], self.cfg['dataset'])
        result = AutoencoderTrainer(config, self.out_dir, self.device).train(manifest, objects=self.args.objects)
        metrics = {
            'run_id': self.run_id,
            'tag': config.tag,
            'representation_dimension': representation_dimension(config),
            'steps': result.steps,
            'final_loss': result.final_loss,
            'checkpoint_hash': result.checkpoint_hash,
        }
        self._emit(metrics)
        outputs = {'checkpoint': {'path': str(result.checkpoint), 'hash': result.checkpoint_hash}}
        return {'dataset': data_hash}, outputs, metrics

    def cmd_recon_eval(self) -> CommandResult:
        checkpoint = self.registry.resolve_artifact(self.args.checkpoint)
        root, manifest, data_hash = self._dataset()
        model, header = load_autoencoder(checkpoint)
        analyzer = ReconstructionAnalyzer(model, manifest, self.device, self.cfg['markers'])
        summary = analyzer.evaluate(splits=('eval',), grid_dir=self.out_dir / 'grids',
                                    max_frames_per_episode=self.args.max_frames,
                                    track_markers=not self.args.no_markers)
        summary.update({'run_id': self.run_id, 'tag': header['tag']})
        metrics_path = self.out_dir / 'recon_metrics.json'
        write_json(metrics_path, summary)
        with open(self.out_dir / 'recon_table.txt', 'w') as f:
            f.write(summary['table'] + '\n')
        print(summary['table'])
        inputs = {'checkpoint': file_sha256(checkpoint), 'dataset': data_hash}
        outputs = {'metrics': {'path': str(metrics_path), 'hash': file_sha256(metrics_path)}}
        return inputs, outputs, {k: summary.get(k) for k in ('frames', 'mean_psnr', 'mean_baseline_psnr',
                                                               'mean_l1', 'mean_marker_epe')}

    def cmd_train_pose(self) -> CommandResult:
        checkpoint = self.registry.resolve_artifact(self.args.checkpoint)
        root, manifest, data_hash = self._dataset()
        pose = self.cfg['pose']
        mode = self.args.mode or pose['mode']
        model = attach(checkpoint, self.cfg['head'], mode=mode, seed=pose['seed'], device=self.device)
        spec = SplitSpec(ratio=pose['train_ratio'], seed=pose['split_seed'])
        result, split = train_pose(model, manifest, spec, pose, self.device)

        model_path = self.out_dir / 'pose_model.ckpt'
        model_hash = save_perception_model(model_path, model, {
            'seed': pose['seed'],
            'dataset_hash': data_hash,
            'split_ratio': spec.ratio,
            'split_seed': spec.seed,
        })
        metrics = {
            'run_id': self.run_id,
            'mode': mode,
            'encoder_hash': model.encoder_hash,
            'representation_dimension': representation_dimension(model.ae_config),
            'vq_enabled': model.ae_config.vq_enabled,
            'seed': pose['seed'],
            'train_mae': result.train.mae,
            'test_mae': result.test.mae,
            'train_episodes': split.train_ids,
            'test_episodes': split.test_ids,
            'per_episode_mae': result.test.per_episode,
            'history': result.history,
        }
        metrics_path = self.out_dir / 'pose_metrics.json'
        write_json(metrics_path, metrics)
        self._emit({k: v for k, v in metrics.items() if k != 'history'})
        inputs = {'checkpoint': model.encoder_hash, 'dataset': data_hash}
        outputs = {
            'model': {'path': str(model_path), 'hash': model_hash},
            'metrics': {'path': str(metrics_path), 'hash': file_sha256(metrics_path)},
        }
        return inputs, outputs, {'train_mae': result.train.mae, 'test_mae': result.test.mae}

    def cmd_eval_pose(self) -> CommandResult:
        model_path = self.registry.resolve_artifact(self.args.model)
        checkpoint = self.registry.resolve_artifact(self.args.checkpoint)
        root, manifest, data_hash = self._dataset()
        model, header = load_perception_model(model_path, checkpoint, self.device)
        if header.get('dataset_hash') and header['dataset_hash'] != data_hash:
            self.logger.warning(f"Pose model was trained on dataset {header['dataset_hash'][:12]}, "
                                f"evaluating on {data_hash[:12]}")
        spec = SplitSpec(ratio=header.get('split_ratio', self.cfg['pose']['train_ratio']),
                         seed=header.get('split_seed', self.cfg['pose']['split_seed']))
        split = pose_split(manifest, spec)
        result = eval_pose(model, split.test_set, self.cfg['pose']['batch_size'], self.device)
        metrics = {
            'run_id': self.run_id,
            'mode': header['mode'],
            'encoder_hash': header['encoder_hash'],
            'test_mae': result.mae,
            'frames': result.frames,
            'per_episode_mae': result.per_episode,
        }
        metrics_path = self.out_dir / 'pose_eval.json'
        write_json(metrics_path, metrics)
        self._emit(metrics)
        inputs = {'model': file_sha256(model_path), 'checkpoint': header['encoder_hash'], 'dataset': data_hash}
        outputs = {'metrics': {'path': str(metrics_path), 'hash': file_sha256(metrics_path)}}
        return inputs, outputs, {'test_mae': result.mae}

    def cmd_track_markers(self) -> CommandResult:
        images = list_images(self.args.images)
        reference_path = self.registry.resolve_artifact(self.args.reference)
        ds = self.cfg['dataset']
        tracker = MarkerTracker(ds['marker_radius_px'], ds['marker_spacing_px'], self.cfg['markers'])
        reference, _ = reference_markers(read_png(reference_path), tracker, ds['marker_rows'] * ds['marker_cols'])

        self.out_dir.mkdir(parents=True, exist_ok=True)
        per_image = []
        for path in images:
            pixels = read_png(path)
            field = tracker.track(pixels, reference)
            tracker.dump_field(field, self.out_dir / f'{path.stem}_markers.json', {'image': path.name})
            if self.args.overlay:
                tracker.write_overlay(pixels, field, self.out_dir / f'{path.stem}_overlay.png')
            shifts = np.linalg.norm(field.displacements[field.valid], axis=1)
            per_image.append({
                'image': path.name,
                'valid': int(field.valid.sum()),
                'mean_displacement_px': float(shifts.mean()) if len(shifts) else None,
            })
        summary = {'run_id': self.run_id, 'reference_markers': len(reference), 'images': per_image}
        summary_path = self.out_dir / 'markers_summary.json'
        write_json(summary_path, summary)
        self._emit(summary)
        inputs = {'reference': file_sha256(reference_path)}
        outputs = {'summary': {'path': str(summary_path), 'hash': file_sha256(summary_path)}}
        return inputs, outputs, {'images': len(images), 'reference_markers': len(reference)}

    def cmd_export_embed(self) -> CommandResult:
        model_path = self.registry.resolve_artifact(self.args.model)
        checkpoint = self.registry.resolve_artifact(self.args.checkpoint)
        images = list_images(self.args.images)
        model, header = load_perception_model(model_path, checkpoint, self.device)
        vectors = embed((read_png(p) for p in images), model, device=self.device)

        export_path = self.out_dir / 'embeddings.jsonl'
        export_path.parent.mkdir(parents=True, exist_ok=True)
        with open(export_path, 'w') as f:
            f.write(decimal_json({'dimension': int(vectors.shape[1]), 'encoder_hash': header['encoder_hash'],
                                   'count': len(images)}) + '\n')
            for path, vector in zip(images, vectors):
                f.write(decimal_json({'image': path.name, 'embedding': [float(v) for v in vector]}) + '\n')
        self.logger.info(f"Exported {len(images)} embeddings of dimension {vectors.shape[1]} to {export_path}")
        inputs = {'model': file_sha256(model_path), 'checkpoint': header['encoder_hash']}
        outputs = {'embeddings': {'path': str(export_path), 'hash': file_sha256(export_path)}}
        return inputs, outputs, {'count': len(images), 'dimension': int(vectors.shape[1])}

    def cmd_bench(self) -> CommandResult:
        root, manifest, data_hash = self._dataset()
        report = BenchmarkRunner(self.cfg, manifest, data_hash, self.out_dir, self.device).run()
        print(report['table'])
        report_path = self.out_dir / 'report.json'
        failed = [c for c in report['cells'] if c['status'] != 'ok']
        metrics = {
            'cells': len(report['cells']),
            'failed_cells': len(failed),
            'checks': report['checks'],
        }
        if failed:
            metrics['_status'] = 'partial'
        outputs = {'report': {'path': str(report_path), 'hash': file_sha256(report_path)}}
        return {'dataset': data_hash}, outputs, metrics


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    configure_logging()
    try:
        overrides = parse_overrides(collect_overrides(extra))
        if args.device:
            overrides['device'] = args.device
        if args.seed is not None:
            overrides['seed'] = args.seed
            overrides.setdefault('autoencoder', {})['seed'] = args.seed
            overrides.setdefault('pose', {})['seed'] = args.seed
        cfg = load_config(args.config, overrides)
        return CommandRunner(args, cfg).run()
    except TactileError as e:
        logger.error(f"{args.command} failed: {e.message}")
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"{args.command} failed with an unexpected error")
        print(json.dumps({'error': type(e).__name__, 'message': str(e), 'details': {}}), file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
