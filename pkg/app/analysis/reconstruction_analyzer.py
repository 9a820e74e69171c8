import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from PIL import Image
from torch.utils.data import DataLoader, Subset

from app.analysis.marker_tracker import MarkerTracker, compare_fields
from app.models.models import DatasetManifest
from app.networks.autoencoder import TactileAutoencoder
from app.simulation.dataset_store import (TactileFrameDataset, load_profiles,
                                          read_png, template_path)
from app.utils.exceptions import MarkerTrackingError

PSNR_CAP_DB = 100.0


def psnr(x: np.ndarray, y: np.ndarray, cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio for [0, 1] images, capped for identical inputs"""
    mse = float(np.mean((np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def l1(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64))))


def write_reconstruction_grid(originals: Sequence[np.ndarray], reconstructions: Sequence[np.ndarray],
                              path: Path, gap: int = 2) -> None:
    """Ground truth on the left, reconstruction on the right, one pair per row"""
    if not originals:
        return
    h, w = originals[0].shape[:2]
    canvas = np.ones((len(originals) * (h + gap) - gap, 2 * w + gap, 3))
    for row, (x, x_hat) in enumerate(zip(originals, reconstructions)):
        top = row * (h + gap)
        canvas[top:top + h, :w] = x
        canvas[top:top + h, w + gap:] = x_hat
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)).save(path)


def _plain(value: Any) -> Any:
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and np.isnan(value):
        return None
    return value


def clean(records: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    return [{k: _plain(v) for k, v in r.items()} for r in records]


class ReconstructionAnalyzer:
    def __init__(self, model: TactileAutoencoder, manifest: DatasetManifest, device: str = 'cpu',
                 marker_settings: Optional[Dict[str, Any]] = None, batch_size: int = 16):
        self.model = model.to(device).eval()
        self.manifest = manifest
        self.device = torch.device(device)
        self.marker_settings = marker_settings or {}
        self.batch_size = batch_size
        self.logger = logging.getLogger("reconstruction_analyzer")
        self.root = Path(manifest.root)
        self.profiles = load_profiles(self.root)

    def _templates(self) -> Dict[int, np.ndarray]:
        return {v: read_png(template_path(self.root, v)) for v in self.profiles}

    def _tracker(self, variant: int) -> MarkerTracker:
        profile = self.profiles[variant]
        return MarkerTracker(profile.marker_radius_px, profile.marker_spacing_px, self.marker_settings,
                             profile.marker_color)

    @torch.no_grad()
    def evaluate(self, splits: Sequence[str] = ('eval',), grid_dir: Optional[Path] = None,
                 max_frames_per_episode: Optional[int] = None, grid_rows: int = 4,
                 track_markers: bool = True) -> Dict[str, Any]:
        """PSNR / L1 grouped by object and sensor variant, template baseline and marker-field error"""
        dataset = TactileFrameDataset(self.manifest, splits=splits)
        indices = [i for i, r in enumerate(dataset.records)
                   if max_frames_per_episode is None or r.frame < max_frames_per_episode]
        templates = self._templates()
        min_shear = self.marker_settings.get('min_shear_px', 1.0)
        references = {}
        if track_markers:
            for variant, template in templates.items():
                profile = self.profiles[variant]
                if profile.marker_rows * profile.marker_cols > 0:
                    references[variant] = self._tracker(variant).detect(template)

        rows: List[Dict[str, Any]] = []
        grids: Dict[tuple, List[tuple]] = defaultdict(list)
        loader = DataLoader(Subset(dataset, indices), batch_size=self.batch_size, shuffle=False)
        for images, _, idx in loader:
            recon = self.model(images.to(self.device)).reconstruction.cpu()
            x_np = images.permute(0, 2, 3, 1).numpy()
            r_np = recon.permute(0, 2, 3, 1).numpy()
            for x, x_hat, i in zip(x_np, r_np, idx.tolist()):
                record = dataset.records[i]
                key = (record.object_kind, record.sensor_variant)
                row = {
                    'object': record.object_kind,
                    'sensor_variant': record.sensor_variant,
                    'episode_id': record.episode_id,
                    'frame': record.frame,
                    'psnr': psnr(x, x_hat),
                    'l1': l1(x, x_hat),
                    'baseline_psnr': psnr(x, templates[record.sensor_variant]),
                    'marker_epe': np.nan,
                }
                if record.sensor_variant in references and np.hypot(*record.shear) >= min_shear:
                    row['marker_epe'] = self._marker_error(x, x_hat, record.sensor_variant,
                                                           references[record.sensor_variant])
                rows.append(row)
                if len(grids[key]) < grid_rows:
                    grids[key].append((x, x_hat))

        if grid_dir is not None:
            for (kind, variant), pairs in grids.items():
                write_reconstruction_grid([p[0] for p in pairs], [p[1] for p in pairs],
                                          Path(grid_dir) / f'{kind}_sensor{variant}.png')
        return self._summarise(pd.DataFrame(rows))

    def _marker_error(self, x: np.ndarray, x_hat: np.ndarray, variant: int, reference: np.ndarray) -> float:
        tracker = self._tracker(variant)
        try:
            return compare_fields(tracker.track(x, reference), tracker.track(x_hat, reference)).mean_error
        except MarkerTrackingError as e:
            self.logger.debug(f"Marker comparison skipped: {str(e)}")
            return np.nan

    def _summarise(self, frame: pd.DataFrame) -> Dict[str, Any]:
        if frame.empty:
            return {'frames': 0, 'per_cell': [], 'per_object': {}, 'table': ''}
        per_cell = (frame.groupby(['object', 'sensor_variant'])
                    .agg(psnr=('psnr', 'mean'), l1=('l1', 'mean'), baseline_psnr=('baseline_psnr', 'mean'),
                         marker_epe=('marker_epe', 'mean'), frames=('psnr', 'size'))
                    .reset_index())
        per_cell['psnr_gain'] = per_cell['psnr'] - per_cell['baseline_psnr']
        per_object = (frame.groupby('object')
                      .agg(psnr=('psnr', 'mean'), l1=('l1', 'mean'), baseline_psnr=('baseline_psnr', 'mean'),
                           marker_epe=('marker_epe', 'mean'), marker_frames=('marker_epe', 'count'))
                      .reset_index())
        per_object['psnr_gain'] = per_object['psnr'] - per_object['baseline_psnr']

        summary = {
            'frames': int(len(frame)),
            'mean_psnr': float(frame['psnr'].mean()),
            'mean_l1': float(frame['l1'].mean()),
            'mean_baseline_psnr': float(frame['baseline_psnr'].mean()),
            'per_cell': clean(per_cell.to_dict(orient='records')),
            'per_object': {r['object']: r for r in clean(per_object.to_dict(orient='records'))},
            'table': per_cell.to_string(index=False, float_format=lambda v: f'{v:.3f}'),
        }
        epe = frame['marker_epe'].dropna()
        summary['mean_marker_epe'] = float(epe.mean()) if len(epe) else None
        self.logger.info(f"Reconstruction eval over {len(frame)} frames: PSNR {summary['mean_psnr']:.2f} dB "
                         f"(baseline {summary['mean_baseline_psnr']:.2f} dB)")
        return summary
