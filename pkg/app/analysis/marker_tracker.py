import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.feature import peak_local_max
from skimage.segmentation import watershed

from app.models.models import MarkerField, TactileImage
from app.utils.artifacts import write_decimal_json
from app.utils.exceptions import ContractViolation, MarkerTrackingError

logger = logging.getLogger("marker_tracker")

ImageLike = Union[np.ndarray, TactileImage]

# blobs above this multiple of the nominal dot area are tried for a watershed split
SPLIT_AREA_RATIO = 1.5


def _pixels(image: ImageLike) -> np.ndarray:
    pixels = image.pixels if isinstance(image, TactileImage) else np.asarray(image)
    return pixels.astype(np.float64)


def marker_coverage(pixels: np.ndarray, marker_radius_px: float, marker_color: float = 0.04,
                    min_contrast: float = 0.08) -> np.ndarray:
    """Per-pixel marker coverage in [0, 1] against a closing estimate of the shaded gel

    A pixel counts only as far as every informative channel has moved toward the marker colour,
    so contact shading that darkens one or two channels stays near zero.
    """
    channels = pixels if pixels.ndim == 3 else pixels[..., None]
    size = 2 * int(np.ceil(marker_radius_px)) + 3
    background = np.stack([ndimage.grey_closing(channels[..., c], size=(size, size))
                           for c in range(channels.shape[-1])], axis=-1)
    gap = background - marker_color
    informative = gap > min_contrast
    with np.errstate(divide='ignore', invalid='ignore'):
        per_channel = np.where(informative, (background - channels) / gap, np.inf)
    coverage = per_channel.min(axis=-1)
    coverage[~informative.any(axis=-1)] = 0.0
    return np.clip(coverage, 0.0, 1.0)


def _split_merged(labels: np.ndarray, merged: np.ndarray, marker_radius_px: float) -> np.ndarray:
    """Watershed oversized blobs on their distance transform, one basin per dot centre"""
    distance = ndimage.distance_transform_edt(merged)
    # thin shading streaks never reach half a dot radius from their edge
    peaks = peak_local_max(distance, min_distance=max(1, int(round(marker_radius_px))),
                           threshold_abs=0.5 * marker_radius_px,
                           labels=ndimage.label(merged)[0], exclude_border=False)
    if len(peaks) == 0:
        return np.where(merged, 0, labels)
    seeds = np.zeros(labels.shape, dtype=np.int64)
    first = labels.max() + 1
    seeds[tuple(peaks.T)] = np.arange(first, first + len(peaks))
    basins = watershed(-distance, seeds, mask=merged)
    return np.where(merged, basins, labels)


def _refine_centre(pixels: np.ndarray, centre: np.ndarray, marker_radius_px: float, marker_color: float,
                   neighbours: Sequence[np.ndarray] = ()) -> np.ndarray:
    """Coverage-weighted centroid over a quadratic background fitted on a ring around the dot"""
    channels = pixels if pixels.ndim == 3 else pixels[..., None]
    height, width = channels.shape[:2]
    x0, y0 = centre
    half = int(np.ceil(marker_radius_px)) + 5
    cx, cy = int(np.floor(x0)), int(np.floor(y0))
    rows = slice(max(cy - half, 0), min(cy + half + 1, height))
    cols = slice(max(cx - half, 0), min(cx + half + 1, width))
    yy, xx = np.mgrid[rows, cols].astype(np.float64)
    dx, dy = xx - x0, yy - y0
    dist = np.hypot(dx, dy)
    ring = (dist >= marker_radius_px + 1.5) & (dist <= marker_radius_px + 3.5)
    own = np.ones_like(ring)
    for nx, ny in neighbours:
        other = np.hypot(xx - nx, yy - ny)
        ring &= other > marker_radius_px + 1.5
        own &= dist <= other
    if ring.sum() < 12:
        return centre

    design = np.stack([np.ones_like(dx), dx, dy, dx * dx, dx * dy, dy * dy], axis=-1)
    patch = channels[rows, cols]
    coeff, *_ = np.linalg.lstsq(design[ring], patch[ring], rcond=None)
    background = design @ coeff
    gap = background - marker_color
    norm = np.sum(gap * gap, axis=-1)
    if norm[dist <= marker_radius_px].min() < 1e-4:
        return centre
    # least-squares coverage across channels
    coverage = np.clip(np.sum((background - patch) * gap, axis=-1) / norm, 0.0, 1.0)
    weights = coverage * ((dist <= marker_radius_px + 1.0) & own)
    total = weights.sum()
    if total <= 0:
        return centre
    return np.array([np.sum(weights * xx) / total, np.sum(weights * yy) / total])


def detect_markers(image: ImageLike, marker_radius_px: float = 2.5,
                   area_band: Sequence[float] = (0.3, 3.0), min_contrast: float = 0.08,
                   marker_color: float = 0.04) -> np.ndarray:
    """Dark-dot centroids as an (N, 2) array of (x, y), sorted lexicographically"""
    pixels = _pixels(image)
    coverage = marker_coverage(pixels, marker_radius_px, marker_color, min_contrast)
    if coverage.max() < 0.5:
        return np.zeros((0, 2))

    labels, count = ndimage.label(coverage >= 0.5)
    index = np.arange(1, count + 1)
    areas = ndimage.sum(np.ones_like(coverage), labels, index)
    nominal = np.pi * marker_radius_px ** 2
    oversized = index[areas > SPLIT_AREA_RATIO * nominal]
    if len(oversized):
        labels = _split_merged(labels, np.isin(labels, oversized), marker_radius_px)
        index = np.unique(labels[labels > 0])
        areas = ndimage.sum(np.ones_like(coverage), labels, index)
    keep = index[(areas >= area_band[0] * nominal) & (areas <= area_band[1] * nominal)]
    if len(keep) == 0:
        return np.zeros((0, 2))

    # grow each blob by one pixel so the anti-aliased rim contributes to its centroid
    grown = ndimage.grey_dilation(labels, size=(3, 3))
    coarse = np.asarray(ndimage.center_of_mass(coverage, grown, keep)).reshape(-1, 2)[:, ::-1]
    tree = cKDTree(coarse)
    reach = 2.0 * marker_radius_px + 6.0
    points = []
    for i, centre in enumerate(coarse):
        neighbours = [coarse[j] for j in tree.query_ball_point(centre, reach) if j != i]
        for _ in range(2):
            centre = _refine_centre(pixels, centre, marker_radius_px, marker_color, neighbours)
        points.append(centre)
    points = np.asarray(points)
    order = np.lexsort((points[:, 1], points[:, 0]))
    return points[order]


def match_markers(reference: np.ndarray, current: np.ndarray, spacing_px: float,
                  gate_fraction: float = 0.6) -> MarkerField:
    """Mutual nearest neighbours within a displacement gate; unmatched references are invalid"""
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 2)
    current = np.asarray(current, dtype=np.float64).reshape(-1, 2)
    matched = reference.copy()
    valid = np.zeros(len(reference), dtype=bool)
    if len(reference) == 0 or len(current) == 0:
        return MarkerField(reference, matched, valid)

    gate = gate_fraction * spacing_px
    forward_dist, forward = cKDTree(current).query(reference)
    _, backward = cKDTree(reference).query(current)
    for i, j in enumerate(forward):
        if backward[j] == i and forward_dist[i] <= gate:
            matched[i] = current[j]
            valid[i] = True
    return MarkerField(reference, matched, valid)


@dataclass
class FieldComparison:
    mean_error: float
    max_error: float
    per_marker: np.ndarray  # nan where either field is invalid
    compared: int

    def to_record(self) -> Dict[str, Any]:
        return {
            'mean_error': self.mean_error,
            'max_error': self.max_error,
            'compared': self.compared,
            'per_marker': [None if np.isnan(e) else float(e) for e in self.per_marker],
        }


def compare_fields(a: MarkerField, b: MarkerField) -> FieldComparison:
    """Endpoint error between the displacement fields over markers valid in both"""
    if len(a) != len(b):
        raise ContractViolation(f"Marker fields have different sizes ({len(a)} vs {len(b)})")
    common = a.valid & b.valid
    if not common.any():
        raise MarkerTrackingError("No marker is valid in both fields")
    errors = np.full(len(a), np.nan)
    errors[common] = np.linalg.norm(a.displacements[common] - b.displacements[common], axis=1)
    return FieldComparison(
        mean_error=float(np.mean(errors[common])),
        max_error=float(np.max(errors[common])),
        per_marker=errors,
        compared=int(common.sum()),
    )


class MarkerTracker:
    """Detect and match markers against a reference (no-contact) frame"""

    def __init__(self, marker_radius_px: float, spacing_px: float, settings: Optional[Dict[str, Any]] = None,
                 marker_color: Optional[float] = None):
        settings = settings or {}
        self.marker_radius_px = marker_radius_px
        self.spacing_px = spacing_px
        self.area_band = tuple(settings.get('area_band', (0.3, 3.0)))
        self.min_contrast = settings.get('min_contrast', 0.08)
        self.gate_fraction = settings.get('gate_fraction', 0.6)
        self.marker_color = marker_color if marker_color is not None else settings.get('marker_color', 0.04)
        self.logger = logging.getLogger("marker_tracker")

    def detect(self, image: ImageLike) -> np.ndarray:
        return detect_markers(image, self.marker_radius_px, self.area_band, self.min_contrast, self.marker_color)

    def track(self, image: ImageLike, reference: np.ndarray) -> MarkerField:
        field = match_markers(reference, self.detect(image), self.spacing_px, self.gate_fraction)
        if not field.valid.all():
            self.logger.debug(f"{int((~field.valid).sum())} of {len(field)} markers unmatched")
        return field

    def write_overlay(self, image: ImageLike, field: MarkerField, path: Path, scale: float = 3.0) -> None:
        """Quiver plot of marker displacements over the image"""
        try:
            import matplotlib
            matplotlib.use('Agg')
            from matplotlib import pyplot as plt

            pixels = np.clip(_pixels(image), 0.0, 1.0)
            d = field.displacements
            fig, ax = plt.subplots(figsize=(pixels.shape[1] / 40.0, pixels.shape[0] / 40.0), dpi=80)
            ax.imshow(pixels)
            ax.quiver(field.rest[field.valid, 0], field.rest[field.valid, 1],
                      d[field.valid, 0] * scale, d[field.valid, 1] * scale,
                      color='yellow', angles='xy', scale_units='xy', scale=1.0, width=0.004)
            if (~field.valid).any():
                ax.scatter(field.rest[~field.valid, 0], field.rest[~field.valid, 1], c='red', marker='x', s=12)
            ax.set_axis_off()
            fig.savefig(path, bbox_inches='tight', pad_inches=0)
            plt.close(fig)
        except Exception as e:
            self.logger.error(f"Error writing marker overlay {path}: {str(e)}")

    @staticmethod
    def dump_field(field: MarkerField, path: Path, extra: Optional[Dict[str, Any]] = None) -> None:
        record = field.to_record()
        record.update(extra or {})
        write_decimal_json(path, record, indent=2)


def reference_markers(template: ImageLike, tracker: MarkerTracker,
                      expected: Optional[int] = None) -> Tuple[np.ndarray, bool]:
    """Reference grid detected on a no-contact template; flag is False when the count is off"""
    centres = tracker.detect(template)
    ok = expected is None or len(centres) == expected
    if not ok:
        tracker.logger.warning(f"Template shows {len(centres)} markers, expected {expected}")
    return centres, ok
