import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from app.models.models import (ContactScene, MarkerField, ObjectShape,
                               SensorProfile, TactileImage)
from app.utils import quaternions

logger = logging.getLogger("gel_renderer")

SIXTY_DEG = np.pi / 3.0


@dataclass
class ContactImprint:
    height: np.ndarray  # (H, W) mm, smoothed membrane deformation
    mask: np.ndarray  # (H, W) bool, object penetration > 0
    empty_contact: bool


def _pixel_grid_mm(scene: ContactScene, profile: SensorProfile) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel centres in mm relative to the contact point; image centre is pixel (H/2, W/2)"""
    rows, cols = np.mgrid[0:profile.height, 0:profile.width].astype(np.float64)
    x = (cols - profile.width / 2.0 - scene.offset[0]) / profile.px_per_mm
    y = (rows - profile.height / 2.0 - scene.offset[1]) / profile.px_per_mm
    return x, y


def _rotate(x: np.ndarray, y: np.ndarray, yaw: float) -> Tuple[np.ndarray, np.ndarray]:
    c, s = np.cos(yaw), np.sin(yaw)
    return c * x + s * y, -s * x + c * y


def _dome(r2: np.ndarray, radius: float) -> np.ndarray:
    inside = r2 < radius ** 2
    s = np.full(r2.shape, np.inf)
    s[inside] = radius - np.sqrt(radius ** 2 - r2[inside])
    return s


def _hexagon_lower_envelope(t: np.ndarray, circumradius: float, roll: float) -> np.ndarray:
    """Height of a rolled hexagonal cross-section above its lowest vertex, as a function of lateral offset"""
    # the hexagon repeats every 60 degrees of roll
    phase = float(np.round(np.mod(roll, SIXTY_DEG), 9))
    if phase >= round(SIXTY_DEG, 9):
        phase = 0.0
    angles = phase + np.arange(6) * SIXTY_DEG
    vt = circumradius * np.cos(angles)
    vz = circumradius * np.sin(angles)
    z_low = np.full(t.shape, np.inf)
    for k in range(6):
        t0, z0, t1, z1 = vt[k], vz[k], vt[(k + 1) % 6], vz[(k + 1) % 6]
        if abs(t1 - t0) < 1e-12:
            continue
        lo, hi = min(t0, t1), max(t0, t1)
        on_edge = (t >= lo) & (t <= hi)
        z = z0 + (t - t0) * (z1 - z0) / (t1 - t0)
        z_low = np.where(on_edge, np.minimum(z_low, z), z_low)
    return z_low - vz.min()


def surface_height(shape: ObjectShape, orientation, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Object surface height (mm) above its lowest point; inf where the object has no surface"""
    yaw, pitch, roll = quaternions.to_euler(orientation)

    if shape.kind == 'sphere':
        return _dome(x ** 2 + y ** 2, shape.radius_mm)

    if shape.kind == 'textured-blob':
        xr, yr = _rotate(x, y, yaw)
        s = _dome(xr ** 2 + (yr / 0.7) ** 2, shape.radius_mm)
        w = 2.0 * np.pi * shape.texture_frequency_per_mm
        texture = 0.5 * shape.texture_amplitude_mm * (1.0 - np.cos(w * xr) * np.cos(w * yr))
        return s + texture

    if shape.kind == 'hex-rod':
        axial, lateral = _rotate(x, y, yaw)
        circumradius = shape.rod_width_mm / np.sqrt(3.0)
        s = _hexagon_lower_envelope(lateral, circumradius, roll)
        half = shape.length_mm / 2.0
        slope = np.tan(pitch)
        s = s + slope * axial + abs(slope) * half
        s[np.abs(axial) > half] = np.inf
        return s

    if shape.kind == 'edge':
        _, t = _rotate(x, y, yaw)
        rho = shape.edge_radius_mm
        s = np.zeros_like(t)
        rounded = t > 0
        s[rounded] = _dome(t[rounded] ** 2, rho)
        return s

    if shape.kind == 'corner':
        t1, t2 = _rotate(x, y, yaw)
        r2 = np.maximum(t1, 0.0) ** 2 + np.maximum(t2, 0.0) ** 2
        return _dome(r2, shape.edge_radius_mm)

    raise ValueError(f"Unknown object kind: {shape.kind}")


def contact_imprint(scene: ContactScene, profile: SensorProfile) -> ContactImprint:
    """Penetration field -> membrane-smoothed heightmap plus contact mask"""
    shape = (profile.height, profile.width)
    if scene.depth_mm <= 0.0:
        return ContactImprint(np.zeros(shape), np.zeros(shape, dtype=bool), True)

    x, y = _pixel_grid_mm(scene, profile)
    with np.errstate(invalid='ignore'):
        penetration = scene.depth_mm - surface_height(scene.shape, scene.orientation, x, y)
    penetration = np.where(np.isfinite(penetration), penetration, -np.inf)
    mask = penetration > 0.0
    if not mask.any():
        return ContactImprint(np.zeros(shape), mask, True)

    raw = np.where(mask, penetration, 0.0)
    smoothed = ndimage.gaussian_filter(raw, sigma=profile.membrane_sigma_px, mode='constant') * mask
    peak = smoothed.max()
    height = smoothed * (raw.max() / peak) if peak > 0 else smoothed
    return ContactImprint(height, mask, False)


def render_heightmap(scene: ContactScene, profile: SensorProfile) -> Tuple[np.ndarray, bool]:
    """Heightmap (H x W, mm) of the gel deformation and the empty-contact flag"""
    imprint = contact_imprint(scene, profile)
    if imprint.empty_contact and scene.depth_mm > 0:
        logger.debug(f"Empty contact for {scene.shape.kind} at offset {scene.offset}")
    return imprint.height, imprint.empty_contact


def shade(heightmap: np.ndarray, profile: SensorProfile,
          rng: Optional[np.random.Generator] = None) -> TactileImage:
    """Tri-colour Lambertian shading of the deformed gel over the background tint"""
    slope_y, slope_x = np.gradient(heightmap * profile.px_per_mm)
    normals = np.stack([slope_x, slope_y, np.ones_like(heightmap)], axis=-1)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)

    lights = profile.light_direction_array()
    colors = np.asarray(profile.light_colors, dtype=np.float64)
    # flat gel contributes nothing; only deformation changes the colour
    lambert = np.maximum(normals @ lights.T, 0.0) - np.maximum(lights[:, 2], 0.0)
    pixels = np.asarray(profile.background_tint, dtype=np.float64) + lambert @ colors
    if rng is not None and profile.noise_std > 0:
        pixels = pixels + rng.normal(0.0, profile.noise_std, size=pixels.shape)
    return TactileImage(np.clip(pixels, 0.0, 1.0), {'sensor_variant': profile.variant})


def _falloff_weights(points: np.ndarray, mask: np.ndarray, falloff: str) -> np.ndarray:
    rows, cols = np.nonzero(mask)
    if falloff == 'uniform':
        return np.ones(len(points))
    centre = np.array([cols.mean(), rows.mean()])
    reach = np.sqrt(((cols - centre[0]) ** 2 + (rows - centre[1]) ** 2).max()) + 0.5
    dist = np.linalg.norm(points - centre, axis=1)
    return np.where(dist <= reach, 0.5 * (1.0 + np.cos(np.pi * np.minimum(dist / reach, 1.0))), 0.0)


def displace_markers(profile: SensorProfile, scene: ContactScene, falloff: str = 'raised_cosine',
                     imprint: Optional[ContactImprint] = None) -> MarkerField:
    """Marker rest/displaced positions; only markers inside the contact region follow the shear"""
    rest = profile.rest_markers()
    if imprint is None:
        imprint = contact_imprint(scene, profile)
    current = rest.copy()
    shear = np.asarray(scene.shear, dtype=np.float64)
    if imprint.empty_contact or not len(rest) or not np.any(shear):
        return MarkerField(rest, current)

    ix = np.clip(np.round(rest[:, 0]).astype(int), 0, profile.width - 1)
    iy = np.clip(np.round(rest[:, 1]).astype(int), 0, profile.height - 1)
    inside = imprint.mask[iy, ix]
    weights = _falloff_weights(rest, imprint.mask, falloff) * inside
    current = rest + weights[:, None] * shear[None, :]
    r = profile.marker_radius_px
    cut = ((current[:, 0] - r < 0) | (current[:, 0] + r > profile.width - 1)
           | (current[:, 1] - r < 0) | (current[:, 1] + r > profile.height - 1))
    if cut.any():
        logger.warning(f"{int(cut.sum())} displaced markers reach the image border; "
                       f"their disks are clipped (shear {tuple(shear)})")
    current[:, 0] = np.clip(current[:, 0], 0.0, profile.width - 1)
    current[:, 1] = np.clip(current[:, 1], 0.0, profile.height - 1)
    return MarkerField(rest, current)


def render_markers(image: TactileImage, field: MarkerField, profile: SensorProfile) -> TactileImage:
    """Draw anti-aliased dark disks at the displaced marker positions"""
    pixels = image.pixels.copy()
    r = profile.marker_radius_px
    pad = int(np.ceil(r)) + 2
    for x, y in field.current:
        x0, x1 = max(int(x) - pad, 0), min(int(x) + pad + 1, profile.width)
        y0, y1 = max(int(y) - pad, 0), min(int(y) + pad + 1, profile.height)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dist = np.hypot(xx - x, yy - y)
        coverage = np.clip(r + 0.5 - dist, 0.0, 1.0)[..., None]
        patch = pixels[y0:y1, x0:x1]
        pixels[y0:y1, x0:x1] = patch * (1.0 - coverage) + profile.marker_color * coverage
    return TactileImage(pixels, dict(image.metadata))


def apply_sensor_noise(image: TactileImage, profile: SensorProfile, rng: np.random.Generator) -> TactileImage:
    if profile.noise_std <= 0:
        return image
    noisy = image.pixels + rng.normal(0.0, profile.noise_std, size=image.pixels.shape)
    return TactileImage(np.clip(noisy, 0.0, 1.0), dict(image.metadata))


def background_template(profile: SensorProfile) -> TactileImage:
    """No-contact, noise-free image of the sensor with markers at rest"""
    flat = shade(np.zeros((profile.height, profile.width)), profile)
    rest = profile.rest_markers()
    return render_markers(flat, MarkerField(rest, rest), profile)


def sensor_variants(base: SensorProfile, count: int, seed: int) -> List[SensorProfile]:
    """Perturbed copies of a profile standing in for physically different sensors"""
    variants = []
    for v in range(1, count + 1):
        rng = np.random.default_rng([seed, v])
        colors = np.asarray(base.light_colors) * (1.0 + rng.uniform(-0.1, 0.1, size=(3, 3)))
        tint = np.asarray(base.background_tint) * (1.0 + rng.uniform(-0.1, 0.1, size=3))
        offset = rng.uniform(-1.5, 1.5, size=2)
        variants.append(replace(
            base,
            light_colors=tuple(tuple(float(c) for c in row) for row in colors),
            background_tint=tuple(float(t) for t in tint),
            marker_offset=(float(offset[0]), float(offset[1])),
            variant=v,
        ))
    return variants


def render_frame(scene: ContactScene, profile: SensorProfile, rng: Optional[np.random.Generator] = None,
                 falloff: str = 'raised_cosine') -> Tuple[TactileImage, MarkerField, ContactImprint]:
    """Full observation: heightmap -> shading -> markers -> sensor noise"""
    imprint = contact_imprint(scene, profile)
    image = shade(imprint.height, profile)
    field = displace_markers(profile, scene, falloff, imprint=imprint)
    image = render_markers(image, field, profile)
    if rng is not None:
        image = apply_sensor_noise(image, profile, rng)
    image.metadata.update({'kind': scene.shape.kind, 'empty_contact': imprint.empty_contact})
    return image, field, imprint


class GelRenderer:
    def __init__(self, profile: SensorProfile, falloff: str = 'raised_cosine'):
        self.profile = profile
        self.falloff = falloff
        self.logger = logging.getLogger("gel_renderer")
        profile.validate()
        self.empty_frames = 0

    def render(self, scene: ContactScene,
               rng: Optional[np.random.Generator] = None) -> Tuple[TactileImage, MarkerField, ContactImprint]:
        image, field, imprint = render_frame(scene, self.profile, rng, self.falloff)
        if imprint.empty_contact:
            self.empty_frames += 1
        return image, field, imprint
