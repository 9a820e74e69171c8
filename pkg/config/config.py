import copy
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import yaml

from app.utils.exceptions import ConfigError
from config import (AUTOENCODER_CONFIG, BENCH_CONFIG, DATASET_CONFIG,
                    DEFAULT_DEVICE, HEAD_CONFIG, MARKER_CONFIG, POSE_CONFIG,
                    WORKSPACE_DIR)

logger = logging.getLogger("config")

DEVICES = ('cpu', 'accelerator')


def default_config() -> Dict[str, Any]:
    """Full configuration tree with every default filled in"""
    return copy.deepcopy({
        'seed': 0,
        'device': DEFAULT_DEVICE,
        'workspace': str(WORKSPACE_DIR),
        'dataset': DATASET_CONFIG,
        'autoencoder': AUTOENCODER_CONFIG,
        'head': HEAD_CONFIG,
        'pose': POSE_CONFIG,
        'markers': MARKER_CONFIG,
        'bench': BENCH_CONFIG,
    })


def _unknown_keys(defaults: Dict[str, Any], given: Dict[str, Any], prefix: str = '') -> List[str]:
    unknown = []
    for key, value in given.items():
        dotted = f"{prefix}{key}"
        if key not in defaults:
            unknown.append(dotted)
        elif isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                unknown.append(dotted)
            else:
                unknown.extend(_unknown_keys(defaults[key], value, dotted + '.'))
    return unknown


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(merged.get(key), dict) and isinstance(value, dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_overrides(pairs: Iterable[str]) -> Dict[str, Any]:
    """Turn ['a.b=1', 'c=x'] into a nested dict, parsing values as YAML scalars"""
    tree: Dict[str, Any] = {}
    for pair in pairs:
        if '=' not in pair:
            raise ConfigError(f"Override '{pair}' is not of the form key=value", [pair])
        key, raw = pair.split('=', 1)
        node = tree
        parts = key.split('.')
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(raw) if raw != '' else None
    return tree


def validate_config(cfg: Dict[str, Any]) -> None:
    """Check value-level invariants that the schema alone cannot express"""
    bad = []
    if cfg['device'] not in DEVICES:
        bad.append('device')
    ae = cfg['autoencoder']
    if ae['downsample_factor'] not in (8, 16):
        bad.append('autoencoder.downsample_factor')
    if ae['codebook_size'] < 2:
        bad.append('autoencoder.codebook_size')
    if ae['commitment_weight'] <= 0:
        bad.append('autoencoder.commitment_weight')
    if ae['adversarial_weight'] < 0:
        bad.append('autoencoder.adversarial_weight')
    if ae['downstream_latent'] not in ('pre_quant', 'post_quant'):
        bad.append('autoencoder.downstream_latent')
    ds = cfg['dataset']
    for axis in ('image_height', 'image_width'):
        if ds[axis] % ae['downsample_factor'] != 0:
            bad.append(f'dataset.{axis}')
    if ds['shear_falloff'] not in ('raised_cosine', 'uniform'):
        bad.append('dataset.shear_falloff')
    if not 0.0 < cfg['pose']['train_ratio'] < 1.0:
        bad.append('pose.train_ratio')
    if cfg['pose']['mode'] not in ('frozen', 'finetune', 'scratch', 'frozen_random'):
        bad.append('pose.mode')
    if bad:
        raise ConfigError(f"Invalid configuration values: {', '.join(sorted(bad))}", bad)


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Load a YAML run config, merge it over the defaults and apply dotted overrides"""
    defaults = default_config()
    given: Dict[str, Any] = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"Config file not found: {config_path}", [str(config_path)])
        with open(config_path, 'r') as f:
            given = yaml.safe_load(f) or {}
        if not isinstance(given, dict):
            raise ConfigError(f"Config file {config_path} must contain a mapping", [str(config_path)])

    overrides = overrides or {}
    unknown = _unknown_keys(defaults, given) + _unknown_keys(defaults, overrides)
    if unknown:
        raise ConfigError(f"Unknown configuration keys: {', '.join(sorted(unknown))}", unknown)

    cfg = _merge(_merge(defaults, given), overrides)
    validate_config(cfg)
    logger.debug(f"Loaded configuration from {path or 'defaults'} with {len(overrides)} override groups")
    return cfg
