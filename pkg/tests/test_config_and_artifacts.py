import json
import re

import numpy as np
import pytest
import torch
import yaml

from app.models.models import RunRecord
from app.utils.artifacts import (RunRegistry, config_sha256, decimal_json,
                                 expect_kind, file_sha256, read_checkpoint,
                                 read_checkpoint_header, tree_sha256,
                                 write_checkpoint)
from app.utils.exceptions import (ArtifactMismatchError, ConfigError,
                                  ResolutionError)
from config.config import default_config, load_config, parse_overrides


def test_defaults_load_without_a_file():
    cfg = load_config()
    assert cfg == default_config()
    assert cfg['device'] in ('cpu', 'accelerator')
    assert cfg['autoencoder']['downsample_factor'] in (8, 16)


def test_overrides_are_parsed_as_yaml_scalars():
    overrides = parse_overrides(['autoencoder.codebook_size=64', 'bench.seeds=[0, 4]', 'pose.mode=finetune'])
    assert overrides == {'autoencoder': {'codebook_size': 64}, 'bench': {'seeds': [0, 4]},
                         'pose': {'mode': 'finetune'}}
    cfg = load_config(overrides=overrides)
    assert cfg['autoencoder']['codebook_size'] == 64
    assert cfg['bench']['seeds'] == [0, 4]
    assert cfg['autoencoder']['latent_channels'] == default_config()['autoencoder']['latent_channels']
    with pytest.raises(ConfigError):
        parse_overrides(['no-equals-sign'])


def test_unknown_keys_are_all_reported():
    with pytest.raises(ConfigError) as err:
        load_config(overrides={'autoencoder': {'codebok_size': 4}, 'colour': 'red'})
    assert err.value.keys == ['autoencoder.codebok_size', 'colour']
    assert err.value.exit_code == 2


def test_invalid_values_are_rejected():
    with pytest.raises(ConfigError) as err:
        load_config(overrides={'autoencoder': {'downsample_factor': 4}})
    assert 'autoencoder.downsample_factor' in err.value.keys
    with pytest.raises(ConfigError):
        load_config(overrides={'dataset': {'image_height': 100}})
    with pytest.raises(ConfigError):
        load_config(overrides={'device': 'tpu'})


def test_yaml_file_is_merged_over_defaults(tmp_path):
    path = tmp_path / 'run.yaml'
    path.write_text(yaml.safe_dump({'seed': 5, 'pose': {'epochs': 3}}))
    cfg = load_config(str(path), {'pose': {'epochs': 4}})
    assert cfg['seed'] == 5
    assert cfg['pose']['epochs'] == 4
    assert cfg['pose']['lr'] == default_config()['pose']['lr']
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'missing.yaml'))


def test_registry_appends_and_resolves(tmp_path):
    registry = RunRegistry(tmp_path)
    artifact = tmp_path / 'model.ckpt'
    artifact.write_bytes(b'weights')
    digest = file_sha256(artifact)
    registry.append(RunRecord(run_id='a1', command='train-repr', config={},
                              outputs={'checkpoint': {'path': str(artifact), 'hash': digest}}))
    registry.append(RunRecord(run_id='b2', command='recon-eval', config={}, status='failed'))

    records = registry.records()
    assert [r['run_id'] for r in records] == ['a1', 'b2']
    assert records[1]['status'] == 'failed'
    assert registry.resolve_artifact(str(artifact)) == artifact
    assert registry.resolve_artifact(digest) == artifact
    assert registry.resolve_artifact(digest[:12]) == artifact


def test_unknown_hash_is_a_resolution_error(tmp_path):
    registry = RunRegistry(tmp_path)
    with pytest.raises(ResolutionError) as err:
        registry.resolve_artifact('deadbeef00')
    assert err.value.details['hash'] == 'deadbeef00'
    assert err.value.exit_code == 2


def test_registered_but_deleted_artifact_is_reported(tmp_path):
    registry = RunRegistry(tmp_path)
    registry.append(RunRecord(run_id='a1', command='generate', config={},
                              outputs={'dataset': {'path': str(tmp_path / 'gone'), 'hash': 'ab' * 32}}))
    with pytest.raises(ResolutionError) as err:
        registry.resolve_artifact('ab' * 8)
    assert err.value.details['path'] == str(tmp_path / 'gone')


def test_checkpoint_header_round_trip(tmp_path):
    path = tmp_path / 'ckpt' / 'x.ckpt'
    header = {'kind': 'autoencoder', 'tag': 'UniT', 'latent_shape': [4, 8, 10]}
    digest = write_checkpoint(path, header, {'w': torch.arange(3)})
    assert digest == file_sha256(path)
    assert read_checkpoint_header(path) == header
    loaded_header, tensors = read_checkpoint(path)
    assert loaded_header == header
    assert torch.equal(tensors['w'], torch.arange(3))
    expect_kind(header, 'autoencoder', path)
    with pytest.raises(ArtifactMismatchError):
        expect_kind(header, 'perception', path)


def test_non_checkpoint_file_is_rejected(tmp_path):
    path = tmp_path / 'notes.txt'
    path.write_text('plain text, not a checkpoint')
    with pytest.raises(ArtifactMismatchError):
        read_checkpoint_header(path)


def test_tree_hash_tracks_content_and_honours_exclusions(tmp_path):
    (tmp_path / 'a').mkdir()
    (tmp_path / 'a' / 'x.bin').write_bytes(b'x')
    (tmp_path / 'manifest.json').write_text('{}')
    before = tree_sha256(tmp_path, exclude=['manifest.json'])
    (tmp_path / 'manifest.json').write_text('{"changed": true}')
    assert tree_sha256(tmp_path, exclude=['manifest.json']) == before
    assert tree_sha256(tmp_path) != before
    (tmp_path / 'a' / 'x.bin').write_bytes(b'y')
    assert tree_sha256(tmp_path, exclude=['manifest.json']) != before


def test_config_hash_ignores_key_order():
    assert config_sha256({'a': 1, 'b': [1, 2]}) == config_sha256({'b': [1, 2], 'a': 1})


def test_decimal_json_keeps_seventeen_significant_digits():
    payload = {'b': [0.1, 2.0, np.float32(0.5)], 'a': {'n': 3, 'flag': True, 'none': None}, 'zero': 0.0}
    text = decimal_json(payload, indent=2, sort_keys=True)
    assert json.loads(text) == {'a': {'flag': True, 'n': 3, 'none': None}, 'b': [0.1, 2.0, 0.5], 'zero': 0.0}
    assert isinstance(json.loads(text)['a']['n'], int)
    assert text.index('"a"') < text.index('"b"')
    for token in re.findall(r'-?\d+\.\d+(?:e[-+]\d+)?', text):
        assert len(token.split('e')[0].replace('-', '').replace('.', '')) >= 17
    assert decimal_json([]) == '[]'
    assert json.loads(decimal_json([1e-300, -2.5e10])) == [1e-300, -2.5e10]
    with pytest.raises(TypeError):
        decimal_json({'x': object()})
