import json

import pytest

import app.core.benchmark as benchmark
from app.core.benchmark import (BenchmarkRunner, classify_error, count_cells,
                                representation_dimension)
from config.config import default_config
from tests.conftest import tiny_autoencoder_config, tiny_dataset_settings


@pytest.fixture
def bench_config():
    cfg = default_config()
    cfg['dataset'] = tiny_dataset_settings()
    cfg['autoencoder'].update({
        'base_channels': 8,
        'max_channels': 16,
        'codebook_size': 16,
        'disc_base_channels': 8,
        'disc_layers': 2,
        'batch_size': 4,
        'total_steps': 2,
        'log_every': 1,
    })
    cfg['head'] = {'channels': [8, 8], 'groups': 4, 'se_reduction': 4, 'output_dim': 4}
    cfg['pose'].update({'epochs': 1, 'batch_size': 8})
    cfg['bench'].update({'seeds': [0], 'downsample_factors': [16]})
    return cfg


def test_default_matrix_size():
    assert count_cells(default_config()['bench']) == 24


def test_representation_dimension_label():
    assert representation_dimension(tiny_autoencoder_config()) == '4 × 5'
    assert representation_dimension(tiny_autoencoder_config(downsample_factor=8)) == '8 × 10'


def test_error_classification_keeps_first_line():
    assert classify_error(ValueError('bad value\nsecond line')) == ('ValueError', 'bad value')


def test_benchmark_runs_every_cell(tiny_dataset, bench_config, tmp_path):
    report = BenchmarkRunner(bench_config, tiny_dataset, 'abc', tmp_path / 'bench').run()
    assert len(report['cells']) == 4
    assert all(c['status'] == 'ok' for c in report['cells'])
    assert len(report['autoencoders']) == 2
    assert 'Representation Dimension' in report['table']
    assert 'Reconstruction PSNR (dB)' in report['table']
    for label in ('UniT', 'UniT w/o VQ', 'Scratch', 'Frozen random'):
        assert label in report['table']
    assert {c['check'] for c in report['checks']} == {'frozen_transfer_utility', 'vq_ablation_trend'}
    with open(tmp_path / 'bench' / 'report.json') as f:
        assert json.load(f)['dataset_hash'] == 'abc'
    assert (tmp_path / 'bench' / 'report.txt').exists()


def test_failed_cell_does_not_stop_the_matrix(tiny_dataset, bench_config, tmp_path, monkeypatch):
    original = benchmark.train_pose

    def flaky(model, manifest, spec, settings, device='cpu'):
        if model.mode == 'scratch':
            raise RuntimeError('scratch run exploded')
        return original(model, manifest, spec, settings, device)

    monkeypatch.setattr(benchmark, 'train_pose', flaky)
    report = BenchmarkRunner(bench_config, tiny_dataset, 'abc', tmp_path / 'bench').run()
    status = {c['method']: c['status'] for c in report['cells']}
    assert status['scratch'] == 'failed: RuntimeError: scratch run exploded'
    assert all(status[m] == 'ok' for m in ('unit', 'unit_no_vq', 'frozen_random'))
    assert 'Scratch' not in report['table']


def test_table_without_successful_cells():
    assert BenchmarkRunner.format_table([{'status': 'failed: boom'}]) == 'no successful cells'


def test_table_appends_autoencoder_psnr():
    cells = [{'status': 'ok', 'trainer_object': 'hex-rod', 'label': 'UniT', 'representation_dimension': '4 × 5',
              'test_mae': 0.5}]
    autoencoders = [
        {'status': 'ok', 'trainer_object': 'hex-rod', 'tag': 'UniT', 'representation_dimension': '4 × 5',
         'psnr': 31.234},
        {'status': 'failed: boom', 'trainer_object': 'hex-rod', 'tag': 'UniT w/o VQ',
         'representation_dimension': '4 × 5'},
    ]
    table = BenchmarkRunner.format_table(cells, autoencoders)
    assert 'Reconstruction PSNR (dB)' in table
    assert '31.23' in table
    assert 'UniT w/o VQ' not in table
    assert 'PSNR' not in BenchmarkRunner.format_table(cells)


def test_benchmark_is_repeatable_with_the_same_seeds(tiny_dataset, bench_config, tmp_path):
    volatile = {'checkpoint', 'checkpoint_hash', 'encoder_hash', 'model_hash'}

    def scores(report):
        strip = lambda rows: [{k: v for k, v in row.items() if k not in volatile} for row in rows]
        return strip(report['autoencoders']), strip(report['cells']), report['checks'], report['table']

    first = BenchmarkRunner(bench_config, tiny_dataset, 'abc', tmp_path / 'first').run()
    second = BenchmarkRunner(bench_config, tiny_dataset, 'abc', tmp_path / 'second').run()
    assert scores(first) == scores(second)
