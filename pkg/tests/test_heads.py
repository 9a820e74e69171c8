import numpy as np
import pytest
import torch

from app.core.transfer import (attach, embed, head_config_for,
                               load_perception_model, parameter_checksum,
                               save_perception_model)
from app.models.models import HeadConfig
from app.networks.autoencoder import TactileAutoencoder, save_autoencoder
from app.networks.heads import DecoderHead, SEBlock
from app.utils.exceptions import (ArtifactMismatchError, ConfigError,
                                  ContractViolation)
from tests.conftest import tiny_autoencoder_config

HEAD_SETTINGS = {'channels': [8, 8], 'groups': 4, 'se_reduction': 4, 'output_dim': 4}


@pytest.fixture
def checkpoint(tmp_path):
    torch.manual_seed(0)
    path = tmp_path / 'ae.ckpt'
    save_autoencoder(path, TactileAutoencoder(tiny_autoencoder_config()))
    return path


def test_se_gates_lie_in_unit_interval():
    block = SEBlock(16, reduction=4)
    x = torch.randn(3, 16, 5, 6)
    gates = block.gates(x)
    assert tuple(gates.shape) == (3, 16, 1, 1)
    assert torch.all((gates > 0) & (gates < 1))
    assert torch.allclose(block(x), x * gates)


def test_se_gate_matches_finite_differences():
    torch.manual_seed(0)
    block = SEBlock(8, reduction=2).double()
    x = torch.randn(2, 8, 3, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(block, (x,), eps=1e-6, atol=1e-5, rtol=1e-3)


def test_uniform_se_gate_scales_the_mean():
    block = SEBlock(8, reduction=2)
    with torch.no_grad():
        block.fc[2].weight.zero_()
        block.fc[2].bias.fill_(0.4)
    x = torch.rand(2, 8, 4, 4)
    g = torch.sigmoid(torch.tensor(0.4)).item()
    out = block(x)
    assert torch.allclose(block.gates(x), torch.full((2, 8, 1, 1), g))
    assert out.mean().item() == pytest.approx(g * x.mean().item(), rel=1e-6)


@pytest.mark.parametrize('grid,channels,pooled', [((8, 10), (128, 256), (2, 2)),
                                                  ((16, 20), (128, 256, 256), (2, 2))])
def test_default_head_depth_pools_to_two_by_two(grid, channels, pooled):
    config = HeadConfig(latent_channels=4, latent_height=grid[0], latent_width=grid[1])
    assert config.channels == channels
    assert config.pooled_shape == pooled
    head = DecoderHead(config)
    z = torch.randn(2, 4, *grid)
    assert tuple(head.embed(z).shape) == (2, channels[-1] * 4)
    assert tuple(head(z).shape) == (2, 4)


def test_head_rejects_wrong_latent_shape():
    head = DecoderHead(HeadConfig(4, 4, 5, channels=(8,), groups=4, se_reduction=4))
    with pytest.raises(ContractViolation):
        head(torch.randn(1, 4, 8, 10))


def test_head_outputs_follow_batch_permutation():
    torch.manual_seed(0)
    head = DecoderHead(HeadConfig(4, 4, 5, channels=(8,), groups=4, se_reduction=4)).eval()
    z = torch.randn(5, 4, 4, 5)
    order = torch.tensor([3, 0, 4, 1, 2])
    with torch.no_grad():
        assert torch.allclose(head(z[order]), head(z)[order], atol=1e-6)


def test_head_config_rejects_pooling_underflow():
    with pytest.raises(ConfigError):
        HeadConfig(4, 4, 5, channels=(8, 8, 8), groups=4, se_reduction=4)
    with pytest.raises(ConfigError):
        HeadConfig(4, 8, 10, channels=(10,), groups=4)


def test_frozen_attach_freezes_encoder(checkpoint):
    model = attach(checkpoint, HEAD_SETTINGS, mode='frozen')
    assert model.frozen
    assert all(not p.requires_grad for p in model.encoder.parameters())
    assert all(p.requires_grad for p in model.head.parameters())
    model.train()
    assert not model.encoder.training
    assert model.head.training


def test_frozen_encoder_is_unchanged_by_head_updates(checkpoint):
    model = attach(checkpoint, HEAD_SETTINGS, mode='frozen')
    before = parameter_checksum(model.encoder)
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=1e-2)
    for _ in range(3):
        loss = model(torch.rand(2, 3, 64, 80)).pow(2).sum()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    assert parameter_checksum(model.encoder) == before


def test_finetune_and_random_modes(checkpoint):
    finetune = attach(checkpoint, HEAD_SETTINGS, mode='finetune')
    assert all(p.requires_grad for p in finetune.encoder.parameters())
    pretrained = parameter_checksum(finetune.encoder)

    random_a = attach(checkpoint, HEAD_SETTINGS, mode='frozen_random', seed=3)
    random_b = attach(checkpoint, HEAD_SETTINGS, mode='frozen_random', seed=3)
    assert parameter_checksum(random_a.encoder) == parameter_checksum(random_b.encoder)
    assert parameter_checksum(random_a.encoder) != pretrained
    with pytest.raises(ConfigError):
        attach(checkpoint, HEAD_SETTINGS, mode='partial')


def test_attach_rejects_mismatched_head(checkpoint):
    wrong = HeadConfig(4, 8, 10, channels=(8,), groups=4, se_reduction=4)
    with pytest.raises(ConfigError):
        attach(checkpoint, wrong)


def test_embed_preserves_order_and_dimension(checkpoint):
    model = attach(checkpoint, HEAD_SETTINGS)
    images = [np.random.default_rng(i).random((64, 80, 3)) for i in range(5)]
    vectors = embed(images, model, batch_size=2)
    assert vectors.shape == (5, model.embedding_dim)
    single = embed(images[3:4], model)
    assert np.allclose(vectors[3], single[0], atol=1e-6)
    assert embed([], model).shape == (0, model.embedding_dim)


def test_perception_model_round_trip(checkpoint, tmp_path):
    model = attach(checkpoint, HEAD_SETTINGS, mode='frozen')
    save_perception_model(tmp_path / 'pose.ckpt', model, {'seed': 0})
    loaded, header = load_perception_model(tmp_path / 'pose.ckpt', checkpoint)
    assert header['mode'] == 'frozen'
    x = torch.rand(2, 3, 64, 80)
    model.eval()
    with torch.no_grad():
        assert torch.equal(model(x), loaded(x))


def test_perception_model_refuses_other_encoder(checkpoint, tmp_path):
    model = attach(checkpoint, HEAD_SETTINGS, mode='frozen')
    save_perception_model(tmp_path / 'pose.ckpt', model)
    torch.manual_seed(5)
    other = tmp_path / 'other.ckpt'
    save_autoencoder(other, TactileAutoencoder(tiny_autoencoder_config()))
    with pytest.raises(ArtifactMismatchError):
        load_perception_model(tmp_path / 'pose.ckpt', other)


def test_head_config_follows_encoder_grid():
    config = head_config_for(tiny_autoencoder_config(downsample_factor=8), HEAD_SETTINGS)
    assert (config.latent_height, config.latent_width) == (8, 10)
    assert config.embedding_dim == 8 * 2 * 2
