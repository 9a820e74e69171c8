import json

import pytest
import torch
import torch.nn.functional as F

from app.core.autoencoder_trainer import AutoencoderTrainer
from app.core.losses import (GENERATOR_COMPONENTS, discriminator_loss,
                             generator_loss)
from app.models.models import AutoencoderConfig
from app.networks.autoencoder import (PatchDiscriminator, TactileAutoencoder,
                                      VectorQuantizer, codebook_perplexity,
                                      load_autoencoder, save_autoencoder)
from app.utils.artifacts import write_checkpoint
from app.utils.exceptions import (ArtifactMismatchError, ConfigError,
                                  ContractViolation, TrainingDivergedError)
from tests.conftest import tiny_autoencoder_config


@pytest.mark.parametrize('factor,grid', [(16, (8, 10)), (8, (16, 20))])
def test_latent_grid_matches_downsample_factor(factor, grid):
    config = AutoencoderConfig(downsample_factor=factor, base_channels=8, max_channels=16)
    model = TactileAutoencoder(config).eval()
    x = torch.rand(1, 3, 128, 160)
    with torch.no_grad():
        z = model.encode(x)
        assert tuple(z.shape) == (1, 4) + grid
        assert config.latent_shape == (4,) + grid
        x_hat = model.decode(z)
    assert tuple(x_hat.shape) == (1, 3, 128, 160)
    assert x_hat.min() >= 0.0 and x_hat.max() <= 1.0


def test_shape_contracts_are_enforced():
    model = TactileAutoencoder(tiny_autoencoder_config())
    with pytest.raises(ContractViolation):
        model.encode(torch.rand(1, 3, 32, 32))
    with pytest.raises(ContractViolation):
        model.decode(torch.rand(1, 4, 3, 3))
    with pytest.raises(ConfigError):
        AutoencoderConfig(input_height=100, downsample_factor=16)


def test_straight_through_passes_gradient_unchanged():
    quantizer = VectorQuantizer(8, 4)
    z = torch.randn(2, 4, 3, 5, requires_grad=True)
    out = quantizer(z)
    upstream = torch.randn_like(z)
    (out.z_q * upstream).sum().backward()
    assert torch.equal(z.grad, upstream)


def test_straight_through_gradient_of_squared_output():
    quantizer = VectorQuantizer(8, 4)
    z = torch.randn(1, 4, 2, 2, requires_grad=True)
    out = quantizer(z)
    (out.z_q ** 2).sum().backward()
    assert torch.equal(z.grad, 2 * out.z_q.detach())


def test_quantizer_ties_go_to_lowest_index():
    quantizer = VectorQuantizer(4, 2)
    with torch.no_grad():
        quantizer.embedding.weight.copy_(torch.tensor([[10.0, 10.0], [1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]]))
    z = torch.tensor([[[[0.0, 1.0]], [[0.0, 0.0]]]])  # cells (0, 0) and (1, 0)
    indices = quantizer(z).indices
    assert indices.flatten().tolist() == [1, 1]


def test_codebook_and_commitment_losses_by_hand():
    quantizer = VectorQuantizer(2, 2)
    with torch.no_grad():
        quantizer.embedding.weight.copy_(torch.tensor([[0.0, 0.0], [0.0, 3.0]]))
    z = torch.tensor([[[[0.5, 0.0]], [[0.0, 2.0]]]])  # cells (0.5, 0) and (0, 2)
    out = quantizer(z)
    assert out.indices.flatten().tolist() == [0, 1]
    assert out.codebook_loss.item() == pytest.approx(0.625)
    assert out.commitment_loss.item() == pytest.approx(0.625)


def test_codebook_loss_only_moves_codes_and_commitment_only_moves_encoder():
    quantizer = VectorQuantizer(8, 4)
    z = torch.randn(2, 4, 2, 2, requires_grad=True)
    quantizer(z).codebook_loss.backward()
    assert z.grad is None
    assert quantizer.embedding.weight.grad.abs().sum() > 0

    quantizer.zero_grad(set_to_none=True)
    z = torch.randn(2, 4, 2, 2, requires_grad=True)
    quantizer(z).commitment_loss.backward()
    assert z.grad.abs().sum() > 0
    assert quantizer.embedding.weight.grad is None


def test_codebook_perplexity_bounds():
    assert codebook_perplexity(torch.zeros(10, dtype=torch.long), 8).item() == pytest.approx(1.0)
    assert codebook_perplexity(torch.arange(4).repeat(3), 8).item() == pytest.approx(4.0)


def test_dead_codes_are_reseeded_from_the_batch():
    quantizer = VectorQuantizer(4, 2, dead_code_steps=1)
    with torch.no_grad():
        quantizer.embedding.weight.copy_(torch.tensor([[0.0, 0.0], [5.0, 5.0], [6.0, 6.0], [7.0, 7.0]]))
    z = torch.zeros(1, 2, 2, 2)
    quantizer.train()
    quantizer(z)
    assert quantizer.active_codes() == 1
    assert quantizer.reseed_dead_codes(z) == 3
    assert torch.equal(quantizer.embedding.weight, torch.zeros(4, 2))


def test_straight_through_training_gradient_matches_finite_differences():
    config = AutoencoderConfig(input_height=16, input_width=20, downsample_factor=4, base_channels=4,
                               max_channels=4, latent_channels=2, codebook_size=8)
    torch.manual_seed(0)
    model = TactileAutoencoder(config).double().eval()
    x = torch.rand(1, 3, 16, 20, dtype=torch.float64)
    weight = model.encoder.conv_out.weight
    cell = (0, 1, 1, 1)

    output = model(x)
    (F.l1_loss(output.reconstruction, x) + output.quantized.commitment_loss).backward()
    analytic = weight.grad[cell].item()

    with torch.no_grad():
        z0 = model.encode(x)
        reference = model.quantize(z0)
        original = weight[cell].item()

        def loss_at(delta):
            weight[cell] = original + delta
            z = model.encode(x)
            quantized = model.quantize(z)
            plain = F.l1_loss(model(x).reconstruction, x).item()
            weight[cell] = original
            assert torch.equal(quantized.indices, reference.indices)
            # the decoder sees the fixed codes shifted by the encoder's movement
            shifted = model.decoder(reference.z_q + (z - z0))
            return (F.l1_loss(shifted, x) + quantized.commitment_loss).item(), plain

        eps = 1e-6
        (up, plain_up), (down, plain_down) = loss_at(eps), loss_at(-eps)

    numeric = (up - down) / (2 * eps)
    assert abs(numeric - analytic) <= 1e-3 * max(abs(analytic), 1e-8)
    # with the codes unchanged the quantized reconstruction does not move at all
    assert plain_up == plain_down


def test_quantizing_a_quantized_latent_is_a_fixed_point():
    torch.manual_seed(0)
    model = TactileAutoencoder(tiny_autoencoder_config()).eval()
    z = torch.randn(2, *model.config.latent_shape)
    with torch.no_grad():
        first = model.quantize(z)
        second = model.quantize(first.z_q)
    assert torch.equal(second.indices, first.indices)
    assert torch.equal(second.z_q, first.z_q)
    assert second.commitment_loss.item() == 0.0


def test_decode_is_piecewise_constant_with_vq_and_continuous_without():
    torch.manual_seed(0)
    model = TactileAutoencoder(tiny_autoencoder_config()).eval()
    with torch.no_grad():
        z = model.encode(torch.rand(1, 3, 64, 80))
        nudged = z + 1e-4 * torch.randn_like(z)
        assert torch.equal(model.quantize(nudged).indices, model.quantize(z).indices)
        assert torch.equal(model.decode(nudged, vq_enabled=True), model.decode(z, vq_enabled=True))

        plain = model.decode(z, vq_enabled=False)
        moved = model.decode(nudged, vq_enabled=False)
    assert not torch.equal(plain, moved)
    assert (plain - moved).abs().max().item() < 1e-2


def test_eval_mode_encode_and_forward_are_repeatable():
    torch.manual_seed(0)
    model = TactileAutoencoder(tiny_autoencoder_config()).eval()
    x = torch.rand(2, 3, 64, 80)
    with torch.no_grad():
        assert torch.equal(model.encode(x), model.encode(x))
        a, b = model(x), model(x)
    assert torch.equal(a.reconstruction, b.reconstruction)
    assert torch.equal(a.quantized.indices, b.quantized.indices)
    # code usage is only counted while training
    assert model.quantizer.steps.item() == 0


def test_patch_discriminator_emits_patch_logits():
    discriminator = PatchDiscriminator(base_channels=8, n_layers=3)
    logits = discriminator(torch.rand(2, 3, 128, 160))
    assert tuple(logits.shape) == (2, 1, 16, 20)


def test_discriminator_on_constant_and_repeated_inputs():
    torch.manual_seed(0)
    discriminator = PatchDiscriminator(base_channels=8, n_layers=3).eval()
    x = torch.rand(2, 3, 64, 80)
    with torch.no_grad():
        flat = discriminator(torch.full((1, 3, 64, 80), 0.5))
        first, second = discriminator(x), discriminator(x)
    assert torch.isfinite(flat).all()
    assert torch.equal(first, second)


def test_discriminator_hinge_examples():
    ones = torch.ones(1, 1, 2, 2)
    assert discriminator_loss(2 * ones, -2 * ones).item() == pytest.approx(0.0)
    assert discriminator_loss(0 * ones, 0 * ones).item() == pytest.approx(2.0)
    assert discriminator_loss(-ones, ones).item() == pytest.approx(4.0)
    with pytest.raises(ContractViolation):
        discriminator_loss(ones, torch.ones(1, 1, 3, 3))


def test_generator_loss_components_sum_to_total():
    config = tiny_autoencoder_config(disc_start_step=5, adversarial_weight=0.1, commitment_weight=0.25)
    model = TactileAutoencoder(config)
    x = torch.rand(2, 3, 64, 80)
    output = model(x)
    logits = torch.full((2, 1, 4, 5), 3.0)

    total, parts = generator_loss(x, output.reconstruction, output.quantized, logits, config, step=0)
    assert set(parts) == set(GENERATOR_COMPONENTS)
    assert parts['adversarial'].item() == 0.0
    assert total.item() == pytest.approx(sum(v.item() for v in parts.values()), rel=1e-6)
    assert parts['commitment'].item() == pytest.approx(0.25 * output.quantized.commitment_loss.item(), rel=1e-6)

    _, parts = generator_loss(x, output.reconstruction, output.quantized, logits, config, step=5)
    assert parts['adversarial'].item() == pytest.approx(-0.3)


def test_generator_loss_without_vq_has_no_codebook_terms():
    config = tiny_autoencoder_config(vq_enabled=False)
    model = TactileAutoencoder(config)
    x = torch.rand(1, 3, 64, 80)
    output = model(x)
    assert output.quantized is None
    total, parts = generator_loss(x, output.reconstruction, None, None, config, step=0)
    assert parts['codebook'].item() == 0.0 and parts['commitment'].item() == 0.0
    assert total.item() == pytest.approx(parts['reconstruction'].item())


def test_checkpoint_round_trip_preserves_outputs(tmp_path):
    torch.manual_seed(1)
    model = TactileAutoencoder(tiny_autoencoder_config()).eval()
    content_hash = save_autoencoder(tmp_path / 'ae.ckpt', model, PatchDiscriminator(8, 2), step=3)
    loaded, header = load_autoencoder(tmp_path / 'ae.ckpt')
    assert len(content_hash) == 64
    assert header['tag'] == 'UniT'
    assert header['latent_shape'] == [4, 4, 5]
    x = torch.rand(2, 3, 64, 80)
    with torch.no_grad():
        assert torch.equal(model(x).reconstruction, loaded(x).reconstruction)


def test_loading_the_wrong_artifact_kind_fails(tmp_path):
    write_checkpoint(tmp_path / 'other.ckpt', {'kind': 'perception'}, {})
    with pytest.raises(ArtifactMismatchError):
        load_autoencoder(tmp_path / 'other.ckpt')


def test_trainer_writes_checkpoint_and_metrics(tiny_dataset, tmp_path):
    config = tiny_autoencoder_config(total_steps=3, disc_start_step=1)
    result = AutoencoderTrainer(config, tmp_path / 'run').train(tiny_dataset)
    assert result.steps == 3
    assert result.checkpoint.exists()
    assert len(result.history) == 3
    assert result.history[-1]['discriminator'] is not None
    assert result.history[-1]['perplexity'] >= 1.0
    with open(result.metrics_file) as f:
        assert len([json.loads(line) for line in f]) == 3
    model, header = load_autoencoder(result.checkpoint)
    assert header['step'] == 3


def test_trainer_is_deterministic(tiny_dataset, tmp_path):
    config = tiny_autoencoder_config(total_steps=2)
    a = AutoencoderTrainer(config, tmp_path / 'a').train(tiny_dataset)
    b = AutoencoderTrainer(config, tmp_path / 'b').train(tiny_dataset)
    assert a.history == b.history


def test_diverged_training_dumps_diagnostics(tiny_dataset, tmp_path, monkeypatch):
    import app.core.autoencoder_trainer as trainer_module

    def exploding(x, x_hat, quantized, fake_logits, config, step):
        nan = torch.tensor(float('nan'))
        return nan, {'reconstruction': nan}

    monkeypatch.setattr(trainer_module, 'generator_loss', exploding)
    with pytest.raises(TrainingDivergedError) as err:
        AutoencoderTrainer(tiny_autoencoder_config(), tmp_path / 'run').train(tiny_dataset)
    assert (tmp_path / 'run' / 'diverged_step_0.json').exists()
    assert err.value.details['step'] == 0
