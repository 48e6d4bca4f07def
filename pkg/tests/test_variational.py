import pytest
import torch

from luminet.config import VariationalConfig
from luminet.errors import GeneratorMutationError
from luminet.services.imaging import to_batch
from luminet.services.training import LossLog, parameter_digest
from luminet.services.variational import (
    TinyGenerator,
    VariationalEncoder,
    generate_relit_variants,
    gradient_perceptual,
    kl_divergence,
    reparameterize,
    train_variational_encoder,
)

SHORT = VariationalConfig(steps=3, batch_size=2, z_dim=8)


def _images(n: int = 4, size: int = 16, seed: int = 0) -> torch.Tensor:
    return torch.rand(n, 3, size, size, generator=torch.Generator().manual_seed(seed))


def test_kl_closed_form_values():
    assert kl_divergence(torch.zeros(3, 5), torch.zeros(3, 5)).tolist() == [0.0, 0.0, 0.0]
    assert kl_divergence(torch.ones(6), torch.zeros(6)).item() == 3.0


def test_kl_matches_monte_carlo():
    mu = torch.tensor([0.5, -1.0, 1.5, 0.2], dtype=torch.float64)
    logvar = torch.tensor([0.3, -0.5, 0.1, 0.4], dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    z = reparameterize(mu.expand(200_000, 4), logvar.expand(200_000, 4), g)
    q = torch.distributions.Normal(mu, torch.exp(0.5 * logvar))
    p = torch.distributions.Normal(torch.zeros(4, dtype=torch.float64), torch.ones(4, dtype=torch.float64))
    estimate = (q.log_prob(z) - p.log_prob(z)).sum(dim=1).mean().item()
    exact = kl_divergence(mu, logvar).item()
    assert abs(estimate - exact) / exact < 0.02


def test_logvar_is_clamped():
    encoder = VariationalEncoder(4, (2, 3))
    with torch.no_grad():
        encoder.to_stats.bias.fill_(1e4)
    _, logvar = encoder.encode(_images(1))
    assert logvar.max().item() == 20.0


def test_perceptual_distance_is_zero_on_identical_images():
    x = _images(2)
    assert gradient_perceptual(x, x).item() == 0.0
    assert gradient_perceptual(x, _images(2, seed=1)).item() > 0.0


def test_generator_outputs_have_contrast():
    gen = TinyGenerator(image_size=16)
    with torch.no_grad():
        images = gen(torch.randn(16, *gen.w_shape, generator=torch.Generator().manual_seed(0)))
    assert images.std().item() > 0.1
    assert images.std(dim=(2, 3)).mean().item() > 0.02
    assert images.std(dim=0).mean().item() > 0.05


def test_training_leaves_generator_untouched(tmp_path):
    gen = TinyGenerator(image_size=16)
    digest = parameter_digest(gen)
    recon_log = LossLog(tmp_path / "recon.csv")
    encoder = train_variational_encoder(gen, _images(), SHORT, recon_log=recon_log)
    assert parameter_digest(gen) == digest
    assert len(recon_log.rows) == 3
    assert not encoder.training


class DriftingGenerator(TinyGenerator):
    def forward(self, w):
        self.to_rgb.bias.add_(1e-3)
        return super().forward(w)


def test_mutating_generator_detected():
    with pytest.raises(GeneratorMutationError):
        train_variational_encoder(DriftingGenerator(image_size=16), _images(), SHORT)


def test_zero_direction_reproduces_generator_output():
    gen = TinyGenerator(image_size=16)
    encoder = VariationalEncoder(8, gen.w_shape).eval()
    img = _images(1)[0].permute(1, 2, 0)
    (variant,) = generate_relit_variants(encoder, gen, img, directions=torch.zeros(1, *gen.w_shape), seed=3)

    with torch.no_grad():
        mu, logvar = encoder.encode(to_batch(img))
        w = encoder.map(reparameterize(mu, logvar, torch.Generator().manual_seed(3)))
        expected = gen(w).clamp(0.0, 1.0)[0].permute(1, 2, 0)
    assert torch.equal(variant, expected)


def test_one_variant_per_direction():
    gen = TinyGenerator(image_size=16, n_directions=7)
    encoder = VariationalEncoder(8, gen.w_shape).eval()
    img = _images(1)[0].permute(1, 2, 0)
    variants = generate_relit_variants(encoder, gen, img)
    assert len(variants) == 7
    assert all(v.shape == (16, 16, 3) for v in variants)
    assert not torch.equal(variants[0], variants[1])


@pytest.mark.slow
def test_reconstruction_error_halves():
    gen = TinyGenerator(image_size=16)
    with torch.no_grad():
        images = gen(torch.randn(16, *gen.w_shape, generator=torch.Generator().manual_seed(0)))
    log = LossLog()
    train_variational_encoder(gen, images, VariationalConfig(steps=500, batch_size=8, z_dim=16), recon_log=log)
    losses = log.losses()
    assert sum(losses[-20:]) / 20 <= 0.5 * sum(losses[:20]) / 20
