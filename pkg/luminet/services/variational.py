"""Variational encoder into a frozen generator's style space.

Real images are encoded to a Gaussian over z, a sample is mapped to the
generator's style tensor w, and adding fixed lighting directions to w
produces relit variants of the same scene.
"""

import logging
from collections.abc import Callable, Sequence
from typing import Protocol, runtime_checkable

import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from luminet.config import VariationalConfig
from luminet.errors import GeneratorMutationError, UsageError
from luminet.services.imaging import check_image, from_batch, to_batch, to_signed
from luminet.services.training import LossLog, parameter_digest

logger = logging.getLogger(__name__)

LOGVAR_RANGE = (-30.0, 20.0)


@runtime_checkable
class FrozenGenerator(Protocol):
    """Maps style tensors (B, n_w, w_dim) to BCHW images in [0, 1]"""

    w_shape: tuple[int, int]
    directions: torch.Tensor  # (K, n_w, w_dim)

    def __call__(self, w: torch.Tensor) -> torch.Tensor: ...


class TinyGenerator(nn.Module):
    """Small deterministic decoder standing in for a pretrained style generator.

    Weights are drawn so a unit-Gaussian w gives images spread over most of
    [0, 1] with per-pixel structure, not a flat gray.
    """

    def __init__(
        self,
        image_size: int = 32,
        n_w: int = 4,
        w_dim: int = 16,
        n_directions: int = 7,
        seed: int = 0,
        rgb_gain: float = 3.0,
    ):
        super().__init__()
        if image_size % 8:
            raise UsageError("image_size must be a multiple of 8")
        self.w_shape = (n_w, w_dim)
        self.base = image_size // 8
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.fc = nn.Linear(n_w * w_dim, 32 * self.base * self.base)
            self.convs = nn.ModuleList([nn.Conv2d(32, 32, 3, padding=1) for _ in range(3)])
            self.to_rgb = nn.Conv2d(32, 3, 1)
            nn.init.normal_(self.fc.weight, std=(n_w * w_dim) ** -0.5)
            for conv in self.convs:
                nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.normal_(self.to_rgb.weight, std=rgb_gain * 32**-0.5)
            for layer in (self.fc, *self.convs, self.to_rgb):
                nn.init.zeros_(layer.bias)
            directions = 0.5 * torch.randn(n_directions, n_w, w_dim)
        self.register_buffer("directions", directions)
        self.eval().requires_grad_(False)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        h = self.fc(w.flatten(1)).view(w.shape[0], 32, self.base, self.base)
        for conv in self.convs:
            h = F.silu(conv(F.interpolate(h, scale_factor=2, mode="nearest")))
        return torch.sigmoid(self.to_rgb(h))


class VariationalEncoder(nn.Module):
    def __init__(self, z_dim: int, w_shape: tuple[int, int], width: int = 32):
        super().__init__()
        self.z_dim = z_dim
        self.w_shape = tuple(w_shape)
        self.trunk = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(4),
            nn.Flatten(),
        )
        self.to_stats = nn.Linear(2 * width * 16, 2 * z_dim)
        n_w, w_dim = self.w_shape
        self.mapper = nn.Sequential(nn.Linear(z_dim, 128), nn.SiLU(), nn.Linear(128, n_w * w_dim))

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """[0, 1] BCHW -> (mu, logvar), each (B, z_dim)"""
        mu, logvar = self.to_stats(self.trunk(to_signed(x))).chunk(2, dim=1)
        return mu, logvar.clamp(*LOGVAR_RANGE)

    def map(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapper(z).view(z.shape[0], *self.w_shape)

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None):
        mu, logvar = self.encode(x)
        return self.map(reparameterize(mu, logvar, generator)), mu, logvar


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(0.5 * logvar) * eps


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) per sample, summed over the last axis"""
    return 0.5 * torch.sum(mu**2 + torch.exp(logvar) - logvar - 1.0, dim=-1)


def _gradient_magnitude(x: torch.Tensor) -> torch.Tensor:
    dx = x[..., :-1, 1:] - x[..., :-1, :-1]
    dy = x[..., 1:, :-1] - x[..., :-1, :-1]
    return torch.sqrt(dx**2 + dy**2 + 1e-8)


def gradient_perceptual(x: torch.Tensor, y: torch.Tensor, scales: int = 3) -> torch.Tensor:
    """Mean L1 distance between gradient-magnitude maps over a small image pyramid"""
    total = x.new_zeros(())
    for s in range(scales):
        if s:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
        if min(x.shape[-2:]) < 2:
            break
        total = total + (_gradient_magnitude(x) - _gradient_magnitude(y)).abs().mean()
    return total / scales


def _as_batch(images: torch.Tensor | Sequence[torch.Tensor]) -> torch.Tensor:
    if isinstance(images, torch.Tensor) and images.ndim == 4:
        return images
    return to_batch(images)


def train_variational_encoder(
    gen: FrozenGenerator,
    images: torch.Tensor | Sequence[torch.Tensor],
    cfg: VariationalConfig,
    perceptual: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] = gradient_perceptual,
    loss_log: LossLog | None = None,
    recon_log: LossLog | None = None,
) -> VariationalEncoder:
    """
    Fit an encoder so that gen(map(sample(enc(x)))) reconstructs x

    Args:
        gen: Frozen generator; its parameters must come out bitwise unchanged
        images: [0, 1] images, as a BCHW batch or a list of H x W x 3 tensors
        cfg: Steps, learning rate and loss weights
        perceptual: Image distance used for the perceptual term
        loss_log: Receives the total loss per step
        recon_log: Receives the reconstruction MSE per step

    Returns:
        The trained VariationalEncoder in eval mode
    """
    data = _as_batch(images).float()
    is_module = isinstance(gen, nn.Module)
    if is_module:
        gen.eval().requires_grad_(False)
        digest = parameter_digest(gen)

    torch.manual_seed(cfg.seed)
    encoder = VariationalEncoder(cfg.z_dim, gen.w_shape)
    optimizer = torch.optim.Adam(encoder.parameters(), lr=cfg.lr)
    rng = torch.Generator().manual_seed(cfg.seed)
    loss_log = loss_log or LossLog()
    recon_log = recon_log or LossLog()

    encoder.train()
    for step in tqdm(range(1, cfg.steps + 1), disable=None):
        index = torch.randint(0, data.shape[0], (min(cfg.batch_size, data.shape[0]),), generator=rng)
        x = data[index]
        w, mu, logvar = encoder(x, generator=rng)
        x_hat = gen(w)
        recon = F.mse_loss(x_hat, x)
        loss = recon + cfg.lambda_perceptual * perceptual(x_hat, x) + cfg.lambda_kl * kl_divergence(mu, logvar).mean()
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        loss_log.append(step, loss.item(), cfg.lr)
        recon_log.append(step, recon.item(), cfg.lr)
    encoder.eval()

    if is_module and parameter_digest(gen) != digest:
        raise GeneratorMutationError("generator parameters changed during encoder training")
    logger.info("Variational encoder trained for %d steps, final reconstruction MSE %.5f", cfg.steps, recon.item())
    return encoder


@torch.no_grad()
def generate_relit_variants(
    enc: VariationalEncoder,
    gen: FrozenGenerator,
    img: torch.Tensor,
    directions: torch.Tensor | None = None,
    seed: int = 0,
) -> list[torch.Tensor]:
    """One H x W x 3 image per lighting direction, all from the same sampled w"""
    check_image(img)
    directions = gen.directions if directions is None else directions
    if directions.shape[0] < 1:
        raise UsageError("at least one lighting direction is required")
    mu, logvar = enc.encode(to_batch(img))
    w = enc.map(reparameterize(mu, logvar, torch.Generator().manual_seed(seed)))
    return [from_batch(gen(w + d[None]).clamp(0.0, 1.0))[0] for d in directions]
