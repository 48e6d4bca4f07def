"""Small conditioned U-Net.

Input channels are the noisy target and the source image stacked together.
Control residues are added to the skip activations of each down level; the
light embedding is read through cross-attention blocks whose projections
carry no bias, so a zero context contributes exactly zero.
"""

import math

import torch
import torch.nn.functional as F
from torch import nn

from luminet.config import DiffusionConfig

PARTITIONS = ("base", "control", "cross_attn", "adaptor")


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = _norm(channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        q, k, v = (y.reshape(b, self.heads, c // self.heads, h * w).transpose(-1, -2) for y in (q, k, v))
        attn = F.scaled_dot_product_attention(q, k, v)
        return x + self.out(attn.transpose(-1, -2).reshape(b, c, h, w))


class CrossAttention(nn.Module):
    """Attend from image features to the light tokens; bias-free so zero tokens add zero"""

    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = _norm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels, bias=False)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        q = self.to_q(tokens).view(b, h * w, self.heads, -1).transpose(1, 2)
        k = self.to_k(context).view(b, context.shape[1], self.heads, -1).transpose(1, 2)
        v = self.to_v(context).view(b, context.shape[1], self.heads, -1).transpose(1, 2)
        attn = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(b, h * w, c)
        return x + self.to_out(attn).transpose(1, 2).reshape(b, c, h, w)


class Denoiser(nn.Module):
    def __init__(self, cfg: DiffusionConfig, image_channels: int, context_dim: int):
        super().__init__()
        self.cfg = cfg
        self.image_channels = image_channels
        widths = list(cfg.channels)
        self.levels = len(widths)
        temb_dim = 4 * widths[0]
        self.time_embed = nn.Sequential(nn.Linear(widths[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(2 * image_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_cross_attn = nn.ModuleDict()
        self.downsamplers = nn.ModuleList()
        cin = widths[0]
        for i, width in enumerate(widths):
            self.down_blocks.append(ResBlock(cin, width, temb_dim))
            if i > 0:
                self.down_cross_attn[str(i)] = CrossAttention(width, context_dim, cfg.heads)
            if i < self.levels - 1:
                self.downsamplers.append(nn.Conv2d(width, width, 3, stride=2, padding=1))
            cin = width

        self.mid_block1 = ResBlock(cin, cin, temb_dim)
        self.mid_self_attn = SelfAttention(cin, cfg.heads)
        self.mid_cross_attn = CrossAttention(cin, context_dim, cfg.heads)
        self.mid_block2 = ResBlock(cin, cin, temb_dim)

        self.up_blocks = nn.ModuleList()
        self.up_cross_attn = nn.ModuleDict()
        self.upsamplers = nn.ModuleList()
        for i in reversed(range(self.levels)):
            width = widths[i]
            self.up_blocks.append(ResBlock(cin + width, width, temb_dim))
            if i > 0:
                self.up_cross_attn[str(i)] = CrossAttention(width, context_dim, cfg.heads)
                self.upsamplers.append(nn.Conv2d(width, widths[i - 1], 3, padding=1))
            cin = widths[i - 1] if i > 0 else width

        self.norm_out = _norm(cin)
        self.conv_out = nn.Conv2d(cin, image_channels, 3, padding=1)

    @property
    def level_channels(self) -> list[int]:
        return list(self.cfg.channels)

    def level_sizes(self, height: int, width: int) -> list[tuple[int, int]]:
        return [(height >> i, width >> i) for i in range(self.levels)]

    @staticmethod
    def partition_of(name: str) -> str:
        return "cross_attn" if "cross_attn" in name else "base"

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        source: torch.Tensor,
        context: torch.Tensor | None = None,
        control: list[torch.Tensor] | None = None,
    ) -> torch.Tensor:
        """Without ``context`` and ``control`` this is the unconditioned denoiser"""
        temb = self.time_embed(timestep_embedding(t, self.cfg.channels[0]).to(x_t.dtype))
        h = self.conv_in(torch.cat([x_t, source], dim=1))

        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, temb)
            if context is not None and str(i) in self.down_cross_attn:
                h = self.down_cross_attn[str(i)](h, context)
            if control is not None:
                h = h + control[i]
            skips.append(h)
            if i < self.levels - 1:
                h = self.downsamplers[i](h)

        h = self.mid_block1(h, temb)
        h = self.mid_self_attn(h)
        if context is not None:
            h = self.mid_cross_attn(h, context)
        h = self.mid_block2(h, temb)

        for j, block in enumerate(self.up_blocks):
            i = self.levels - 1 - j
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if i > 0:
                if context is not None:
                    h = self.up_cross_attn[str(i)](h, context)
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamplers[j](h)

        return self.conv_out(F.silu(self.norm_out(h)))
