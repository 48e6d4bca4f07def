import torch
import torch.nn.functional as F
from torch import nn

from luminet.config import ConditioningConfig, IntrinsicsConfig
from luminet.errors import ShapeError

_ACTIVATIONS = {"silu": nn.SiLU, "gelu": nn.GELU}


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def expand_and_concat_batch(intrinsic: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
    """(B, C_int, Hf, Wf) and (B, d) -> (B, C_int + d, Hf, Wf) with the code broadcast spatially"""
    if intrinsic.ndim != 4 or code.ndim != 2 or code.shape[0] != intrinsic.shape[0]:
        raise ShapeError(f"cannot concat map {tuple(intrinsic.shape)} with code {tuple(code.shape)}")
    planes = code[:, :, None, None].expand(-1, -1, *intrinsic.shape[-2:])
    return torch.cat([intrinsic, planes.to(intrinsic.dtype)], dim=1)


def expand_and_concat(intrinsic: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
    """Hf x Wf x C_int map and d_light code -> Hf x Wf x (C_int + d_light)"""
    if intrinsic.ndim != 3 or code.ndim != 1:
        raise ShapeError(f"cannot concat map {tuple(intrinsic.shape)} with code {tuple(code.shape)}")
    out = expand_and_concat_batch(intrinsic.permute(2, 0, 1)[None], code[None])
    return out[0].permute(1, 2, 0)


class ControlBranch(nn.Module):
    """Latent intrinsic control branch.

    Three 3x3 convs (the middle one stride 2) turn the concatenated map into
    the condition volume at half its resolution. One zero-initialized 1x1
    projection per denoiser level turns the volume into that level's residue,
    so an untrained branch injects exact zeros.
    """

    def __init__(self, in_channels: int, c_ctrl: int, level_channels: list[int]):
        super().__init__()
        self.in_channels = in_channels
        hidden = max(c_ctrl // 2, 1)
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(in_channels, hidden, 3, padding=1),
                nn.Conv2d(hidden, c_ctrl, 3, stride=2, padding=1),
                nn.Conv2d(c_ctrl, c_ctrl, 3, padding=1),
            ]
        )
        self.projections = nn.ModuleList([zero_module(nn.Conv2d(c_ctrl, ch, 1)) for ch in level_channels])

    @classmethod
    def from_config(cls, intrinsics: IntrinsicsConfig, cfg: ConditioningConfig, level_channels: list[int]):
        return cls(intrinsics.c_int + intrinsics.d_light, cfg.c_ctrl, level_channels)

    def forward(
        self, concat: torch.Tensor, level_sizes: list[tuple[int, int]] | None = None
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if concat.ndim != 4 or concat.shape[1] != self.in_channels:
            raise ShapeError(f"control branch expects {self.in_channels} channels, got shape {tuple(concat.shape)}")
        h = concat
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.silu(h)
        volume = h
        residues = []
        for proj, size in zip(self.projections, level_sizes or []):
            resized = volume if tuple(volume.shape[-2:]) == tuple(size) else F.interpolate(
                volume, size=size, mode="bilinear", align_corners=False
            )
            residues.append(proj(resized))
        return volume, residues


def control_forward(
    branch: ControlBranch, concat: torch.Tensor, level_sizes: list[tuple[int, int]] | None = None
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Hf x Wf x (C_int + d_light) -> (Hf/2 x Wf/2 x C_ctrl volume, per-level BCHW residues)"""
    if concat.ndim != 3:
        raise ShapeError(f"expected an Hf x Wf x C tensor, got shape {tuple(concat.shape)}")
    volume, residues = branch(concat.permute(2, 0, 1)[None], level_sizes)
    return volume[0].permute(1, 2, 0), residues


def rescale_code(code: torch.Tensor, width: int) -> torch.Tensor:
    """Tile the code along its last axis to ``width``: out[..., k] == code[..., k % d]"""
    d = code.shape[-1]
    if width % d:
        raise ShapeError(f"light code dimension {d} does not divide adaptor input width {width}")
    repeats = [1] * (code.ndim - 1) + [width // d]
    return code.repeat(*repeats)


class AdaptorMLP(nn.Module):
    """Four linear layers lifting a tiled lighting code to the cross-attention tokens"""

    def __init__(self, cfg: ConditioningConfig, d_light: int):
        super().__init__()
        widths = cfg.adaptor_widths
        if widths[0] % d_light:
            raise ShapeError(f"light code dimension {d_light} does not divide adaptor input width {widths[0]}")
        self.n_tok = cfg.n_tok
        self.d_emb = cfg.d_emb
        self.input_width = widths[0]
        self.nonlinearity = cfg.nonlinearity
        layers: list[nn.Module] = []
        for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
            layers.append(nn.Linear(cin, cout))
            if i < len(widths) - 2:
                layers.append(_ACTIVATIONS[cfg.nonlinearity]())
        self.net = nn.Sequential(*layers)

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        """(B, d_light) -> (B, n_tok, d_emb)"""
        out = self.net(rescale_code(codes, self.input_width))
        return out.view(codes.shape[0], self.n_tok, self.d_emb)


@torch.no_grad()
def adapt(adaptor: AdaptorMLP, code: torch.Tensor) -> torch.Tensor:
    """LightCode -> n_tok x d_emb LightEmbedding"""
    if code.ndim != 1:
        raise ShapeError(f"expected a 1-D light code, got shape {tuple(code.shape)}")
    return adaptor(code[None])[0]
