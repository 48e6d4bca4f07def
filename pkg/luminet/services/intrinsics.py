"""Latent intrinsic encoder/decoder.

The encoder factors an image into an illumination-invariant map at 1/8
resolution and a low-dimensional lighting code. The decoder rebuilds an
image from any (map, code) pair, so swapping codes between two images of one
scene relights it.
"""

import logging
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from luminet.config import IntrinsicsConfig, TrainConfig
from luminet.errors import ShapeError
from luminet.models.dataset import DatasetManifest
from luminet.services.checkpoints import read_checkpoint, write_checkpoint
from luminet.services.imaging import DOWNSAMPLE_FACTOR, check_image, to_signed, to_unit
from luminet.services.pairs import ScenePairs, pair_loader
from luminet.services.training import LossLog, make_optimizer

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "intrinsics"
CHECKPOINT_VERSION = 1


def _conv(cin: int, cout: int, stride: int = 1, padding_mode: str = "zeros") -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode=padding_mode)


class LightModulation(nn.Module):
    """Per-channel scale and shift predicted from the lighting code"""

    def __init__(self, d_light: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(d_light, 2 * channels)

    def forward(self, h: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        scale, shift = self.proj(code)[:, :, None, None].chunk(2, dim=1)
        return h * (1.0 + scale) + shift


class UpPath(nn.Module):
    """Three nearest-neighbor x2 stages from the map back to image resolution.

    With ``d_light`` set, every conv input is modulated by the lighting code.
    Replicate padding keeps a spatially constant input constant.
    """

    def __init__(self, c_in: int, widths: list[int], out_channels: int, d_light: int | None = None):
        super().__init__()
        self.proj = nn.Conv2d(c_in, widths[0], 1)
        self.stages = nn.ModuleList()
        self.modulations = nn.ModuleList() if d_light else None
        cin = widths[0]
        for cout in widths:
            if self.modulations is not None:
                self.modulations.append(LightModulation(d_light, cin))
                self.modulations.append(LightModulation(d_light, cout))
            self.stages.append(
                nn.ModuleList([_conv(cin, cout, padding_mode="replicate"), _conv(cout, cout, padding_mode="replicate")])
            )
            cin = cout
        self.head = _conv(cin, out_channels, padding_mode="replicate")

    def forward(self, intrinsic: torch.Tensor, code: torch.Tensor | None = None) -> torch.Tensor:
        h = self.proj(intrinsic)
        for k, (conv_a, conv_b) in enumerate(self.stages):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            if self.modulations is not None:
                h = self.modulations[2 * k](h, code)
            h = F.silu(conv_a(h))
            if self.modulations is not None:
                h = self.modulations[2 * k + 1](h, code)
            h = F.silu(conv_b(h))
        return self.head(h)


class IntrinsicsModel(nn.Module):
    """Encoder to (IntrinsicMap, LightCode) and a decoder that renders any pair back.

    The decoder predicts a reflectance image from the map alone and a gray
    shading plus additive highlight from the map modulated by the code; the
    output is ``reflectance * shading + highlight``.
    """

    version = CHECKPOINT_VERSION
    downsample_factor = DOWNSAMPLE_FACTOR

    def __init__(self, cfg: IntrinsicsConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        widths = [b, 2 * b, 4 * b]

        self.stem = _conv(3, b)
        self.down = nn.ModuleList()
        cin = b
        for cout in widths:
            self.down.append(nn.ModuleList([_conv(cin, cout, stride=2), _conv(cout, cout)]))
            cin = cout
        self.intrinsic_head = nn.Conv2d(cin, cfg.c_int, 1)
        self.light_head = nn.Linear(cin, cfg.d_light)

        self.reflectance = UpPath(cfg.c_int, widths[::-1], 3)
        self.shading = UpPath(cfg.c_int, widths[::-1], 2, d_light=cfg.d_light)

    def encode_batch(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Signed BCHW images -> (B, C_int, H/8, W/8) maps and (B, d_light) codes"""
        height, width = x.shape[-2:]
        if x.shape[1] != 3 or height % self.downsample_factor or width % self.downsample_factor:
            raise ShapeError(f"cannot encode input of shape {tuple(x.shape)}")
        h = F.silu(self.stem(x))
        for strided, conv in self.down:
            h = F.silu(strided(h))
            h = F.silu(conv(h))
        intrinsic = self.intrinsic_head(h)
        code = self.light_head(h.mean(dim=(2, 3)))
        return intrinsic, code

    def decode_batch(self, intrinsic: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        """(B, C_int, Hf, Wf) maps and (B, d_light) codes -> signed BCHW images, unclamped"""
        if intrinsic.ndim != 4 or intrinsic.shape[1] != self.cfg.c_int:
            raise ShapeError(f"intrinsic map of shape {tuple(intrinsic.shape)} does not match c_int={self.cfg.c_int}")
        if code.ndim != 2 or code.shape[1] != self.cfg.d_light or code.shape[0] != intrinsic.shape[0]:
            raise ShapeError(f"light code of shape {tuple(code.shape)} does not match d_light={self.cfg.d_light}")
        reflectance = torch.sigmoid(self.reflectance(intrinsic))
        shading, highlight = self.shading(intrinsic, code).chunk(2, dim=1)
        return to_signed(reflectance * F.softplus(shading) + highlight)

    def header(self) -> dict:
        return {
            "kind": CHECKPOINT_KIND,
            "version": self.version,
            "C_int": self.cfg.c_int,
            "d_light": self.cfg.d_light,
            "downsample_factor": self.downsample_factor,
            "config": self.cfg.model_dump(),
        }

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        return write_checkpoint(path, self.header(), {"model": self.state_dict(), **(extra or {})})

    @classmethod
    def load(cls, path: str | Path) -> "IntrinsicsModel":
        header, payload = read_checkpoint(path, kind=CHECKPOINT_KIND, version=CHECKPOINT_VERSION)
        model = cls(IntrinsicsConfig.model_validate(header["config"]))
        model.load_state_dict(payload["model"])
        return model.eval()


@torch.no_grad()
def encode(model: IntrinsicsModel, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """ImageTensor -> (Hf x Wf x C_int IntrinsicMap, d_light LightCode)"""
    check_image(img, model.downsample_factor)
    x = to_signed(img.permute(2, 0, 1)[None].to(next(model.parameters()).dtype))
    intrinsic, code = model.encode_batch(x)
    return intrinsic[0].permute(1, 2, 0), code[0]


@torch.no_grad()
def relight_decode(model: IntrinsicsModel, intrinsic: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
    """(IntrinsicMap, LightCode) -> ImageTensor clamped to [0, 1] at 8x the map size"""
    if intrinsic.ndim != 3:
        raise ShapeError(f"expected an Hf x Wf x C_int map, got shape {tuple(intrinsic.shape)}")
    if code.ndim != 1:
        raise ShapeError(f"expected a 1-D light code, got shape {tuple(code.shape)}")
    out = model.decode_batch(intrinsic.permute(2, 0, 1)[None], code[None])
    return to_unit(out)[0].permute(1, 2, 0)


def intrinsic_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean over channels of the cosine between two maps' spatial vectors.

    Accepts (B, C, Hf, Wf) batches or single Hf x Wf x C maps.
    """
    if a.shape != b.shape:
        raise ShapeError(f"intrinsic maps {tuple(a.shape)} and {tuple(b.shape)} differ")
    if a.ndim == 3:
        a, b = a.permute(2, 0, 1)[None], b.permute(2, 0, 1)[None]
    return F.cosine_similarity(a.flatten(2), b.flatten(2), dim=-1, eps=1e-8).mean()


def swap_loss(model: IntrinsicsModel, x_a: torch.Tensor, x_b: torch.Tensor) -> torch.Tensor:
    """Cross-lighting swap objective on a same-scene pair of signed batches.

    Two swap terms, one self term, and ``consistency_weight`` times the
    cosine distance between the pair's intrinsic maps.
    """
    intrinsic_a, code_a = model.encode_batch(x_a)
    intrinsic_b, code_b = model.encode_batch(x_b)
    loss = (
        F.mse_loss(model.decode_batch(intrinsic_a, code_b), x_b)
        + F.mse_loss(model.decode_batch(intrinsic_b, code_a), x_a)
        + F.mse_loss(model.decode_batch(intrinsic_a, code_a), x_a)
    )
    if model.cfg.consistency_weight:
        loss = loss + model.cfg.consistency_weight * (1.0 - intrinsic_similarity(intrinsic_a, intrinsic_b))
    return loss


class IntrinsicsTrainer:
    """Trains an IntrinsicsModel on same-scene pairs; resumable from its checkpoint"""

    def __init__(
        self,
        model: IntrinsicsModel,
        cfg: TrainConfig,
        loss_log: LossLog | None = None,
        checkpoint_path: str | Path | None = None,
    ):
        self.model = model
        self.cfg = cfg
        self.loss_log = loss_log or LossLog()
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.optimizer, self.scheduler = make_optimizer(model.parameters(), cfg)
        self.step = 0

    def train(self, dataset: DatasetManifest, steps: int | None = None) -> IntrinsicsModel:
        steps = self.cfg.steps if steps is None else steps
        remaining = steps - self.step
        pairs = ScenePairs(
            dataset,
            self.model.cfg.image_size,
            n_items=max(remaining, 0) * self.cfg.batch_size,
            seed=self.cfg.seed + self.step,
        )
        self.model.train()
        dtype = next(self.model.parameters()).dtype
        progress = tqdm(pair_loader(pairs, self.cfg.batch_size, self.cfg.num_workers), total=remaining, disable=None)
        for x_a, x_b in progress:
            self.step += 1
            loss = swap_loss(self.model, to_signed(x_a.to(dtype)), to_signed(x_b.to(dtype)))
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            lr = self.optimizer.param_groups[0]["lr"]
            self.optimizer.step()
            self.scheduler.step()
            self.loss_log.append(self.step, loss.item(), lr)
            progress.set_postfix(loss=f"{loss.item():.4f}")
            if self.checkpoint_path and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save()
        self.model.eval()
        if self.checkpoint_path:
            self.save()
        logger.info("Intrinsics training stopped at step %d", self.step)
        return self.model

    def save(self) -> Path:
        return self.model.save(
            self.checkpoint_path,
            extra={
                "optimizer": self.optimizer.state_dict(),
                "scheduler": self.scheduler.state_dict(),
                "train_config": self.cfg.model_dump(),
                "step": self.step,
            },
        )

    @classmethod
    def resume(cls, path: str | Path, cfg: TrainConfig, loss_log: LossLog | None = None) -> "IntrinsicsTrainer":
        header, payload = read_checkpoint(path, kind=CHECKPOINT_KIND, version=CHECKPOINT_VERSION)
        model = IntrinsicsModel(IntrinsicsConfig.model_validate(header["config"]))
        model.load_state_dict(payload["model"])
        trainer = cls(model, cfg, loss_log=loss_log, checkpoint_path=path)
        if "optimizer" in payload:
            trainer.optimizer.load_state_dict(payload["optimizer"])
            trainer.scheduler.load_state_dict(payload["scheduler"])
            trainer.step = int(payload["step"])
        return trainer


def train_intrinsics(
    dataset: DatasetManifest,
    cfg: TrainConfig,
    model_cfg: IntrinsicsConfig | None = None,
    loss_log: LossLog | None = None,
    checkpoint_path: str | Path | None = None,
) -> IntrinsicsModel:
    torch.manual_seed(cfg.seed)
    model = IntrinsicsModel(model_cfg or IntrinsicsConfig())
    return IntrinsicsTrainer(model, cfg, loss_log=loss_log, checkpoint_path=checkpoint_path).train(dataset)
