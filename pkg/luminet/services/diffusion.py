"""Conditioned diffusion: training on same-scene pairs, DDIM sampling, relighting.

Only the control branch, the cross-attention blocks and the adaptor are
trained on relighting pairs. The rest of the denoiser (the ``base``
partition) is pretrained separately and stays bitwise frozen.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from luminet.config import RunConfig, TrainConfig
from luminet.errors import FrozenPartitionError, ModelNotLoadedError, UsageError
from luminet.models.dataset import DatasetManifest
from luminet.models.relight import RelightRequest
from luminet.services.checkpoints import read_checkpoint, write_checkpoint
from luminet.services.conditioning import AdaptorMLP, ControlBranch, expand_and_concat_batch
from luminet.services.denoiser import PARTITIONS, Denoiser
from luminet.services.enhancer import apply_enhancer
from luminet.services.imaging import PixelCodec, check_image, from_batch, to_batch, to_signed
from luminet.services.intrinsics import IntrinsicsModel
from luminet.services.intrinsics import encode as encode_intrinsics
from luminet.services.pairs import ScenePairs, pair_loader
from luminet.services.schedule import (
    NoiseSchedule,
    make_schedule,
    prediction_target,
    q_sample,
    split_prediction,
)
from luminet.services.training import LossLog, make_optimizer

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "luminet"
CHECKPOINT_VERSION = 1


@dataclass
class LuminetModels:
    config: RunConfig
    schedule: NoiseSchedule
    intrinsics: IntrinsicsModel | None = None
    denoiser: Denoiser | None = None
    control: ControlBranch | None = None
    adaptor: AdaptorMLP | None = None
    codec: PixelCodec = field(default_factory=PixelCodec)

    @classmethod
    def build(cls, config: RunConfig, intrinsics: IntrinsicsModel | None = None, seed: int = 0) -> "LuminetModels":
        torch.manual_seed(seed)
        codec = PixelCodec()
        denoiser = Denoiser(config.diffusion, codec.channels, config.conditioning.d_emb)
        control = ControlBranch.from_config(config.intrinsics, config.conditioning, denoiser.level_channels)
        adaptor = AdaptorMLP(config.conditioning, config.intrinsics.d_light)
        if intrinsics is None:
            intrinsics = IntrinsicsModel(config.intrinsics)
        return cls(
            config=config,
            schedule=make_schedule(config.diffusion.T, config.diffusion.schedule),
            intrinsics=intrinsics.eval().requires_grad_(False),
            denoiser=denoiser,
            control=control,
            adaptor=adaptor,
            codec=codec,
        )

    def require(self) -> None:
        missing = [name for name in ("intrinsics", "denoiser", "control", "adaptor") if getattr(self, name) is None]
        if missing:
            raise ModelNotLoadedError(f"models not loaded: {', '.join(missing)}")

    def modules(self) -> dict[str, nn.Module]:
        self.require()
        return {"denoiser": self.denoiser, "control": self.control, "adaptor": self.adaptor}

    def named_parameters(self):
        for prefix, module in self.modules().items():
            for name, p in module.named_parameters():
                yield f"{prefix}.{name}", p

    def partition_map(self) -> dict[str, str]:
        """Every trainable-model parameter -> exactly one of base/control/cross_attn/adaptor"""
        labels = {}
        for name, _ in self.named_parameters():
            prefix, rest = name.split(".", 1)
            labels[name] = Denoiser.partition_of(rest) if prefix == "denoiser" else prefix
        return labels

    def partition_parameters(self, *partitions: str) -> list[tuple[str, nn.Parameter]]:
        labels = self.partition_map()
        return [(name, p) for name, p in self.named_parameters() if labels[name] in partitions]

    def set_trainable(self, *partitions: str) -> list[nn.Parameter]:
        unknown = set(partitions) - set(PARTITIONS)
        if unknown:
            raise UsageError(f"unknown partitions {sorted(unknown)}")
        labels = self.partition_map()
        trainable = []
        for name, p in self.named_parameters():
            p.requires_grad_(labels[name] in partitions)
            if p.requires_grad:
                trainable.append(p)
        return trainable

    def train(self, mode: bool = True) -> "LuminetModels":
        for module in self.modules().values():
            module.train(mode)
        return self

    def eval(self) -> "LuminetModels":
        return self.train(False)

    def to(self, dtype: torch.dtype) -> "LuminetModels":
        for module in [*self.modules().values(), self.intrinsics]:
            module.to(dtype)
        return self

    def header(self) -> dict:
        return {
            "kind": CHECKPOINT_KIND,
            "version": CHECKPOINT_VERSION,
            "partition_map": self.partition_map(),
            "schedule": self.schedule.kind,
            "T": self.schedule.T,
            "resolution": self.config.intrinsics.image_size,
            "prediction_type": self.config.diffusion.prediction_type,
            "adaptor_nonlinearity": self.config.conditioning.nonlinearity,
            "intrinsics": self.intrinsics.header(),
            "config": self.config.model_dump(mode="json"),
        }

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        payload = {prefix: module.state_dict() for prefix, module in self.modules().items()}
        payload["intrinsics"] = self.intrinsics.state_dict()
        return write_checkpoint(path, self.header(), {**payload, **(extra or {})})

    @classmethod
    def load(cls, path: str | Path) -> "LuminetModels":
        models, _, _ = cls._load_with_payload(path)
        return models

    @classmethod
    def _load_with_payload(cls, path: str | Path) -> tuple["LuminetModels", dict, dict]:
        header, payload = read_checkpoint(path, kind=CHECKPOINT_KIND, version=CHECKPOINT_VERSION)
        config = RunConfig.model_validate(header["config"])
        intrinsics = IntrinsicsModel(config.intrinsics)
        intrinsics.load_state_dict(payload["intrinsics"])
        models = cls.build(config, intrinsics=intrinsics)
        for prefix, module in models.modules().items():
            module.load_state_dict(payload[prefix])
        return models.eval(), header, payload


def _conditions(
    models: LuminetModels, source_signed: torch.Tensor, code: torch.Tensor, level_sizes: list[tuple[int, int]]
) -> tuple[list[torch.Tensor] | None, torch.Tensor | None]:
    """Control residues and cross-attention context for a batch of sources and target codes"""
    cfg = models.config.diffusion
    residues = context = None
    if cfg.use_intrinsic_control:
        with torch.no_grad():
            intrinsic, _ = models.intrinsics.encode_batch(source_signed)
        _, residues = models.control(expand_and_concat_batch(intrinsic, code), level_sizes)
    if cfg.use_cross_attention:
        context = models.adaptor(code)
    return residues, context


def diffusion_loss(
    models: LuminetModels,
    source: torch.Tensor,
    target: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    conditioned: bool = True,
) -> torch.Tensor:
    """Mean squared prediction error for [0, 1] BCHW same-scene batches at timesteps ``t``"""
    models.require()
    sched = models.schedule
    z_source = models.codec.encode(source)
    z_target = models.codec.encode(target)
    x_t = q_sample(z_target, t, eps, sched)
    residues = context = None
    if conditioned:
        with torch.no_grad():
            _, code = models.intrinsics.encode_batch(to_signed(target))
        residues, context = _conditions(models, to_signed(source), code, models.denoiser.level_sizes(*x_t.shape[-2:]))
    pred = models.denoiser(x_t, t, z_source, context=context, control=residues)
    return F.mse_loss(pred, prediction_target(z_target, eps, t, sched, models.config.diffusion.prediction_type))


def assert_frozen(models: LuminetModels, optimizer: torch.optim.Optimizer, frozen: tuple[str, ...] = ("base",)) -> None:
    held = {id(p) for group in optimizer.param_groups for p in group["params"]}
    for name, p in models.partition_parameters(*frozen):
        if p.requires_grad or id(p) in held:
            raise FrozenPartitionError(f"frozen parameter {name} is trainable")


def training_step(
    models: LuminetModels,
    batch: tuple[torch.Tensor, torch.Tensor],
    sched: NoiseSchedule,
    rng: torch.Generator,
    optimizer: torch.optim.Optimizer,
    frozen: tuple[str, ...] = ("base",),
    conditioned: bool = True,
) -> float:
    """One optimizer step on a (source, target) batch; frozen partitions must stay out of the optimizer"""
    assert_frozen(models, optimizer, frozen)
    source, target = batch
    dtype = next(models.denoiser.parameters()).dtype
    source, target = source.to(dtype), target.to(dtype)
    t = sched.sample_timesteps(source.shape[0], generator=rng)
    eps = torch.randn(target.shape, generator=rng, dtype=dtype)
    loss = diffusion_loss(models, source, target, t, eps, conditioned=conditioned)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item()


class LuminetTrainer:
    """Trains one stage of the denoiser stack.

    ``stage="base"`` pretrains the base partition without conditions (source
    fed a random same-scene image); ``stage="luminet"`` trains control,
    cross-attention and adaptor with the base frozen.
    """

    STAGES = {
        "base": (("base",), ("control", "cross_attn", "adaptor")),
        "luminet": (("control", "cross_attn", "adaptor"), ("base",)),
    }

    def __init__(
        self,
        models: LuminetModels,
        cfg: TrainConfig,
        stage: str = "luminet",
        loss_log: LossLog | None = None,
        checkpoint_path: str | Path | None = None,
    ):
        if stage not in self.STAGES:
            raise UsageError(f"unknown training stage {stage!r}")
        self.models = models
        self.cfg = cfg
        self.stage = stage
        self.trainable, self.frozen = self.STAGES[stage]
        self.loss_log = loss_log or LossLog()
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.optimizer, self.scheduler = make_optimizer(models.set_trainable(*self.trainable), cfg)
        self.rng = torch.Generator().manual_seed(cfg.seed)
        self.step = 0

    def training_step(self, batch: tuple[torch.Tensor, torch.Tensor]) -> float:
        return training_step(
            self.models,
            batch,
            self.models.schedule,
            self.rng,
            self.optimizer,
            frozen=self.frozen,
            conditioned=self.stage == "luminet",
        )

    def train(self, dataset: DatasetManifest, steps: int | None = None) -> LuminetModels:
        steps = self.cfg.steps if steps is None else steps
        remaining = max(steps - self.step, 0)
        pairs = ScenePairs(
            dataset,
            self.models.config.intrinsics.image_size,
            n_items=remaining * self.cfg.batch_size,
            seed=self.cfg.seed + self.step,
            distinct=self.stage == "luminet",
            unpaired_fraction=self.cfg.unpaired_fraction,
        )
        self.models.train()
        progress = tqdm(pair_loader(pairs, self.cfg.batch_size, self.cfg.num_workers), total=remaining, disable=None)
        for batch in progress:
            self.step += 1
            lr = self.optimizer.param_groups[0]["lr"]
            loss = self.training_step(batch)
            self.scheduler.step()
            self.loss_log.append(self.step, loss, lr)
            progress.set_postfix(loss=f"{loss:.4f}")
            if self.checkpoint_path and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save()
        self.models.eval()
        if self.checkpoint_path:
            self.save()
        logger.info("Stage %s stopped at step %d", self.stage, self.step)
        return self.models

    def save(self) -> Path:
        return self.models.save(
            self.checkpoint_path,
            extra={
                "optimizer": self.optimizer.state_dict(),
                "scheduler": self.scheduler.state_dict(),
                "rng": self.rng.get_state(),
                "stage": self.stage,
                "step": self.step,
            },
        )

    @classmethod
    def resume(
        cls,
        path: str | Path,
        cfg: TrainConfig,
        stage: str = "luminet",
        loss_log: LossLog | None = None,
        checkpoint_path: str | Path | None = None,
    ) -> "LuminetTrainer":
        """Continue a stage from its checkpoint; a checkpoint from the other stage starts this one at step 0"""
        models, _, payload = LuminetModels._load_with_payload(path)
        trainer = cls(models, cfg, stage=stage, loss_log=loss_log, checkpoint_path=checkpoint_path or path)
        if payload.get("stage") == stage and "optimizer" in payload:
            trainer.optimizer.load_state_dict(payload["optimizer"])
            trainer.scheduler.load_state_dict(payload["scheduler"])
            trainer.rng.set_state(payload["rng"])
            trainer.step = int(payload["step"])
        return trainer


def pretrain_base(models: LuminetModels, dataset: DatasetManifest, cfg: TrainConfig, **kwargs) -> LuminetModels:
    return LuminetTrainer(models, cfg, stage="base", **kwargs).train(dataset)


def ddim_step(
    pred: torch.Tensor,
    x_t: torch.Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    prediction_type: str = "v",
    clip_sample: bool = False,
) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from t to t_prev"""
    x0_hat, eps_hat = split_prediction(pred, x_t, t, sched, prediction_type)
    if clip_sample:
        x0_hat = x0_hat.clamp(-1.0, 1.0)
    a_prev, s_prev = sched.coefficients(t_prev, x_t)
    return a_prev * x0_hat + s_prev * eps_hat


@torch.no_grad()
def ddim_sample(
    models: LuminetModels,
    source: torch.Tensor,
    target_code: torch.Tensor,
    target_embedding: torch.Tensor | None,
    steps: int = 50,
    seed: int = 0,
) -> torch.Tensor:
    """Sample the source scene under the target lighting; the seed only sets the initial noise"""
    models.require()
    check_image(source)
    cfg = models.config.diffusion
    sched = models.schedule
    dtype = next(models.denoiser.parameters()).dtype
    src = to_batch(source).to(dtype)
    z_source = models.codec.encode(src)
    level_sizes = models.denoiser.level_sizes(*z_source.shape[-2:])

    residues = None
    if cfg.use_intrinsic_control:
        intrinsic, _ = models.intrinsics.encode_batch(to_signed(src))
        _, residues = models.control(expand_and_concat_batch(intrinsic, target_code[None].to(dtype)), level_sizes)
    context = None
    if cfg.use_cross_attention and target_embedding is not None:
        context = target_embedding[None].to(dtype)

    generator = torch.Generator().manual_seed(seed)
    x = torch.randn(z_source.shape, generator=generator, dtype=dtype)
    timesteps = sched.ddim_timesteps(steps)
    for t, t_prev in zip(timesteps[:-1], timesteps[1:]):
        t_batch = torch.full((x.shape[0],), t, dtype=torch.long)
        pred = models.denoiser(x, t_batch, z_source, context=context, control=residues)
        x = ddim_step(pred, x, t, t_prev, sched, cfg.prediction_type, cfg.clip_sample)
    return from_batch(models.codec.decode(x))[0]


@torch.no_grad()
def relight(models: LuminetModels, req: RelightRequest) -> torch.Tensor:
    """Source scene under the target image's lighting"""
    models.require()
    dtype = next(models.denoiser.parameters()).dtype
    _, target_code = encode_intrinsics(models.intrinsics, req.target.to(dtype))
    embedding = models.adaptor(target_code[None])[0]
    image = ddim_sample(models, req.source, target_code, embedding, steps=req.steps, seed=req.seed)
    return apply_enhancer(req.enhancer, image)
