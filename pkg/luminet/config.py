import hashlib
import json
import os
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from luminet.errors import UsageError

DEFAULT_HOME = Path("~/.luminet")


def luminet_home() -> Path:
    """Root for checkpoints, the run registry and service outputs"""
    return Path(os.getenv("LUMINET_HOME", str(DEFAULT_HOME))).expanduser()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class IntrinsicsConfig(_Section):
    image_size: int = Field(64, description="Working resolution (square, multiple of 8)")
    c_int: int = Field(32, description="Channels of the latent intrinsic map (full scale: 128)")
    d_light: int = Field(8, description="Lighting code dimension (full scale: 16)")
    base_channels: int = Field(32, description="Width of the first encoder stage")
    consistency_weight: float = Field(0.1, description="Weight of the same-scene intrinsic cosine term")

    @model_validator(mode="after")
    def _check_size(self):
        if self.image_size % 8:
            raise ValueError("image_size must be a multiple of 8")
        return self


class ConditioningConfig(_Section):
    c_ctrl: int = Field(128, description="Channels of the condition volume (full scale: 512)")
    n_tok: int = Field(3, description="Tokens in the light embedding")
    d_emb: int = Field(128, description="Width of each light token (full scale: 1024)")
    adaptor_widths: list[int] = Field(
        default_factory=lambda: [384, 512, 512, 512, 384],
        description="Adaptor MLP layer widths, input first (full scale: 3072,4096,4096,4096,3072)",
    )
    nonlinearity: Literal["silu", "gelu"] = Field("silu", description="Pointwise nonlinearity in the adaptor")

    @model_validator(mode="after")
    def _check_widths(self):
        if len(self.adaptor_widths) != 5:
            raise ValueError("adaptor_widths needs 5 entries (four linear layers)")
        if self.adaptor_widths[-1] != self.n_tok * self.d_emb:
            raise ValueError("adaptor output width must equal n_tok * d_emb")
        return self


class DiffusionConfig(_Section):
    T: int = Field(1000, description="Training timesteps")
    schedule: Literal["linear", "cosine"] = Field("cosine", description="Noise schedule kind")
    prediction_type: Literal["v", "epsilon"] = Field("v", description="What the denoiser predicts")
    channels: list[int] = Field(default_factory=lambda: [32, 64, 64], description="U-Net widths per level")
    heads: int = Field(4, description="Attention heads")
    sample_steps: int = Field(50, description="DDIM steps at inference")
    clip_sample: bool = Field(True, description="Clamp the x0 estimate to [-1, 1] while sampling")
    use_cross_attention: bool = Field(True, description="Feed the light embedding to cross-attention")
    use_intrinsic_control: bool = Field(True, description="Inject the latent intrinsic control branch")


class TrainConfig(_Section):
    steps: int = Field(2000, description="Optimizer steps")
    lr: float = Field(1e-4, description="AdamW learning rate (full scale: 4e-5)")
    weight_decay: float = Field(1e-2, description="AdamW decoupled weight decay")
    lr_decay: float = Field(0.9, description="Multiplicative learning-rate decay factor")
    lr_decay_every: int = Field(1000, description="Steps between learning-rate decays")
    batch_size: int = Field(8, description="Pairs per batch")
    unpaired_fraction: float = Field(0.0, description="Share of batches drawn from single-light scenes")
    num_workers: int = Field(0, description="DataLoader workers")
    seed: int = Field(0, description="Seed for initialization, batching and noise")
    checkpoint_every: int = Field(500, description="Steps between checkpoints (0 disables)")


class DatagenConfig(_Section):
    n_scenes: int = Field(200, description="Toy scenes to render")
    k_lights: int = Field(7, description="Lighting variations per scene")
    image_size: int = Field(64, description="Rendered image size")
    falloff: float = Field(1.0, description="Distance falloff constant beta")
    shininess: float = Field(16.0, description="Phong exponent")
    seed: int = Field(0, description="Scene and lighting seed")
    filter_threshold: float | None = Field(None, description="Similarity filter threshold (None disables)")
    embedder: str | None = Field(None, description="Image/text embedder factory for the filter, `module:attr`")


class VariationalConfig(_Section):
    steps: int = Field(500, description="Encoder training steps")
    lr: float = Field(1e-3, description="Adam learning rate")
    batch_size: int = Field(8, description="Images per batch")
    z_dim: int = Field(32, description="Variational latent width")
    lambda_perceptual: float = Field(0.1, description="Weight of the perceptual term")
    lambda_kl: float = Field(1e-3, description="Weight of the KL term")
    seed: int = Field(0, description="Seed for sampling and batching")


class SelectionConfig(_Section):
    nn_seeds: int = Field(0, description="Seeds to sample for nearest-neighbor selection (0 disables)")
    nn_top: int = Field(1, description="Candidates to keep")
    metric: Literal["l2", "cosine"] = Field("l2", description="Lighting-code distance")


class EvalConfig(_Section):
    n_refs: int = Field(12, description="Reference lightings per source image")
    repeats: int | None = Field(None, description="Protocol repeats (required on the command line)")
    seed: int = Field(0, description="Protocol seed (PCG64)")
    color_mode: Literal["gain", "offset"] = Field("gain", description="Single-color-vector correction")
    reference_mode: Literal["same_scene", "cross_scene"] = Field("same_scene", description="Where references come from")


class RunConfig(_Section):
    intrinsics: IntrinsicsConfig = Field(default_factory=IntrinsicsConfig)
    conditioning: ConditioningConfig = Field(default_factory=ConditioningConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    train_intrinsics: TrainConfig = Field(default_factory=TrainConfig)
    train_luminet: TrainConfig = Field(default_factory=lambda: TrainConfig(steps=20000, batch_size=16))
    datagen: DatagenConfig = Field(default_factory=DatagenConfig)
    variational: VariationalConfig = Field(default_factory=VariationalConfig)
    selection: SelectionConfig = Field(default_factory=SelectionConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)

    @classmethod
    def full_scale(cls) -> "RunConfig":
        return cls(
            intrinsics=IntrinsicsConfig(image_size=512, c_int=128, d_light=16),
            conditioning=ConditioningConfig(
                c_ctrl=512, n_tok=3, d_emb=1024, adaptor_widths=[3072, 4096, 4096, 4096, 3072]
            ),
            train_luminet=TrainConfig(lr=4e-5),
        )

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(pairs: list[str]) -> dict[str, Any]:
    """Turn ["section.key=value", ...] into a nested dict"""
    nested: dict[str, Any] = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        parts = key.strip().split(".")
        cursor = nested
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
        cursor[parts[-1]] = _parse_value(raw.strip())
    return nested


def _deep_merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_config_file(path: Path) -> dict[str, Any]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        return data
    lines = [line.strip() for line in text.splitlines()]
    return parse_overrides([line for line in lines if line and not line.startswith("#")])


def resolve_config(
    path: Path | None = None, overrides: list[str] | None = None, flags: dict[str, Any] | None = None
) -> RunConfig:
    """Default < config file < --set overrides < explicit CLI flags

    Layers are merged onto the dumped defaults so a partial section keeps the
    documented defaults of its other keys.
    """
    data: dict[str, Any] = RunConfig().model_dump()
    if path is not None:
        data = _deep_merge(data, read_config_file(path))
    if overrides:
        data = _deep_merge(data, parse_overrides(overrides))
    if flags:
        data = _deep_merge(data, flags)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise UsageError(str(e)) from e


def config_reference() -> str:
    """Markdown page listing every config key with its default"""
    lines = ["# Configuration reference", ""]
    defaults = RunConfig()
    for section_name in RunConfig.model_fields:
        section = getattr(defaults, section_name)
        lines.append(f"## {section_name}")
        lines.append("")
        lines.append("| key | default | description |")
        lines.append("| --- | --- | --- |")
        for key, field in type(section).model_fields.items():
            value = json.dumps(getattr(section, key))
            lines.append(f"| `{section_name}.{key}` | `{value}` | {field.description or ''} |")
        lines.append("")
    return "\n".join(lines)
