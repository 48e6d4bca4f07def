import json
from pathlib import Path

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from luminet.errors import ShapeError

METRIC_KEYS = ("rmse_raw", "ssim_raw", "rmse_cc", "ssim_cc")
UNIT_TOLERANCE = 1e-4


class PairRecord(BaseModel):
    repeat: int
    scene: str
    src_light: int
    tgt_light: int
    ref_scene: str | None = None
    rmse_raw: float
    ssim_raw: float
    rmse_cc: float
    ssim_cc: float
    color_vector: list[float]


def mean_metrics(records: list[PairRecord]) -> dict[str, float]:
    if not records:
        return {key: float("nan") for key in METRIC_KEYS}
    return {key: float(np.mean([getattr(r, key) for r in records])) for key in METRIC_KEYS}


class RepeatAggregate(BaseModel):
    repeat: int
    rmse_raw: float
    ssim_raw: float
    rmse_cc: float
    ssim_cc: float


class EvalReport(BaseModel):
    records: list[PairRecord] = []
    aggregates: dict[str, float] = {}
    per_repeat: list[RepeatAggregate] = []
    metadata: dict = {}

    @classmethod
    def from_records(cls, records: list[PairRecord], metadata: dict) -> "EvalReport":
        repeats = sorted({r.repeat for r in records})
        per_repeat = [
            RepeatAggregate(repeat=i, **mean_metrics([r for r in records if r.repeat == i])) for i in repeats
        ]
        return cls(records=records, aggregates=mean_metrics(records), per_repeat=per_repeat, metadata=metadata)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(self.to_json())
        tmp.replace(path)
        return path

    @classmethod
    def read(cls, path: str | Path) -> "EvalReport":
        return cls.model_validate_json(Path(path).read_text())


class NormalMap(BaseModel):
    """H x W x 3 unit normals; ``mask`` marks valid pixels (all valid when omitted)"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    normals: torch.Tensor
    mask: torch.Tensor | None = None

    @field_validator("normals")
    @classmethod
    def _check_normals(cls, normals: torch.Tensor) -> torch.Tensor:
        if normals.ndim != 3 or normals.shape[-1] != 3:
            raise ShapeError(f"expected an H x W x 3 normal map, got shape {tuple(normals.shape)}")
        return normals

    @model_validator(mode="after")
    def _check_unit(self):
        if self.mask is not None and tuple(self.mask.shape) != tuple(self.normals.shape[:2]):
            raise ShapeError(f"mask shape {tuple(self.mask.shape)} does not match normals")
        lengths = torch.linalg.vector_norm(self.normals.double(), dim=-1)
        if ((lengths - 1.0).abs() > UNIT_TOLERANCE)[self.valid_mask()].any():
            raise ShapeError("valid normals must have unit length")
        return self

    def valid_mask(self) -> torch.Tensor:
        if self.mask is None:
            return torch.ones(self.normals.shape[:2], dtype=torch.bool)
        return self.mask.bool()


class RankingQuestion(BaseModel):
    metric: str
    ranks: dict[str, int]


class RankingResponse(BaseModel):
    participant_id: str
    questions: list[RankingQuestion] = Field(default_factory=list)
