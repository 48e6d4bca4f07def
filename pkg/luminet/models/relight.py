from typing import Any

import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator

from luminet.services.imaging import check_image


class RelightRequest(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    source: torch.Tensor
    target: torch.Tensor
    seed: int = 0
    steps: int = Field(50, ge=1)
    enhancer: Any | None = None

    @field_validator("source", "target")
    @classmethod
    def _legal_image(cls, img: torch.Tensor) -> torch.Tensor:
        check_image(img)
        return img


class Candidate(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    seed: int
    image: torch.Tensor
    code: torch.Tensor
    distance: float = 0.0
