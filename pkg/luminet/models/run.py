import json
import os
from datetime import datetime
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, field_validator


class RunManifest(BaseModel):
    command: str
    argv: list[str] = []
    config: dict = {}
    config_hash: str
    input_hashes: dict[str, str] = {}
    checkpoint_versions: dict[str, int] = {}
    outputs: list[str] = []
    started_at: datetime = Field(default_factory=datetime.now)
    wall_clock: float = 0.0
    reproduction: bool = False

    def write(self, path: str | Path) -> Path:
        """Write atomically: temp file in the same directory, then os.replace"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.tmp")
        tmp.write_text(json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True))
        os.replace(tmp, path)
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls.model_validate_json(Path(path).read_text())


class RunSummary(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    id: int
    command: str
    config_hash: str
    input_hashes: dict[str, str]
    checkpoint_versions: dict[str, int]
    outputs: list[str]
    manifest_path: str | None = None
    wall_clock: float
    reproduction: bool
    created_at: datetime

    @field_validator("input_hashes", "checkpoint_versions", "outputs", mode="before")
    @classmethod
    def _decode_json(cls, value):
        return json.loads(value) if isinstance(value, str) else value
