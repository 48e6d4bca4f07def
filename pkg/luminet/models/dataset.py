import json
from collections import defaultdict
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, Field

from luminet.errors import ManifestError


class LightingParams(BaseModel):
    ambient: float = Field(ge=0.0, le=1.0)
    lamp_states: list[float] = []
    specular_strength: float = Field(0.0, ge=0.0)
    shininess: float = Field(16.0, gt=0.0)


class ManifestRecord(BaseModel):
    scene: str
    light: int
    path: str
    params: dict[str, Any] | None = None


class DatasetManifest(BaseModel):
    """Scene-grouped image records; ``root`` anchors relative paths"""

    records: list[ManifestRecord] = []
    root: Path | None = None
    warnings: list[str] = []

    def by_scene(self) -> dict[str, list[ManifestRecord]]:
        groups: dict[str, list[ManifestRecord]] = defaultdict(list)
        for record in self.records:
            groups[record.scene].append(record)
        return {scene: sorted(groups[scene], key=lambda r: r.light) for scene in sorted(groups)}

    def paired_scenes(self) -> dict[str, list[ManifestRecord]]:
        return {scene: recs for scene, recs in self.by_scene().items() if len(recs) >= 2}

    def lookup(self, scene: str, light: int) -> ManifestRecord:
        for record in self.records:
            if record.scene == scene and record.light == light:
                return record
        raise ManifestError(f"no record for scene {scene!r} light {light}")

    def resolve(self, record: ManifestRecord) -> Path:
        path = Path(record.path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def merge(self, other: "DatasetManifest") -> "DatasetManifest":
        """Combine two manifests; paths become absolute so both roots keep resolving"""
        records = [r.model_copy(update={"path": str(self.resolve(r))}) for r in self.records]
        records += [r.model_copy(update={"path": str(other.resolve(r))}) for r in other.records]
        return DatasetManifest(records=records, warnings=self.warnings + other.warnings)

    def subset(self, scenes: set[str]) -> "DatasetManifest":
        return DatasetManifest(records=[r for r in self.records if r.scene in scenes], root=self.root)

    def split_scenes(self, n_holdout: int, seed: int = 0) -> tuple["DatasetManifest", "DatasetManifest"]:
        scenes = list(self.by_scene())
        if not 0 <= n_holdout <= len(scenes):
            raise ManifestError(f"cannot hold out {n_holdout} of {len(scenes)} scenes")
        rng = np.random.Generator(np.random.PCG64(seed))
        held = {scenes[i] for i in rng.permutation(len(scenes))[:n_holdout]}
        return self.subset(set(scenes) - held), self.subset(held)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w") as f:
            for record in self.records:
                f.write(json.dumps(record.model_dump(), sort_keys=True) + "\n")
            for warning in self.warnings:
                f.write(json.dumps({"warning": warning}) + "\n")
        tmp.replace(path)
        return path

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"manifest {path} does not exist")
        records, warnings = [], []
        with open(path) as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                    if isinstance(entry, dict) and entry.keys() == {"warning"}:
                        warnings.append(str(entry["warning"]))
                    else:
                        records.append(ManifestRecord.model_validate(entry))
                except ValueError as e:
                    raise ManifestError(f"{path}:{line_no}: {e}") from e
        return cls(records=records, root=path.parent, warnings=warnings)
