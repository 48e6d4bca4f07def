import hashlib
import json
import logging
from pathlib import Path

from sqlalchemy.orm import Session

from luminet.database import RunRecord
from luminet.models.run import RunManifest, RunSummary

logger = logging.getLogger(__name__)


def input_key(input_hashes: dict[str, str]) -> str:
    return hashlib.sha256(json.dumps(input_hashes, sort_keys=True).encode()).hexdigest()


class RunRegistry:
    """Service for recording runs and spotting reproductions"""

    def __init__(self, db: Session):
        """Initialize the registry on an open session"""
        self.db = db

    def is_reproduction(self, manifest: RunManifest) -> bool:
        return (
            self.db.query(RunRecord)
            .filter(
                RunRecord.command == manifest.command,
                RunRecord.config_hash == manifest.config_hash,
                RunRecord.input_key == input_key(manifest.input_hashes),
            )
            .first()
            is not None
        )

    def record(self, manifest: RunManifest, manifest_path: str | Path | None = None) -> RunManifest:
        """
        Store a finished run

        Args:
            manifest: The run's manifest; its ``reproduction`` flag is set here
            manifest_path: Where the manifest JSON is written, if anywhere

        Returns:
            The manifest with ``reproduction`` filled in
        """
        manifest = manifest.model_copy(update={"reproduction": self.is_reproduction(manifest)})
        if manifest.reproduction:
            logger.info("Run of %s reproduces an earlier run (config %s)", manifest.command, manifest.config_hash[:12])
        self.db.add(
            RunRecord(
                command=manifest.command,
                config_hash=manifest.config_hash,
                input_key=input_key(manifest.input_hashes),
                input_hashes=json.dumps(manifest.input_hashes, sort_keys=True),
                checkpoint_versions=json.dumps(manifest.checkpoint_versions, sort_keys=True),
                outputs=json.dumps(manifest.outputs),
                manifest_path=str(manifest_path) if manifest_path else None,
                wall_clock=manifest.wall_clock,
                reproduction=manifest.reproduction,
            )
        )
        self.db.commit()
        if manifest_path:
            manifest.write(manifest_path)
        return manifest

    def list_runs(self, limit: int = 100) -> list[RunSummary]:
        rows = self.db.query(RunRecord).order_by(RunRecord.id.desc()).limit(limit).all()
        return [RunSummary.model_validate(row) for row in rows]
