"""Checkpoint blobs: ``LUMI`` magic, 4-byte little-endian header length, JSON header, torch payload."""

import io
import json
import logging
import os
import struct
from pathlib import Path
from typing import Any

import torch

from luminet.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"LUMI"
FORMAT_VERSION = 1


def write_checkpoint(path: str | Path, header: dict[str, Any], payload: dict[str, Any]) -> Path:
    """Write atomically: temp file in the same directory, then rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT_VERSION, **header}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buffer = io.BytesIO()
    torch.save(payload, buffer)

    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(buffer.getvalue())
    os.replace(tmp, path)
    logger.info("Wrote %s checkpoint to %s", header.get("kind"), path)
    return path


def read_header(path: str | Path) -> dict[str, Any]:
    header, _ = _split(Path(path))
    return header


def read_checkpoint(
    path: str | Path, kind: str | None = None, version: int | None = None
) -> tuple[dict[str, Any], dict[str, Any]]:
    path = Path(path)
    header, body = _split(path)
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {header.get('kind')!r} checkpoint, expected {kind!r}")
    if version is not None and header.get("version") != version:
        raise CheckpointError(f"{path} has version {header.get('version')}, this build reads version {version}")
    try:
        payload = torch.load(io.BytesIO(body), map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"corrupt checkpoint payload in {path}: {e}") from e
    return header, payload


def _split(path: Path) -> tuple[dict[str, Any], bytes]:
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:4] != MAGIC or len(blob) < 8:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (length,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8 : 8 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from e
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')} in {path}")
    return header, blob[8 + length :]
