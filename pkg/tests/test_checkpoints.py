import pytest
import torch

from luminet.errors import CheckpointError
from luminet.services.checkpoints import MAGIC, read_checkpoint, read_header, write_checkpoint


def test_header_and_payload_survive(tmp_path):
    path = write_checkpoint(tmp_path / "a.ckpt", {"kind": "toy", "version": 3}, {"w": torch.arange(4.0)})
    assert path.read_bytes()[:4] == MAGIC
    header, payload = read_checkpoint(path, kind="toy", version=3)
    assert header["kind"] == "toy"
    assert torch.equal(payload["w"], torch.arange(4.0))
    assert read_header(path)["version"] == 3
    assert not list(tmp_path.glob("*.tmp"))


def test_wrong_kind_or_version(tmp_path):
    path = write_checkpoint(tmp_path / "a.ckpt", {"kind": "toy", "version": 1}, {})
    with pytest.raises(CheckpointError):
        read_checkpoint(path, kind="intrinsics")
    with pytest.raises(CheckpointError):
        read_checkpoint(path, kind="toy", version=2)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(CheckpointError):
        read_checkpoint(path)
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.ckpt")


def test_truncated_payload(tmp_path):
    path = write_checkpoint(tmp_path / "a.ckpt", {"kind": "toy", "version": 1}, {"w": torch.ones(100)})
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 50])
    with pytest.raises(CheckpointError):
        read_checkpoint(path)
