import io
from pathlib import Path

import torch
from fastapi.testclient import TestClient
from PIL import Image

from luminet.database import session_factory
from luminet.main import app
from luminet.models.run import RunManifest
from luminet.routes.relight import get_models
from luminet.services.imaging import quantize
from luminet.services.runs import RunRegistry

client = TestClient(app)


def _png(seed: int, size: int = 16) -> bytes:
    image = torch.rand(size, size, 3, generator=torch.Generator().manual_seed(seed))
    buffer = io.BytesIO()
    Image.fromarray(quantize(image)).save(buffer, format="PNG")
    return buffer.getvalue()


def _record(command: str = "datagen", inputs: dict[str, str] | None = None) -> RunManifest:
    db = session_factory()()
    try:
        manifest = RunManifest(command=command, config_hash="abc123", input_hashes=inputs or {}, outputs=["x.png"])
        return RunRegistry(db).record(manifest)
    finally:
        db.close()


def test_health_check():
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "healthy"}


def test_runs_page_lists_recorded_runs(home):
    response = client.get("/runs/")
    assert response.status_code == 200
    assert "No runs recorded yet" in response.text

    _record("evaluate")
    response = client.get("/runs/")
    assert "evaluate" in response.text
    assert "abc123" in response.text


def test_runs_api(home):
    first = _record(inputs={"data": "h1"})
    second = _record(inputs={"data": "h1"})
    third = _record(inputs={"data": "h2"})
    assert (first.reproduction, second.reproduction, third.reproduction) == (False, True, False)

    runs = client.get("/runs/api/list").json()
    assert [run["reproduction"] for run in runs] == [False, True, False]
    assert runs[0]["input_hashes"] == {"data": "h2"}
    assert len(client.get("/runs/api/list?limit=1").json()) == 1
    assert client.get("/runs/api/list?limit=0").status_code == 422


def test_relight_endpoint(home, models):
    app.dependency_overrides[get_models] = lambda: models
    try:
        response = client.post(
            "/relight",
            files={"source": ("s.png", _png(1), "image/png"), "target": ("t.png", _png(2), "image/png")},
            data={"seed": "3", "steps": "2"},
        )
    finally:
        app.dependency_overrides.clear()
    assert response.status_code == 200
    assert response.headers["content-type"] == "image/png"
    out_path = Path(response.headers["X-Output-Path"])
    assert out_path.parent == home / "outputs"
    assert out_path.name.endswith("_seed3.png")
    assert out_path.read_bytes() == response.content
    assert Image.open(io.BytesIO(response.content)).size == (16, 16)


def test_relight_rejects_unreadable_upload(home, models):
    app.dependency_overrides[get_models] = lambda: models
    try:
        response = client.post(
            "/relight",
            files={"source": ("s.png", b"not an image", "image/png"), "target": ("t.png", _png(2), "image/png")},
        )
    finally:
        app.dependency_overrides.clear()
    assert response.status_code == 400


def test_relight_without_checkpoint(home, monkeypatch):
    monkeypatch.delenv("LUMINET_CHECKPOINT", raising=False)
    response = client.post(
        "/relight",
        files={"source": ("s.png", _png(1), "image/png"), "target": ("t.png", _png(2), "image/png")},
    )
    assert response.status_code == 503
