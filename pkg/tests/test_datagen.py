import math

import numpy as np
import pytest
import torch
from PIL import Image

from luminet.errors import DataError, ManifestError, ShapeError, UsageError
from luminet.models.dataset import DatasetManifest, LightingParams
from luminet.services.datagen import (
    MIIW_LIGHTS,
    build_paired_dataset,
    filter_by_similarity,
    ingest_image_folder,
    ingest_miiw,
    load_embedder,
)
from luminet.services.imaging import file_hash, save_image
from luminet.services.renderer import CELL_SIZE, Luminaire, ToyScene, render_toy, room_geometry, toy_scene


def _flat_scene(size: int = 8, lamps: list[Luminaire] | None = None, albedo: float = 1.0) -> ToyScene:
    points, normals, camera = room_geometry(size, size, horizon=0)
    return ToyScene(
        albedo=np.full((size, size, 3), albedo),
        normals=normals,
        points=points,
        luminaires=lamps or [],
        camera=camera,
    )


def test_lamps_off_gives_ambient_times_albedo():
    scene = toy_scene(seed=3, index=0, size=16)
    params = LightingParams(ambient=0.2, lamp_states=[0.0] * len(scene.luminaires))
    expected = np.clip(scene.albedo * 0.2, 0, 1).astype(np.float32)
    assert torch.allclose(render_toy(scene, params), torch.from_numpy(expected), atol=1e-6)


def test_no_light_is_black():
    scene = toy_scene(seed=3, index=1, size=16)
    params = LightingParams(ambient=0.0, lamp_states=[0.0] * len(scene.luminaires), specular_strength=0.3)
    assert torch.count_nonzero(render_toy(scene, params)) == 0


def test_lamp_one_unit_above_floor_point():
    i, j = 4, 5
    scene = _flat_scene(lamps=[Luminaire(col=j, row=i, height=1.0)])
    image = render_toy(scene, LightingParams(ambient=0.0, lamp_states=[1.0]))
    assert scene.points[i, j].tolist() == [j * CELL_SIZE, i * CELL_SIZE, 0.0]
    assert image[i, j].tolist() == pytest.approx([0.5, 0.5, 0.5], abs=1e-6)


def test_ambient_is_linear():
    scene = _flat_scene(albedo=0.5)
    low = render_toy(scene, LightingParams(ambient=0.2))
    high = render_toy(scene, LightingParams(ambient=0.4))
    assert torch.allclose(high - low, torch.full_like(low, 0.1), atol=1e-6)


def test_lamp_state_count_checked():
    scene = _flat_scene(lamps=[Luminaire(col=1, row=1, height=1.0)])
    with pytest.raises(ShapeError):
        render_toy(scene, LightingParams(ambient=0.1, lamp_states=[]))


def test_dataset_counts_and_layout(tmp_path):
    manifest = build_paired_dataset(3, 4, seed=0, out_dir=tmp_path, max_workers=2)
    assert len(manifest.records) == 12
    assert len(manifest.paired_scenes()) == 3
    assert all(len(recs) == 4 for recs in manifest.by_scene().values())
    assert (tmp_path / "images" / "scene_00000" / "light_03.png").exists()
    again = DatasetManifest.read(tmp_path / "manifest.jsonl")
    assert again.records == manifest.records
    assert again.resolve(again.records[0]) == tmp_path / again.records[0].path


def test_dataset_is_deterministic(tmp_path):
    a = build_paired_dataset(2, 3, seed=7, out_dir=tmp_path / "a")
    b = build_paired_dataset(2, 3, seed=7, out_dir=tmp_path / "b", max_workers=1)
    for ra, rb in zip(a.records, b.records):
        assert file_hash(a.resolve(ra)) == file_hash(b.resolve(rb))
    c = build_paired_dataset(2, 3, seed=8, out_dir=tmp_path / "c")
    assert file_hash(a.resolve(a.records[0])) != file_hash(c.resolve(c.records[0]))


def test_scene_shares_albedo_across_lightings():
    first = toy_scene(seed=1, index=2, size=16)
    second = toy_scene(seed=1, index=2, size=16)
    assert np.array_equal(first.albedo, second.albedo)
    assert first.luminaires == second.luminaires


def test_needs_two_lights(tmp_path):
    with pytest.raises(UsageError):
        build_paired_dataset(2, 1, seed=0, out_dir=tmp_path)
    with pytest.raises(UsageError):
        build_paired_dataset(0, 3, seed=0, out_dir=tmp_path)


def _write_miiw_scene(scene_dir, lights, suffix=""):
    for k in lights:
        save_image(torch.full((8, 8, 3), k / MIIW_LIGHTS), scene_dir / f"dir_{k}{suffix}.png")


def test_ingest_miiw(tmp_path):
    for name in ("kitchen", "office", "hall"):
        _write_miiw_scene(tmp_path / name, range(MIIW_LIGHTS))
    (tmp_path / "office" / "notes.txt").write_text("probe positions")

    manifest = ingest_miiw(tmp_path)
    groups = manifest.by_scene()
    assert sorted(groups) == ["hall", "kitchen", "office"]
    assert all([r.light for r in recs] == list(range(MIIW_LIGHTS)) for recs in groups.values())
    assert manifest.warnings == []


def test_ingest_miiw_partial_scene_warns(tmp_path):
    _write_miiw_scene(tmp_path / "full", range(MIIW_LIGHTS), suffix="_mip2")
    _write_miiw_scene(tmp_path / "partial", range(1, MIIW_LIGHTS))
    manifest = ingest_miiw(tmp_path)
    assert len(manifest.by_scene()["partial"]) == MIIW_LIGHTS - 1
    assert len(manifest.warnings) == 1 and "partial" in manifest.warnings[0]

    written = manifest.write(tmp_path / "out" / "manifest.jsonl")
    reread = DatasetManifest.read(written)
    assert reread.warnings == manifest.warnings
    assert len(reread.records) == len(manifest.records)


def test_ingest_miiw_errors(tmp_path):
    with pytest.raises(DataError):
        ingest_miiw(tmp_path)
    with pytest.raises(DataError):
        ingest_miiw(tmp_path / "missing")
    (tmp_path / "broken").mkdir()
    (tmp_path / "broken" / "dir_0.jpg").write_bytes(b"not a jpeg")
    with pytest.raises(DataError):
        ingest_miiw(tmp_path)


def test_ingest_image_folder(tmp_path):
    save_image(torch.zeros(8, 8, 3), tmp_path / "a.png")
    (tmp_path / "nested").mkdir()
    Image.new("RGB", (8, 8), (10, 20, 30)).save(tmp_path / "nested" / "b.jpg")
    (tmp_path / "readme.txt").write_text("not an image")
    manifest = ingest_image_folder(tmp_path)
    assert [r.scene for r in manifest.records] == ["a", "nested/b"]
    assert all(r.light == 0 for r in manifest.records)
    assert manifest.paired_scenes() == {}


class BrightnessEmbedder:
    """Embeds an image at angle brightness * pi / 2 and every prompt at 0.8 * pi / 2"""

    def embed_images(self, images):
        b = torch.stack([img.mean() for img in images]).double()
        return torch.stack([torch.cos(b * math.pi / 2), torch.sin(b * math.pi / 2)], dim=1)

    def embed_texts(self, texts):
        angle = 0.8 * math.pi / 2
        return torch.tensor([[math.cos(angle), math.sin(angle)]] * len(texts))


def make_brightness_embedder():
    return BrightnessEmbedder()


def test_similarity_filter(tmp_path):
    for name, b in [("a", 0.1), ("b", 0.5), ("c", 0.8), ("d", 1.0)]:
        save_image(torch.full((8, 8, 3), b), tmp_path / f"{name}.png")
    manifest = ingest_image_folder(tmp_path)
    embedder = BrightnessEmbedder()

    kept = filter_by_similarity(manifest, embedder, threshold=0.85)
    assert [r.scene for r in kept.records] == ["b", "c", "d"]
    assert filter_by_similarity(manifest, embedder, threshold=float("-inf")).records == manifest.records
    assert filter_by_similarity(manifest, embedder, threshold=float("inf")).records == []
    assert filter_by_similarity(manifest, embedder, threshold=None) is manifest


def test_load_embedder():
    assert isinstance(load_embedder("tests.test_datagen:make_brightness_embedder"), BrightnessEmbedder)
    with pytest.raises(UsageError):
        load_embedder("tests.test_datagen")
    with pytest.raises(UsageError):
        load_embedder("tests.no_such_module:factory")


def test_split_and_merge(toy_dataset, tmp_path):
    train, held = toy_dataset.split_scenes(1, seed=0)
    assert len(held.by_scene()) == 1
    assert set(train.by_scene()).isdisjoint(held.by_scene())
    assert len(train.records) + len(held.records) == len(toy_dataset.records)
    with pytest.raises(ManifestError):
        toy_dataset.split_scenes(10)

    save_image(torch.zeros(8, 8, 3), tmp_path / "extra.png")
    merged = toy_dataset.merge(ingest_image_folder(tmp_path))
    assert len(merged.records) == len(toy_dataset.records) + 1
    assert all(merged.resolve(r).exists() for r in merged.records)
