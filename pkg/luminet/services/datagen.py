"""Paired multi-illumination data: toy rendering, MIIW and folder ingestion, similarity filtering."""

import importlib
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from luminet.config import DatagenConfig
from luminet.errors import DataError, UsageError
from luminet.models.dataset import DatasetManifest, ManifestRecord
from luminet.services.imaging import load_image, save_image
from luminet.services.renderer import random_lighting, render_toy, toy_scene

logger = logging.getLogger(__name__)

MIIW_LIGHTS = 25
MIIW_PATTERN = re.compile(r"^dir_(\d+)(?:_[^.]*)?\.(jpe?g|png)$", re.IGNORECASE)
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png"}
DEFAULT_PROMPTS = ("photo-realistic", "good lighting", "illumination")


def _render_scene(index: int, cfg: DatagenConfig, out_dir: Path) -> list[ManifestRecord]:
    scene_id = f"scene_{index:05d}"
    scene = toy_scene(cfg.seed, index, size=cfg.image_size, falloff=cfg.falloff)
    rng = np.random.Generator(np.random.PCG64([cfg.seed, index, 1]))
    records = []
    for light in range(cfg.k_lights):
        params = random_lighting(scene, rng, shininess=cfg.shininess)
        rel_path = Path("images") / scene_id / f"light_{light:02d}.png"
        save_image(render_toy(scene, params), out_dir / rel_path)
        record = ManifestRecord(scene=scene_id, light=light, path=rel_path.as_posix(), params=params.model_dump())
        records.append(record)
    return records


def build_paired_dataset(
    n_scenes: int, k_lights: int, seed: int, out_dir: str | Path, cfg: DatagenConfig | None = None, max_workers: int = 4
) -> DatasetManifest:
    """
    Render ``n_scenes`` toy scenes under ``k_lights`` lightings each

    Args:
        n_scenes: Number of scenes
        k_lights: Lighting variations per scene (at least 2)
        seed: Scene and lighting seed
        out_dir: Dataset root; images land under ``images/`` and the manifest in ``manifest.jsonl``

    Returns:
        DatasetManifest rooted at ``out_dir``
    """
    if n_scenes < 1:
        raise UsageError("n_scenes must be >= 1")
    if k_lights < 2:
        raise UsageError("k_lights must be >= 2 to form same-scene pairs")
    cfg = (cfg or DatagenConfig()).model_copy(update={"n_scenes": n_scenes, "k_lights": k_lights, "seed": seed})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        groups = list(pool.map(lambda i: _render_scene(i, cfg, out_dir), range(n_scenes)))

    manifest = DatasetManifest(records=[r for group in groups for r in group], root=out_dir)
    manifest.write(out_dir / "manifest.jsonl")
    logger.info("Rendered %d scenes x %d lights into %s", n_scenes, k_lights, out_dir)
    return manifest


def _verify(path: Path) -> None:
    try:
        with Image.open(path) as im:
            im.verify()
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"unreadable image {path}: {e}") from e


def _ingest_miiw_scene(root: Path, scene_dir: Path) -> tuple[list[ManifestRecord], str | None]:
    lights: dict[int, Path] = {}
    for path in sorted(scene_dir.iterdir()):
        match = MIIW_PATTERN.match(path.name)
        if not match:
            continue
        light = int(match.group(1))
        if light >= MIIW_LIGHTS or light in lights:
            continue
        _verify(path)
        lights[light] = path

    scene = scene_dir.name
    if not lights:
        return [], f"scene {scene} has no dir_<k> images, skipped"
    records = [
        ManifestRecord(scene=scene, light=k, path=lights[k].relative_to(root).as_posix()) for k in sorted(lights)
    ]
    warning = None
    if len(lights) < MIIW_LIGHTS:
        missing = sorted(set(range(MIIW_LIGHTS)) - set(lights))
        warning = f"scene {scene} has {len(lights)} of {MIIW_LIGHTS} lighting conditions (missing {missing})"
    return records, warning


def ingest_miiw(root_dir: str | Path, max_workers: int = 4) -> DatasetManifest:
    """One scene group per sub-directory of ``root_dir``, light id taken from ``dir_<k>`` file names"""
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    scene_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not scene_dirs:
        raise DataError(f"no scene directories under {root}")

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(pool.map(lambda d: _ingest_miiw_scene(root, d), scene_dirs))

    records, warnings = [], []
    for scene_records, warning in results:
        records.extend(scene_records)
        if warning:
            logger.warning(warning)
            warnings.append(warning)
    if not records:
        raise DataError(f"no MIIW images found under {root}")
    return DatasetManifest(records=records, root=root, warnings=warnings)


def ingest_image_folder(root_dir: str | Path) -> DatasetManifest:
    """Unpaired images: every image file is its own scene with light id 0"""
    root = Path(root_dir)
    paths = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES) if root.is_dir() else []
    if not paths:
        raise DataError(f"no images found under {root}")
    records = []
    for path in paths:
        _verify(path)
        rel = path.relative_to(root)
        records.append(ManifestRecord(scene=rel.with_suffix("").as_posix(), light=0, path=rel.as_posix()))
    return DatasetManifest(records=records, root=root)


@runtime_checkable
class Embedder(Protocol):
    """Joint image/text embedding, e.g. a CLIP model"""

    def embed_images(self, images: list[torch.Tensor]) -> torch.Tensor: ...

    def embed_texts(self, texts: list[str]) -> torch.Tensor: ...


def load_embedder(spec: str) -> Embedder:
    """Build an embedder from ``package.module:factory``"""
    module_name, _, attr = spec.partition(":")
    if not attr:
        raise UsageError(f"embedder must look like package.module:factory, got {spec!r}")
    try:
        factory = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as e:
        raise UsageError(f"cannot load embedder {spec!r}: {e}") from e
    return factory()


def similarity_scores(images: list[torch.Tensor], embedder: Embedder, prompts=DEFAULT_PROMPTS) -> torch.Tensor:
    """Max cosine similarity of each image to any prompt"""
    image_emb = torch.nn.functional.normalize(embedder.embed_images(images).double(), dim=-1)
    text_emb = torch.nn.functional.normalize(embedder.embed_texts(list(prompts)).double(), dim=-1)
    return (image_emb @ text_emb.T).max(dim=1).values


def filter_by_similarity(
    manifest: DatasetManifest,
    embedder: Embedder,
    prompts=DEFAULT_PROMPTS,
    threshold: float | None = None,
    image_size: int | None = None,
) -> DatasetManifest:
    """Keep records scoring at least ``threshold``, in their original order"""
    if threshold is None or not manifest.records:
        return manifest
    images = [load_image(manifest.resolve(r), image_size) for r in manifest.records]
    scores = similarity_scores(images, embedder, prompts)
    kept = [r for r, score in zip(manifest.records, scores.tolist()) if score >= threshold]
    logger.info("Similarity filter kept %d of %d images", len(kept), len(manifest.records))
    return manifest.model_copy(update={"records": kept})
