"""Reference-lighting evaluation protocol and report helpers.

All sampling goes through one numpy PCG64 stream seeded with the protocol
seed, so a (manifest, seed) pair reproduces the same report everywhere.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F

from luminet.errors import InsufficientLightingError, ShapeError, UsageError
from luminet.models.dataset import DatasetManifest, ManifestRecord
from luminet.models.evaluation import METRIC_KEYS, EvalReport, NormalMap, PairRecord
from luminet.models.relight import RelightRequest
from luminet.services.diffusion import LuminetModels, relight
from luminet.services.enhancer import PostEnhancer
from luminet.services.imaging import load_image
from luminet.services.metrics import color_correct, median_angular_error, rmse, ssim

logger = logging.getLogger(__name__)

PRNG = "numpy.random.PCG64"


@dataclass(frozen=True)
class ProtocolPair:
    scene: str
    src_light: int
    tgt_light: int
    source: torch.Tensor
    reference: torch.Tensor
    ground_truth: torch.Tensor
    ref_scene: str | None = None


@runtime_checkable
class Relighter(Protocol):
    name: str

    def __call__(self, pair: ProtocolPair) -> torch.Tensor: ...


class IdentityRelighter:
    """Returns the source unchanged (the input-image baseline)"""

    name = "identity"

    def __call__(self, pair: ProtocolPair) -> torch.Tensor:
        return pair.source


class OracleRelighter:
    """Returns the ground truth; a debugging upper bound"""

    name = "oracle"

    def __call__(self, pair: ProtocolPair) -> torch.Tensor:
        return pair.ground_truth


class LuminetRelighter:
    name = "luminet"

    def __init__(self, models: LuminetModels, steps: int = 50, seed: int = 0, enhancer: PostEnhancer | None = None):
        models.require()
        self.models = models
        self.steps = steps
        self.seed = seed
        self.enhancer = enhancer

    def __call__(self, pair: ProtocolPair) -> torch.Tensor:
        request = RelightRequest(
            source=pair.source, target=pair.reference, seed=self.seed, steps=self.steps, enhancer=self.enhancer
        )
        return relight(self.models, request)


class _ImageCache:
    def __init__(self, manifest: DatasetManifest, image_size: int | None):
        self.manifest = manifest
        self.image_size = image_size
        self._images: dict[str, torch.Tensor] = {}

    def __call__(self, record: ManifestRecord) -> torch.Tensor:
        path = str(self.manifest.resolve(record))
        if path not in self._images:
            self._images[path] = load_image(path, self.image_size)
        return self._images[path]


def _cross_scene_reference(
    groups: dict[str, list[ManifestRecord]], scene: str, light: int, rng: np.random.Generator
) -> ManifestRecord:
    donors = [rec for other, recs in groups.items() if other != scene for rec in recs if rec.light == light]
    if not donors:
        raise InsufficientLightingError(f"no other scene has light {light} to serve as a reference for {scene}")
    return donors[rng.integers(len(donors))]


def score_pair(pair: ProtocolPair, prediction: torch.Tensor, repeat: int, color_mode: str = "gain") -> PairRecord:
    if prediction.shape != pair.ground_truth.shape:
        raise ShapeError(f"relit image {tuple(prediction.shape)} does not match {tuple(pair.ground_truth.shape)}")
    corrected, color_vector = color_correct(prediction, pair.ground_truth, mode=color_mode)
    return PairRecord(
        repeat=repeat,
        scene=pair.scene,
        src_light=pair.src_light,
        tgt_light=pair.tgt_light,
        ref_scene=pair.ref_scene,
        rmse_raw=rmse(prediction, pair.ground_truth),
        ssim_raw=ssim(prediction, pair.ground_truth),
        rmse_cc=rmse(corrected, pair.ground_truth),
        ssim_cc=ssim(corrected, pair.ground_truth),
        color_vector=[float(v) for v in color_vector],
    )


def eval_protocol(
    relighter: Relighter,
    manifest: DatasetManifest,
    n_refs: int = 12,
    repeats: int = 1,
    seed: int = 0,
    image_size: int | None = None,
    color_mode: str = "gain",
    reference_mode: str = "same_scene",
) -> EvalReport:
    """
    Score a relighter on randomly drawn (source, reference) lightings of every scene

    Args:
        relighter: Callable taking a ProtocolPair and returning the relit image
        manifest: Scenes to evaluate; each needs at least n_refs + 1 lightings
        n_refs: Reference lightings drawn per source image
        repeats: Times the whole draw is repeated
        seed: Protocol seed for the PCG64 stream
        image_size: Resize images on load (None keeps the stored size)
        color_mode: "gain" or "offset" single-color-vector correction
        reference_mode: "same_scene" uses the target image itself as the reference;
            "cross_scene" uses another scene under the same light id

    Returns:
        EvalReport with per-pair records, overall and per-repeat means, and protocol metadata
    """
    if n_refs < 1 or repeats < 1:
        raise UsageError("n_refs and repeats must be >= 1")
    if reference_mode not in ("same_scene", "cross_scene"):
        raise UsageError(f"unknown reference mode {reference_mode!r}")
    groups = manifest.by_scene()
    short = [scene for scene, recs in groups.items() if len(recs) < n_refs + 1]
    if not groups or short:
        raise InsufficientLightingError(f"scenes with fewer than {n_refs + 1} lighting conditions: {short or 'all'}")

    rng = np.random.Generator(np.random.PCG64(seed))
    load = _ImageCache(manifest, image_size)
    records = []
    for repeat in range(repeats):
        for scene, recs in groups.items():
            src = recs[rng.integers(len(recs))]
            others = [r for r in recs if r.light != src.light]
            for index in rng.choice(len(others), size=n_refs, replace=False):
                tgt = others[index]
                ref = tgt if reference_mode == "same_scene" else _cross_scene_reference(groups, scene, tgt.light, rng)
                pair = ProtocolPair(
                    scene=scene,
                    src_light=src.light,
                    tgt_light=tgt.light,
                    source=load(src),
                    reference=load(ref),
                    ground_truth=load(tgt),
                    ref_scene=ref.scene if reference_mode == "cross_scene" else None,
                )
                records.append(score_pair(pair, relighter(pair), repeat, color_mode))
        logger.info("Finished protocol repeat %d of %d", repeat + 1, repeats)

    metadata = {
        "method": getattr(relighter, "name", type(relighter).__name__),
        "n_refs": n_refs,
        "repeats": repeats,
        "seed": seed,
        "prng": PRNG,
        "color_mode": color_mode,
        "reference_mode": reference_mode,
    }
    return EvalReport.from_records(records, metadata)


def write_aggregates_csv(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scope", *METRIC_KEYS])
        for row in report.per_repeat:
            writer.writerow([f"repeat_{row.repeat}", *(f"{getattr(row, k):.6f}" for k in METRIC_KEYS)])
        writer.writerow(["all", *(f"{report.aggregates[k]:.6f}" for k in METRIC_KEYS)])
    return path


def format_summary(reports: list[EvalReport]) -> str:
    """Raw and color-corrected RMSE/SSIM, one row per method"""
    lines = [
        f"{'':<12}{'Raw':^20}{'Color Correction':^20}",
        f"{'Method':<12}{'RMSE':>10}{'SSIM':>10}{'RMSE':>10}{'SSIM':>10}",
    ]
    for report in reports:
        agg = report.aggregates
        name = str(report.metadata.get("method", "?"))
        lines.append(
            f"{name:<12}{agg['rmse_raw']:>10.4f}{agg['ssim_raw']:>10.4f}{agg['rmse_cc']:>10.4f}{agg['ssim_cc']:>10.4f}"
        )
    return "\n".join(lines)


@runtime_checkable
class NormalEstimator(Protocol):
    """Image -> H x W x 3 surface normals"""

    def __call__(self, image: torch.Tensor) -> torch.Tensor: ...


def normal_consistency(
    estimator: NormalEstimator, source: torch.Tensor, relit: torch.Tensor, mask: torch.Tensor | None = None
) -> float:
    """Median angular error between normals estimated from the source and from its relit version"""
    na = NormalMap(normals=F.normalize(estimator(source).double(), dim=-1), mask=mask)
    nb = NormalMap(normals=F.normalize(estimator(relit).double(), dim=-1), mask=mask)
    return median_angular_error(na, nb)
