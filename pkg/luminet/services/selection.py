"""Nearest-neighbor seed selection over lighting codes."""

import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import torch

from luminet.errors import ShapeError, UsageError
from luminet.models.relight import Candidate, RelightRequest
from luminet.services.diffusion import LuminetModels, relight
from luminet.services.intrinsics import encode as encode_intrinsics

logger = logging.getLogger(__name__)


def code_distances(codes: np.ndarray, target: np.ndarray, metric: str = "l2") -> np.ndarray:
    """Distance of each row of ``codes`` to ``target``; zero for identical codes under both metrics"""
    codes = np.asarray(codes, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if codes.ndim != 2 or target.ndim != 1 or codes.shape[1] != target.shape[0]:
        raise ShapeError(f"cannot compare codes {codes.shape} with target {target.shape}")
    if metric == "l2":
        return np.linalg.norm(codes - target[None], axis=1)
    if metric == "cosine":
        norms = np.linalg.norm(codes, axis=1) * np.linalg.norm(target)
        cosine = np.divide(codes @ target, norms, out=np.zeros(len(codes)), where=norms > 0)
        return np.clip(1.0 - cosine, 0.0, 2.0)
    raise UsageError(f"unknown distance metric {metric!r}")


def rank_candidates(
    candidates: list[Candidate], target_code: torch.Tensor, k: int, metric: str = "l2"
) -> list[Candidate]:
    """The ``k`` closest candidates, ascending by distance, ties broken by the smaller seed"""
    if not 1 <= k <= len(candidates):
        raise UsageError(f"cannot keep {k} of {len(candidates)} candidates")
    codes = np.stack([c.code.detach().double().cpu().numpy() for c in candidates])
    distances = code_distances(codes, target_code.detach().double().cpu().numpy(), metric)
    seeds = np.array([c.seed for c in candidates])
    order = np.lexsort((seeds, distances))[:k]
    return [candidates[i].model_copy(update={"distance": float(distances[i])}) for i in order]


def nn_select(
    models: LuminetModels,
    request: RelightRequest,
    n_seeds: int,
    k: int,
    metric: str = "l2",
    max_workers: int | None = None,
) -> list[Candidate]:
    """
    Relight with seeds 0..n_seeds-1 and keep the k whose lighting code best matches the target's

    Args:
        models: Loaded LuminetModels
        request: Source/target pair; its seed is replaced by each candidate seed
        n_seeds: Number of candidate seeds
        k: Candidates to return
        metric: "l2" or "cosine" distance between lighting codes
        max_workers: Thread pool size for candidate generation (None runs serially)

    Returns:
        Ranked list of Candidate with distances filled in
    """
    if k < 1 or k > n_seeds:
        raise UsageError(f"nn_top ({k}) must be between 1 and nn_seeds ({n_seeds})")
    models.require()
    _, target_code = encode_intrinsics(models.intrinsics, request.target)

    def make_candidate(seed: int) -> Candidate:
        image = relight(models, request.model_copy(update={"seed": seed}))
        _, code = encode_intrinsics(models.intrinsics, image)
        return Candidate(seed=seed, image=image, code=code)

    if max_workers:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            candidates = list(pool.map(make_candidate, range(n_seeds)))
    else:
        candidates = [make_candidate(seed) for seed in range(n_seeds)]

    ranked = rank_candidates(candidates, target_code, k, metric)
    logger.info("Kept seeds %s of %d", [c.seed for c in ranked], n_seeds)
    return ranked
