"""Image and normal-map metrics, color correction and user-study rank aggregation."""

from collections import defaultdict

import numpy as np
import torch
import torch.nn.functional as F

from luminet.errors import DataError, InvalidRankingError, ShapeError, UsageError
from luminet.models.evaluation import NormalMap, RankingResponse

SSIM_K1 = 0.01
SSIM_K2 = 0.03
RANK_SCALE = (1, 2, 3, 4)


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def rmse(a: torch.Tensor, b: torch.Tensor) -> float:
    _check_pair(a, b)
    diff = a.detach().double() - b.detach().double()
    return float(torch.sqrt(torch.mean(diff * diff)))


def gaussian_window(window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(window, dtype=torch.float64) - (window - 1) / 2
    g = torch.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Separable 'valid' Gaussian filter on a (1, 1, H, W) tensor"""
    x = F.conv2d(x, g.view(1, 1, -1, 1))
    return F.conv2d(x, g.view(1, 1, 1, -1))


def _grayscale(img: torch.Tensor) -> torch.Tensor:
    img = img.detach().double()
    if img.ndim == 3:
        img = img.mean(dim=-1)
    return img[None, None]


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM of the channel-mean grayscale images, averaged over valid windows"""
    _check_pair(a, b)
    if min(a.shape[0], a.shape[1]) < window:
        raise ShapeError(f"image {a.shape[0]}x{a.shape[1]} is smaller than the {window}x{window} window")
    x, y = _grayscale(a), _grayscale(b)
    g = gaussian_window(window, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    mu_x, mu_y = _filter(x, g), _filter(y, g)
    var_x = _filter(x * x, g) - mu_x * mu_x
    var_y = _filter(y * y, g) - mu_y * mu_y
    cov = _filter(x * y, g) - mu_x * mu_y

    numerator = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float((numerator / denominator).mean())


def color_correct(pred: torch.Tensor, gt: torch.Tensor, mode: str = "gain") -> tuple[torch.Tensor, torch.Tensor]:
    """
    Fit one per-channel color vector mapping pred onto gt

    Args:
        pred: H x W x 3 prediction
        gt: H x W x 3 ground truth
        mode: "gain" (least-squares multiplier) or "offset" (least-squares additive shift)

    Returns:
        (clamped corrected prediction, color vector of length 3)
    """
    _check_pair(pred, gt)
    p = pred.detach().double().reshape(-1, pred.shape[-1])
    g = gt.detach().double().reshape(-1, gt.shape[-1])
    if mode == "gain":
        numerator = (p * g).sum(dim=0)
        denominator = (p * p).sum(dim=0)
        c = torch.where(denominator > 0, numerator / torch.where(denominator > 0, denominator, 1.0), 0.0)
        corrected = pred.double() * c
    elif mode == "offset":
        c = (g - p).mean(dim=0)
        corrected = pred.double() + c
    else:
        raise UsageError(f"unknown color correction mode {mode!r}")
    return corrected.clamp(0.0, 1.0).to(pred.dtype), c


def median_angular_error(na: NormalMap, nb: NormalMap) -> float:
    """Median angle in degrees between two normal maps over their jointly valid pixels"""
    if na.normals.shape != nb.normals.shape:
        raise ShapeError(f"normal maps differ in shape: {tuple(na.normals.shape)} vs {tuple(nb.normals.shape)}")
    valid = (na.valid_mask() & nb.valid_mask()).numpy()
    if not valid.any():
        raise DataError("normal maps share no valid pixels")
    a = na.normals.detach().double().numpy()[valid]
    b = nb.normals.detach().double().numpy()[valid]
    cosine = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return float(np.degrees(np.median(np.arccos(cosine))))


def aggregate_rankings(responses: list[RankingResponse]) -> dict[str, dict[str, float]]:
    """Mean rank per method per metric; lower is better"""
    totals: dict[str, dict[str, list[int]]] = defaultdict(lambda: defaultdict(list))
    for response in responses:
        for question in response.questions:
            if tuple(sorted(question.ranks.values())) != RANK_SCALE:
                raise InvalidRankingError(
                    response.participant_id,
                    f"ranks {question.ranks} for {question.metric} are not a permutation of {RANK_SCALE}",
                )
            for method, rank in question.ranks.items():
                totals[method][question.metric].append(rank)
    return {
        method: {metric: float(np.mean(ranks)) for metric, ranks in sorted(per_metric.items())}
        for method, per_metric in sorted(totals.items())
    }
