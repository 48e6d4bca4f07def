import math

import numpy as np
import pytest
import torch

from luminet.errors import DataError, InvalidRankingError, ShapeError, UsageError
from luminet.models.evaluation import NormalMap, RankingQuestion, RankingResponse
from luminet.services.metrics import SSIM_K1, aggregate_rankings, color_correct, median_angular_error, rmse, ssim


def _rand(shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed))


def test_rmse_hand_cases():
    assert rmse(torch.zeros(4, 4, 3), torch.full((4, 4, 3), 0.5)) == 0.5
    assert rmse(torch.tensor([0.0, 1.0]), torch.tensor([0.0, 0.0])) == pytest.approx(math.sqrt(0.5))
    with pytest.raises(ShapeError):
        rmse(torch.zeros(2), torch.zeros(3))


def test_ssim_identical_is_one():
    img = _rand((32, 32, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images():
    c1 = SSIM_K1**2
    assert ssim(torch.zeros(16, 16, 3), torch.ones(16, 16, 3)) == pytest.approx(c1 / (1 + c1), rel=1e-9)


def test_ssim_window_must_fit():
    with pytest.raises(ShapeError):
        ssim(torch.zeros(10, 16, 3), torch.zeros(10, 16, 3))


def test_ssim_matches_reference_implementation():
    metrics = pytest.importorskip("skimage.metrics")
    rng = np.random.Generator(np.random.PCG64(0))
    for i in range(50):
        h, w = (int(v) for v in rng.integers(16, 40, 2))
        a = _rand((h, w, 3), seed=2 * i)
        b = (a + 0.2 * _rand((h, w, 3), seed=2 * i + 1)).clamp(0, 1)
        expected = metrics.structural_similarity(
            a.double().mean(-1).numpy(),
            b.double().mean(-1).numpy(),
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            data_range=1.0,
        )
        assert ssim(a, b) == pytest.approx(expected, abs=1e-4)


def test_color_correct_identity_and_scale():
    gt = _rand((8, 8, 3))
    corrected, c = color_correct(gt, gt)
    assert c.tolist() == [1.0, 1.0, 1.0]
    assert torch.equal(corrected, gt)

    corrected, c = color_correct(gt * 0.5, gt)
    assert c.tolist() == [2.0, 2.0, 2.0]
    assert torch.equal(corrected, gt)


def test_gain_is_least_squares_optimal():
    pred, gt = _rand((8, 8, 3), seed=1), _rand((8, 8, 3), seed=2)
    _, c = color_correct(pred, gt)
    p = pred.double().reshape(-1, 3).numpy()
    g = gt.double().reshape(-1, 3).numpy()
    best = np.sum((p * c.numpy() - g) ** 2)

    deltas = np.linspace(-0.1, 0.1, 21)
    grid = np.stack(np.meshgrid(deltas, deltas, deltas, indexing="ij"), axis=-1).reshape(-1, 3) + c.numpy()
    losses = np.sum((p[None] * grid[:, None] - g[None]) ** 2, axis=(1, 2))
    assert np.all(losses >= best - 1e-12)


def test_offset_mode():
    gt = 0.2 + 0.6 * _rand((8, 8, 3))
    corrected, c = color_correct(gt - 0.1, gt, mode="offset")
    assert c.tolist() == pytest.approx([0.1, 0.1, 0.1], abs=1e-6)
    assert torch.allclose(corrected, gt, atol=1e-6)
    with pytest.raises(UsageError):
        color_correct(gt, gt, mode="curves")


def _planar_normals(angle_offset: float = 0.0, size: int = 6) -> torch.Tensor:
    phi = torch.linspace(0, 2 * math.pi, size * size, dtype=torch.float64).view(size, size) + angle_offset
    return torch.stack([torch.cos(phi), torch.sin(phi), torch.zeros_like(phi)], dim=-1)


def test_angular_error_of_identical_maps():
    normals = NormalMap(normals=_planar_normals())
    assert median_angular_error(normals, normals) == pytest.approx(0.0, abs=1e-5)


def test_angular_error_of_rotated_maps():
    na = NormalMap(normals=_planar_normals())
    nb = NormalMap(normals=_planar_normals(math.radians(10)))
    assert median_angular_error(na, nb) == pytest.approx(10.0, abs=1e-6)


def test_angular_error_masks():
    mask = torch.zeros(6, 6, dtype=torch.bool)
    na = NormalMap(normals=_planar_normals(), mask=mask)
    with pytest.raises(DataError):
        median_angular_error(na, NormalMap(normals=_planar_normals()))

    junk = _planar_normals() * 2
    mask[0, 0] = True
    junk[0, 0] = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
    valid = NormalMap(normals=junk, mask=mask)
    assert median_angular_error(valid, NormalMap(normals=junk.clone(), mask=mask)) == 0.0
    with pytest.raises(ValueError):
        NormalMap(normals=junk)


def _response(pid: str, ranks: dict[str, int], metric: str = "realism") -> RankingResponse:
    return RankingResponse(participant_id=pid, questions=[RankingQuestion(metric=metric, ranks=ranks)])


def test_aggregate_rankings():
    responses = [
        _response("p1", {"luminet": 1, "identity": 2, "oracle": 3, "flat": 4}),
        _response("p2", {"luminet": 2, "identity": 1, "oracle": 3, "flat": 4}),
        _response("p2", {"luminet": 1, "identity": 2, "oracle": 4, "flat": 3}, metric="consistency"),
    ]
    means = aggregate_rankings(responses)
    assert means["luminet"] == {"consistency": 1.0, "realism": 1.5}
    assert means["oracle"] == {"consistency": 4.0, "realism": 3.0}


def test_ranks_must_be_a_permutation():
    with pytest.raises(InvalidRankingError) as excinfo:
        aggregate_rankings([_response("p7", {"luminet": 1, "identity": 1})])
    assert "p7" in str(excinfo.value)


@pytest.mark.parametrize(
    "ranks", [{"A": 1}, {"A": 1, "B": 2, "C": 3}, {"A": 1, "B": 2, "C": 3, "D": 5}, {"A": 0, "B": 1, "C": 2, "D": 3}]
)
def test_ranks_must_cover_one_to_four(ranks):
    with pytest.raises(InvalidRankingError) as excinfo:
        aggregate_rankings([_response("p3", ranks)])
    assert "p3" in str(excinfo.value)
