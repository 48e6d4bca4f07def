import numpy as np
import pytest
import torch

from luminet.errors import ShapeError, UsageError
from luminet.models.relight import Candidate, RelightRequest
from luminet.services.diffusion import relight
from luminet.services.selection import code_distances, nn_select, rank_candidates


def _candidates(codes) -> list[Candidate]:
    return [
        Candidate(seed=seed, image=torch.zeros(1, 1, 3), code=torch.as_tensor(code, dtype=torch.float32))
        for seed, code in enumerate(codes)
    ]


def test_exact_match_ranks_first():
    target = torch.tensor([0.5, -1.0, 2.0])
    ranked = rank_candidates(_candidates([[0.0, 0.0, 0.0], target.tolist(), [0.5, -1.0, 1.0]]), target, k=2)
    assert [c.seed for c in ranked] == [1, 2]
    assert ranked[0].distance == 0.0
    assert ranked[1].distance == pytest.approx(1.0)


def test_matches_brute_force_ranking():
    rng = np.random.Generator(np.random.PCG64(0))
    for _ in range(100):
        n = int(rng.integers(1, 12))
        k = int(rng.integers(1, n + 1))
        codes = rng.normal(size=(n, 4)).astype(np.float32)
        target = rng.normal(size=4).astype(np.float32)
        ranked = rank_candidates(_candidates(codes), torch.from_numpy(target), k)

        distances = [float(np.linalg.norm(codes[i].astype(np.float64) - target.astype(np.float64))) for i in range(n)]
        expected = sorted(range(n), key=lambda i: (distances[i], i))[:k]
        assert [c.seed for c in ranked] == expected
        assert [c.distance for c in ranked] == pytest.approx([distances[i] for i in expected])


def test_ties_go_to_smaller_seed():
    candidates = [
        Candidate(seed=seed, image=torch.zeros(1, 1, 3), code=torch.ones(2)) for seed in (5, 2, 9)
    ]
    assert [c.seed for c in rank_candidates(candidates, torch.zeros(2), k=3)] == [2, 5, 9]


def test_cosine_distance():
    codes = np.array([[1.0, 0.0], [0.0, 3.0], [-2.0, 0.0], [0.0, 0.0]])
    assert code_distances(codes, np.array([4.0, 0.0]), "cosine").tolist() == [0.0, 1.0, 2.0, 1.0]
    with pytest.raises(UsageError):
        code_distances(codes, np.array([1.0, 0.0]), "manhattan")
    with pytest.raises(ShapeError):
        code_distances(codes, np.array([1.0, 0.0, 0.0]))


def test_k_bounds():
    with pytest.raises(UsageError):
        rank_candidates(_candidates([[0.0]]), torch.zeros(1), k=2)
    with pytest.raises(UsageError):
        rank_candidates(_candidates([[0.0]]), torch.zeros(1), k=0)


def test_nn_select_validates_k(models, random_image):
    request = RelightRequest(source=random_image(seed=1), target=random_image(seed=2), steps=2)
    with pytest.raises(UsageError):
        nn_select(models, request, n_seeds=2, k=3)


def test_single_seed_equals_plain_relight(models, random_image):
    request = RelightRequest(source=random_image(seed=1), target=random_image(seed=2), steps=2)
    (only,) = nn_select(models, request, n_seeds=1, k=1)
    assert only.seed == 0
    assert torch.equal(only.image, relight(models, request))


def test_candidates_sorted_by_distance(models, random_image):
    request = RelightRequest(source=random_image(seed=1), target=random_image(seed=2), steps=2)
    ranked = nn_select(models, request, n_seeds=4, k=3, max_workers=2)
    assert len(ranked) == 3
    assert [c.distance for c in ranked] == sorted(c.distance for c in ranked)
    assert len({c.seed for c in ranked}) == 3
