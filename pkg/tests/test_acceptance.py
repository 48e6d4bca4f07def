"""Scaled-down end-to-end checks on the toy renderer."""

import time

import pytest
import torch

from luminet.config import DatagenConfig, IntrinsicsConfig, RunConfig, TrainConfig
from luminet.models.dataset import LightingParams
from luminet.models.relight import RelightRequest
from luminet.services.datagen import build_paired_dataset
from luminet.services.diffusion import LuminetModels, LuminetTrainer, pretrain_base, relight
from luminet.services.evaluation import LuminetRelighter, eval_protocol
from luminet.services.imaging import load_image
from luminet.services.intrinsics import encode, intrinsic_similarity, relight_decode, train_intrinsics
from luminet.services.metrics import ssim
from luminet.services.renderer import render_toy, toy_scene
from luminet.services.training import snapshot
from tests.conftest import tiny_config

OVERFIT_SIZE = 32
E2E_SIZE = 32


def test_hundred_steps_keep_base_frozen(models, toy_dataset):
    before = snapshot(models.named_parameters())
    cfg = models.config.train_luminet.model_copy(update={"steps": 100, "batch_size": 2})
    LuminetTrainer(models, cfg).train(toy_dataset)

    labels = models.partition_map()
    for name, p in models.named_parameters():
        if labels[name] == "base":
            assert torch.equal(p, before[name]), name
    for partition in ("control", "cross_attn", "adaptor"):
        assert any(
            not torch.equal(p, before[name]) for name, p in models.named_parameters() if labels[name] == partition
        ), partition


def test_default_sampler_latency_at_64():
    models = LuminetModels.build(RunConfig())
    g = torch.Generator().manual_seed(0)
    request = RelightRequest(source=torch.rand(64, 64, 3, generator=g), target=torch.rand(64, 64, 3, generator=g))
    start = time.perf_counter()
    out = relight(models, request)
    assert time.perf_counter() - start < 5.0
    assert out.shape == (64, 64, 3)


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    """Intrinsics model overfit on 4 toy scenes under 7 lightings"""
    dataset = build_paired_dataset(
        4, 7, seed=0, out_dir=tmp_path_factory.mktemp("overfit"), cfg=DatagenConfig(image_size=OVERFIT_SIZE)
    )
    cfg = TrainConfig(
        steps=2000, batch_size=8, lr=1e-3, weight_decay=0.0, lr_decay=0.5, lr_decay_every=600, checkpoint_every=0
    )
    model = train_intrinsics(dataset, cfg, IntrinsicsConfig(image_size=OVERFIT_SIZE, c_int=64)).eval()
    pairs = []
    for records in dataset.by_scene().values():
        a, b = (load_image(dataset.resolve(r)) for r in records[:2])
        pairs.append((a, b))
    return model, pairs


@pytest.mark.slow
def test_intrinsics_overfit_swap(overfit):
    model, pairs = overfit
    scores = []
    for a, b in pairs:
        intrinsic, _ = encode(model, a)
        _, code = encode(model, b)
        scores.append(ssim(relight_decode(model, intrinsic, code), b))
    assert sum(scores) / len(scores) >= 0.95


@pytest.mark.slow
def test_intrinsics_overfit_self_reconstruction(overfit):
    model, pairs = overfit
    for a, _ in pairs:
        out = relight_decode(model, *encode(model, a))
        assert torch.mean((out - a) ** 2).item() < 1e-2


@pytest.mark.slow
def test_intrinsics_overfit_disentangles(overfit):
    model, pairs = overfit
    for a, b in pairs:
        intrinsic_a, code_a = encode(model, a)
        intrinsic_b, code_b = encode(model, b)
        assert intrinsic_similarity(intrinsic_a, intrinsic_b).item() >= 0.9
        assert torch.linalg.vector_norm(code_a - code_b).item() > 10 * torch.finfo(code_a.dtype).eps


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Full pipeline trained on 200 toy scenes, 20 more held out"""
    data = build_paired_dataset(
        220, 7, seed=0, out_dir=tmp_path_factory.mktemp("e2e"), cfg=DatagenConfig(image_size=E2E_SIZE)
    )
    train, held = data.split_scenes(20, seed=0)

    config = tiny_config().model_copy(
        update={"intrinsics": IntrinsicsConfig(image_size=E2E_SIZE, c_int=16, d_light=8, base_channels=16)}
    )
    intrinsics = train_intrinsics(
        train, TrainConfig(steps=3000, batch_size=16, lr=1e-3, checkpoint_every=0), config.intrinsics
    )
    models = LuminetModels.build(config, intrinsics=intrinsics)
    stage = TrainConfig(steps=4000, batch_size=16, lr=2e-4, checkpoint_every=0)
    pretrain_base(models, train, stage)
    LuminetTrainer(models, stage).train(train)
    return models, train, held


@pytest.mark.slow
def test_toy_relighting_end_to_end(trained):
    models, _, held = trained
    report = eval_protocol(LuminetRelighter(models, steps=25), held, n_refs=4, repeats=3)
    assert report.aggregates["rmse_cc"] <= 0.10
    assert report.aggregates["ssim_cc"] >= 0.80


@pytest.mark.slow
def test_self_transfer_keeps_the_image(trained):
    models, train, _ = trained
    for records in list(train.by_scene().values())[:3]:
        image = load_image(train.resolve(records[0]))
        out = relight(models, RelightRequest(source=image, target=image, steps=25))
        assert ssim(out, image) >= 0.85


@pytest.mark.slow
def test_lamp_on_target_brightens_dark_source(trained):
    models, _, _ = trained
    dark_scene = toy_scene(7, 1000, size=E2E_SIZE)
    lit_scene = toy_scene(7, 1001, size=E2E_SIZE)
    source = render_toy(dark_scene, LightingParams(ambient=0.05, lamp_states=[0.0] * len(dark_scene.luminaires)))
    target = render_toy(
        lit_scene,
        LightingParams(ambient=0.3, lamp_states=[1.0] * len(lit_scene.luminaires), specular_strength=0.1),
    )
    out = relight(models, RelightRequest(source=source, target=target, steps=25))
    assert out.mean().item() > source.mean().item()
