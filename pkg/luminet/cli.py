"""``luminet`` command line: data generation, training, relighting, evaluation and the web service."""

import argparse
import logging
import sys
import time
from pathlib import Path

from luminet.config import RunConfig, config_reference, luminet_home, resolve_config
from luminet.database import session_factory
from luminet.errors import LuminetError, UsageError
from luminet.models.dataset import DatasetManifest
from luminet.models.relight import RelightRequest
from luminet.models.run import RunManifest
from luminet.services.checkpoints import read_header
from luminet.services.datagen import (
    build_paired_dataset,
    filter_by_similarity,
    ingest_image_folder,
    ingest_miiw,
    load_embedder,
)
from luminet.services.diffusion import LuminetModels, LuminetTrainer, relight
from luminet.services.evaluation import (
    IdentityRelighter,
    LuminetRelighter,
    OracleRelighter,
    eval_protocol,
    format_summary,
    write_aggregates_csv,
)
from luminet.services.imaging import contact_sheet, file_hash, load_image, save_image
from luminet.services.intrinsics import IntrinsicsModel, IntrinsicsTrainer, train_intrinsics
from luminet.services.runs import RunRegistry
from luminet.services.selection import nn_select
from luminet.services.training import LossLog

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"


def _default_checkpoint(name: str) -> Path:
    return luminet_home() / "checkpoints" / f"{name}.ckpt"


def _parse_crop(raw: str) -> tuple[int, int, int, int]:
    try:
        x, y, w, h = (int(v) for v in raw.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"crop must be x,y,w,h, got {raw!r}")
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("crop width and height must be positive")
    return x, y, w, h


def _flags(args: argparse.Namespace, mapping: dict[str, str]) -> dict:
    """Nested config dict from the CLI flags that were actually given"""
    nested: dict = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        *sections, leaf = key.split(".")
        cursor = nested
        for section in sections:
            cursor = cursor.setdefault(section, {})
        cursor[leaf] = value
    return nested


def _record_run(
    command: str,
    config: RunConfig,
    started: float,
    inputs: dict[str, Path],
    outputs: list[Path],
    checkpoints: dict[str, Path] | None = None,
    manifest_dir: Path | None = None,
) -> RunManifest:
    manifest = RunManifest(
        command=command,
        argv=sys.argv[1:],
        config=config.model_dump(mode="json"),
        config_hash=config.config_hash(),
        input_hashes={name: file_hash(path) for name, path in inputs.items()},
        checkpoint_versions={name: int(read_header(path)["version"]) for name, path in (checkpoints or {}).items()},
        outputs=[str(p) for p in outputs],
        wall_clock=time.perf_counter() - started,
    )
    manifest_dir = manifest_dir or (outputs[0].parent if outputs else luminet_home())
    db = session_factory()()
    try:
        manifest = RunRegistry(db).record(manifest, manifest_dir / f"run_{command}.json")
    finally:
        db.close()
    if manifest.reproduction:
        logger.info("This run reproduces an earlier %s run", command)
    return manifest


def cmd_datagen(args: argparse.Namespace, config: RunConfig) -> list[Path]:
    started = time.perf_counter()
    cfg = config.datagen
    out_dir = Path(args.out or luminet_home() / "data" / "toy")
    if args.miiw_root:
        manifest = ingest_miiw(args.miiw_root)
    elif args.folder:
        manifest = ingest_image_folder(args.folder)
    else:
        manifest = build_paired_dataset(cfg.n_scenes, cfg.k_lights, cfg.seed, out_dir, cfg=cfg)

    if cfg.filter_threshold is not None:
        if not cfg.embedder:
            raise UsageError("datagen.filter_threshold needs datagen.embedder (module:factory)")
        manifest = filter_by_similarity(manifest, load_embedder(cfg.embedder), threshold=cfg.filter_threshold)

    if args.miiw_root or args.folder or cfg.filter_threshold is not None:
        manifest = manifest.merge(DatasetManifest())
    manifest_path = manifest.write(out_dir / "manifest.jsonl")
    for warning in manifest.warnings:
        print(f"warning: {warning}")
    print(f"{len(manifest.records)} images in {len(manifest.by_scene())} scenes -> {manifest_path}")
    _record_run("datagen", config, started, {}, [manifest_path])
    return [manifest_path]


def cmd_train_intrinsics(args: argparse.Namespace, config: RunConfig) -> Path:
    started = time.perf_counter()
    dataset = DatasetManifest.read(args.data)
    out = Path(args.out or _default_checkpoint("intrinsics"))
    loss_log = LossLog(Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv"))
    cfg = config.train_intrinsics
    if args.resume and out.exists():
        trainer = IntrinsicsTrainer.resume(out, cfg, loss_log=loss_log)
        logger.info("Resuming intrinsics training at step %d", trainer.step)
        trainer.train(dataset)
    else:
        train_intrinsics(dataset, cfg, config.intrinsics, loss_log=loss_log, checkpoint_path=out)
    print(out)
    _record_run("train-intrinsics", config, started, {"data": Path(args.data)}, [out, loss_log.path], {"model": out})
    return out


def _luminet_trainer(args: argparse.Namespace, config: RunConfig, stage: str, out: Path, loss_log: LossLog):
    cfg = config.train_luminet
    if args.resume and out.exists():
        return LuminetTrainer.resume(out, cfg, stage=stage, loss_log=loss_log)
    base = getattr(args, "base", None)
    if base:
        return LuminetTrainer.resume(base, cfg, stage=stage, loss_log=loss_log, checkpoint_path=out)
    intrinsics = IntrinsicsModel.load(args.intrinsics or _default_checkpoint("intrinsics"))
    if intrinsics.cfg != config.intrinsics:
        logger.info("Using the intrinsics settings stored in the checkpoint")
        config = config.model_copy(update={"intrinsics": intrinsics.cfg})
    models = LuminetModels.build(config, intrinsics=intrinsics, seed=cfg.seed)
    return LuminetTrainer(models, cfg, stage=stage, loss_log=loss_log, checkpoint_path=out)


def _cmd_train_stage(args: argparse.Namespace, config: RunConfig, stage: str, command: str) -> Path:
    started = time.perf_counter()
    dataset = DatasetManifest.read(args.data)
    out = Path(args.out or _default_checkpoint("luminet"))
    loss_log = LossLog(Path(args.loss_csv) if args.loss_csv else out.with_suffix(f".{stage}.loss.csv"))
    trainer = _luminet_trainer(args, config, stage, out, loss_log)
    if trainer.step:
        logger.info("Resuming %s training at step %d", stage, trainer.step)
    trainer.train(dataset)
    print(out)
    _record_run(command, config, started, {"data": Path(args.data)}, [out, loss_log.path], {"model": out})
    return out


def cmd_pretrain_base(args: argparse.Namespace, config: RunConfig) -> Path:
    return _cmd_train_stage(args, config, "base", "pretrain-base")


def cmd_train_luminet(args: argparse.Namespace, config: RunConfig) -> Path:
    return _cmd_train_stage(args, config, "luminet", "train-luminet")


def _write_relit(args: argparse.Namespace, config: RunConfig, nn_seeds: int, nn_top: int, command: str) -> list[Path]:
    started = time.perf_counter()
    checkpoint = Path(args.checkpoint or _default_checkpoint("luminet"))
    models = LuminetModels.load(checkpoint)
    size = models.config.intrinsics.image_size
    source = load_image(args.source, size)
    target = load_image(args.target, size)
    steps = args.steps or models.config.diffusion.sample_steps
    request = RelightRequest(source=source, target=target, seed=args.seed or 0, steps=steps)
    out_dir = Path(args.out_dir or luminet_home() / "outputs")

    if nn_seeds:
        ranked = nn_select(models, request, nn_seeds, nn_top, metric=config.selection.metric)
        images = [c.image for c in ranked]
        outputs = [
            save_image(c.image, out_dir / f"rank{rank:02d}_seed{c.seed}_dist{c.distance:.4f}.png")
            for rank, c in enumerate(ranked, start=1)
        ]
    else:
        image = relight(models, request)
        images = [image]
        outputs = [save_image(image, out_dir / f"relit_seed{request.seed}.png")]

    sheet_path = out_dir / "contact_sheet.png"
    contact_sheet([target, source, *images], crops=args.crop or ()).save(sheet_path)
    for path in outputs:
        print(path)
    print(sheet_path)
    inputs = {"source": Path(args.source), "target": Path(args.target)}
    _record_run(command, config, started, inputs, [*outputs, sheet_path], {"model": checkpoint})
    return outputs


def cmd_relight(args: argparse.Namespace, config: RunConfig) -> list[Path]:
    return _write_relit(args, config, config.selection.nn_seeds, config.selection.nn_top, "relight")


def cmd_select(args: argparse.Namespace, config: RunConfig) -> list[Path]:
    nn_seeds = config.selection.nn_seeds or 30
    return _write_relit(args, config, nn_seeds, config.selection.nn_top, "select")


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> Path:
    started = time.perf_counter()
    cfg = config.evaluation
    if cfg.repeats is None:
        raise UsageError("--repeats is required")
    dataset = DatasetManifest.read(args.data)
    checkpoints = {}
    image_size = config.intrinsics.image_size
    if args.oracle:
        relighter = OracleRelighter()
    elif args.identity:
        relighter = IdentityRelighter()
    else:
        checkpoint = Path(args.checkpoint or _default_checkpoint("luminet"))
        models = LuminetModels.load(checkpoint)
        image_size = models.config.intrinsics.image_size
        relighter = LuminetRelighter(models, steps=args.steps or models.config.diffusion.sample_steps, seed=cfg.seed)
        checkpoints["model"] = checkpoint

    report = eval_protocol(
        relighter,
        dataset,
        n_refs=cfg.n_refs,
        repeats=cfg.repeats,
        seed=cfg.seed,
        image_size=image_size,
        color_mode=cfg.color_mode,
        reference_mode=cfg.reference_mode,
    )
    out = Path(args.out or luminet_home() / "reports" / f"eval_{relighter.name}.json")
    report.write(out)
    csv_path = write_aggregates_csv(report, out.with_suffix(".csv"))
    print(format_summary([report]))
    print(out)
    _record_run("evaluate", config, started, {"data": Path(args.data)}, [out, csv_path], checkpoints)
    return out


def cmd_serve(args: argparse.Namespace, config: RunConfig) -> None:
    from luminet.main import serve

    serve(host=args.host, port=args.port)


def cmd_config_docs(args: argparse.Namespace, config: RunConfig) -> None:
    page = config_reference()
    if args.out:
        Path(args.out).write_text(page)
        print(args.out)
    else:
        print(page)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON or key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Override a config key")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(prog="luminet", description="Latent-intrinsic lighting transfer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", parents=[common], help="Render toy scenes or ingest a dataset")
    p.add_argument("--out", help="Dataset directory (manifest.jsonl lands here)")
    p.add_argument("--scenes", type=int)
    p.add_argument("--lights", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    source = p.add_mutually_exclusive_group()
    source.add_argument("--miiw-root", help="Ingest a multi-illumination capture directory instead of rendering")
    source.add_argument("--folder", help="Ingest a folder of unpaired images instead of rendering")
    p.add_argument("--filter-threshold", type=float)
    p.add_argument("--embedder", help="Embedder factory for the similarity filter, module:attr")
    p.set_defaults(
        func=cmd_datagen,
        flag_map={
            "scenes": "datagen.n_scenes",
            "lights": "datagen.k_lights",
            "seed": "datagen.seed",
            "size": "datagen.image_size",
            "filter_threshold": "datagen.filter_threshold",
            "embedder": "datagen.embedder",
        },
    )

    train_flags = ("steps", "batch_size", "lr", "seed")
    p = sub.add_parser("train-intrinsics", parents=[common], help="Train the intrinsic encoder/decoder")
    _add_train_args(p)
    p.set_defaults(func=cmd_train_intrinsics, flag_map={k: f"train_intrinsics.{k}" for k in train_flags})

    for name, func, help_text in (
        ("pretrain-base", cmd_pretrain_base, "Pretrain the unconditioned denoiser"),
        ("train-luminet", cmd_train_luminet, "Train control, cross-attention and adaptor"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        _add_train_args(p)
        p.add_argument("--intrinsics", help="Intrinsics checkpoint")
        if name == "train-luminet":
            p.add_argument("--base", help="Checkpoint from pretrain-base to start from")
        p.set_defaults(func=func, flag_map={k: f"train_luminet.{k}" for k in train_flags})

    for name, func, help_text in (
        ("relight", cmd_relight, "Relight a source image under a target image's lighting"),
        ("select", cmd_select, "Relight with nearest-neighbor seed selection"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--source", required=True)
        p.add_argument("--target", required=True)
        p.add_argument("--checkpoint")
        p.add_argument("--seed", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--nn-seeds", type=int)
        p.add_argument("--nn-top", type=int)
        p.add_argument("--crop", type=_parse_crop, action="append", help="x,y,w,h crop for the contact sheet")
        p.add_argument("--out-dir")
        p.set_defaults(func=func, flag_map={"nn_seeds": "selection.nn_seeds", "nn_top": "selection.nn_top"})

    p = sub.add_parser("evaluate", parents=[common], help="Run the reference-lighting protocol")
    p.add_argument("--data", required=True, help="Dataset manifest")
    p.add_argument("--checkpoint")
    model = p.add_mutually_exclusive_group()
    model.add_argument("--oracle", action="store_true", help="Score the ground truth (debug)")
    model.add_argument("--identity", action="store_true", help="Score the unchanged source")
    p.add_argument("--n-refs", type=int)
    p.add_argument("--repeats", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--color-mode", choices=["gain", "offset"])
    p.add_argument("--reference-mode", choices=["same_scene", "cross_scene"])
    p.add_argument("--out", help="Report JSON path")
    p.set_defaults(
        func=cmd_evaluate,
        flag_map={
            "n_refs": "evaluation.n_refs",
            "repeats": "evaluation.repeats",
            "seed": "evaluation.seed",
            "color_mode": "evaluation.color_mode",
            "reference_mode": "evaluation.reference_mode",
        },
    )

    p = sub.add_parser("serve", parents=[common], help="Run the HTTP relighting service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8081)
    p.set_defaults(func=cmd_serve, flag_map={})

    p = sub.add_parser("config-docs", parents=[common], help="Print the configuration reference")
    p.add_argument("--out")
    p.set_defaults(func=cmd_config_docs, flag_map={})
    return parser


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="Dataset manifest")
    p.add_argument("--out", help="Checkpoint path")
    p.add_argument("--loss-csv")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="Continue from --out if it exists")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        config = resolve_config(args.config, args.set, _flags(args, args.flag_map))
        args.func(args, config)
    except LuminetError as e:
        logger.error("%s", e)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
