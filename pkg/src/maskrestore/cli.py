"""Command-line driver for the full pipeline.

Commands: synth, pretrain, mac-rank, finetune, eval, twin-infer. Every run
writes into a fresh timestamp-plus-seed directory under --out, starting
with the effective configuration, so any run can be reproduced from its
own directory. Reports are written as delimited text with matplotlib
figures rendered alongside.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import rng
from .attribution import read_report, write_report
from .checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint
from .config import ConfigError, RunConfig, parse_config, validate, write_config
from .degrade import load_dataset, export_dataset, make_eval_sets, make_pair_batch
from .extractor_fixture import load_fixture_extractor
from .masking import sample_mask, importance_map, write_mask_image
from .models import build_extractor, build_restorer, build_scorer, scorer_forward
from .fusion import build_fusion
from .pipeline import (
    TrainSettings,
    evaluate,
    finetune,
    mac_rank_restorer,
    pretrain,
    twin_mask_infer,
)
from .plots import (
    save_cka_heatmap,
    save_layer_scores,
    save_loss_curves,
    save_metric_bars,
    save_sample_grid,
)
from .ppm import read_ppm, write_ppm
from .autodiff import Tensor


class CliError(RuntimeError):
    pass


def make_run_dir(config: RunConfig) -> Path:
    parent = Path(config.out)
    parent.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = f"{stamp}-seed{config.seed}"
    run_dir = parent / base
    counter = 1
    while run_dir.exists():
        counter += 1
        run_dir = parent / f"{base}.{counter}"
    run_dir.mkdir()
    write_config(config, run_dir / "effective.cfg")
    return run_dir


def _require(config: RunConfig, field: str, hint: str) -> Path:
    value = getattr(config, field)
    if not value:
        raise CliError(f"stage {config.stage!r} needs --{field.replace('_', '-')}; {hint}")
    path = Path(value)
    if not path.exists():
        raise CliError(f"--{field.replace('_', '-')} path {path} does not exist; {hint}")
    return path


def _train_settings(config: RunConfig, steps: int) -> TrainSettings:
    return TrainSettings(
        steps=steps,
        batch_size=config.batch_size,
        seed=config.seed,
        rho=config.rho,
        patch=config.patch,
        mask_fill=config.mask_fill,
        mask_loss_weight=config.mask_loss_weight,
        lr_max=config.lr_max,
        lr_min=config.lr_min,
        scorer_lr_max=config.scorer_lr_max,
        scorer_lr_min=config.scorer_lr_min,
        checkpoint_every=config.checkpoint_every,
    )


def _write_curve(path, result) -> None:
    lines = ["# step restoration_l1 mask_loss"]
    for i, value in enumerate(result.restoration_curve, start=1):
        mask_val = result.mask_curve[i - 1] if result.mask_curve else float("nan")
        lines.append(f"{i} {value!r} {mask_val!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# stages


def cmd_synth(config: RunConfig, run_dir: Path) -> None:
    kinds = config.kinds()
    train_seeds = [config.seed * 1_000_000 + i for i in range(config.n_train)]
    pairs = make_pair_batch(train_seeds, kinds, size=config.image_size)
    export_dataset(run_dir / "dataset" / "train", pairs)
    eval_seeds = [config.seed * 1_000_000 + 500_000 + i for i in range(config.n_eval)]
    eval_sets = make_eval_sets(eval_seeds, kinds, size=config.image_size)
    for kind, kpairs in eval_sets.items():
        export_dataset(run_dir / "dataset" / "eval" / kind, kpairs)
    preview = {
        "clean": np.stack([p.clean for p in pairs[:6]]),
        "degraded": np.stack([p.degraded for p in pairs[:6]]),
    }
    save_sample_grid(run_dir / "samples.png", preview)
    print(f"dataset: {config.n_train} train pairs, {config.n_eval} eval pairs "
          f"per kind ({', '.join(kinds)}) -> {run_dir / 'dataset'}")


def cmd_pretrain(config: RunConfig, run_dir: Path) -> None:
    data = _require(config, "data", "point it at a synth run's dataset directory")
    pairs = load_dataset(data / "train")
    restorer = build_restorer(seed=config.seed, base_channels=config.base_channels)
    scorer = build_scorer(seed=config.seed, patch=config.patch)
    settings = _train_settings(config, config.pretrain_steps)

    def checkpoint_cb(step: int) -> None:
        save_checkpoint(run_dir / f"stage1-step{step}.ckpt",
                        {"restorer": restorer, "scorer": scorer}, step=step)

    result = pretrain(restorer, scorer, pairs, settings, on_checkpoint=checkpoint_cb)
    save_checkpoint(run_dir / "stage1.ckpt", {"restorer": restorer, "scorer": scorer},
                    step=settings.steps, rng_state={"seed": config.seed})
    _write_curve(run_dir / "loss_curve.txt", result)
    save_loss_curves(run_dir / "loss_curve.png",
                     {"masked-region L1": result.restoration_curve,
                      "mask objective": [abs(v) + 1e-12 for v in result.mask_curve]},
                     "stage-1 pre-training")
    print(f"pre-trained {settings.steps} steps; final masked-region L1 "
          f"{result.restoration_curve[-1]:.4f} -> {run_dir / 'stage1.ckpt'}")


def _load_stage1(config: RunConfig):
    ckpt = _require(config, "checkpoint", "run `maskrestore pretrain` first")
    manifest, tensors = load_checkpoint(ckpt)
    restorer = build_restorer(seed=config.seed, base_channels=config.base_channels)
    scorer = build_scorer(seed=config.seed, patch=config.patch)
    load_into(restorer, tensors, "restorer")
    load_into(scorer, tensors, "scorer")
    return restorer, scorer, manifest, tensors


def cmd_mac_rank(config: RunConfig, run_dir: Path) -> None:
    data = _require(config, "data", "point it at a synth run's dataset directory")
    restorer, scorer, _, _ = _load_stage1(config)
    pairs = load_dataset(data / "train")
    by_kind: dict[str, list] = {}
    for pair in pairs:
        by_kind.setdefault(pair.spec.kind, []).append(pair)
    probe = []
    for kind in sorted(by_kind):
        probe.extend(by_kind[kind][: config.probe_per_kind])
    report = mac_rank_restorer(
        restorer, scorer, probe,
        rho=config.rho, patch=config.patch, sharpness=config.delta,
        partial_ratio=config.partial_ratio, steps=config.path_steps,
        k_percent=config.k_percent, seed=config.seed,
        aggregate=config.mac_aggregate,
    )
    write_report(run_dir / "layer_report.txt", report)
    save_layer_scores(run_dir / "mac_scores.png",
                      [e.name for e in report.entries],
                      [e.score for e in report.entries],
                      [e.selected for e in report.entries])
    picked = ", ".join(report.selected_names)
    print(f"ranked {len(report.entries)} layers over a {len(probe)}-image probe; "
          f"top {config.k_percent:g}%: {picked}")


def cmd_finetune(config: RunConfig, run_dir: Path) -> None:
    data = _require(config, "data", "point it at a synth run's dataset directory")
    restorer, _, _, _ = _load_stage1(config)
    report = None
    if config.report:
        report = read_report(_require(config, "report", "run `maskrestore mac-rank` first"))
    elif config.k_percent < 100.0:
        raise CliError(
            "fine-tuning a subset of layers (k_percent < 100) needs --report; "
            "run `maskrestore mac-rank` first"
        )
    pairs = load_dataset(data / "train")
    fusion_params = build_fusion(seed=config.seed, base_channels=config.base_channels)
    extractor = load_fixture_extractor()
    settings = _train_settings(config, config.finetune_steps)

    def checkpoint_cb(step: int) -> None:
        save_checkpoint(run_dir / f"stage2-step{step}.ckpt",
                        {"restorer": restorer, "fusion": fusion_params,
                         "extractor": extractor}, step=step)

    result = finetune(restorer, pairs, settings, report=report,
                      fusion_params=fusion_params, extractor=extractor,
                      on_checkpoint=checkpoint_cb)
    save_checkpoint(run_dir / "stage2.ckpt",
                    {"restorer": restorer, "fusion": fusion_params,
                     "extractor": extractor},
                    step=settings.steps, rng_state={"seed": config.seed})
    _write_curve(run_dir / "loss_curve.txt", result)
    save_loss_curves(run_dir / "loss_curve.png",
                     {"full-image L1": result.restoration_curve}, "stage-2 fine-tuning")
    trained = report.selected_names if report else "all"
    print(f"fine-tuned {settings.steps} steps (trainable: {trained}); "
          f"final L1 {result.restoration_curve[-1]:.4f} -> {run_dir / 'stage2.ckpt'}")


def report_emit(records, fmt: str = "table") -> str:
    """Render metric records with fixed precision and stable column order."""
    if not records:
        raise ValueError("no records to report")
    if fmt == "table":
        lines = [f"{'kind':<16} {'psnr':>7} {'ssim':>7} {'n':>5}"]
        lines += [f"{r.kind:<16} {r.psnr:>7.2f} {r.ssim:>7.4f} {r.n:>5d}" for r in records]
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        lines = ["kind,psnr,ssim,n"]
        lines += [f"{r.kind},{r.psnr:.2f},{r.ssim:.4f},{r.n}" for r in records]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}; use 'table' or 'csv'")


def _load_eval_models(config: RunConfig):
    ckpt = _require(config, "checkpoint", "run `maskrestore finetune` (or pretrain) first")
    manifest, tensors = load_checkpoint(ckpt)
    restorer = build_restorer(seed=config.seed, base_channels=config.base_channels)
    load_into(restorer, tensors, "restorer")
    fusion_params = extractor = None
    if any(key.startswith("fusion/") for key in tensors):
        fusion_params = build_fusion(seed=config.seed, base_channels=config.base_channels)
        extractor = build_extractor(seed=config.seed)
        load_into(fusion_params, tensors, "fusion")
        load_into(extractor, tensors, "extractor")
    return restorer, fusion_params, extractor


def cmd_eval(config: RunConfig, run_dir: Path) -> None:
    data = _require(config, "data", "point it at a synth run's dataset directory")
    restorer, fusion_params, extractor = _load_eval_models(config)
    eval_root = data / "eval"
    if not eval_root.exists():
        raise CliError(f"{data} has no eval/ subdirectory; re-run `maskrestore synth`")
    test_sets = {
        kind_dir.name: load_dataset(kind_dir)
        for kind_dir in sorted(eval_root.iterdir())
        if kind_dir.is_dir()
    }
    result = evaluate(restorer, test_sets, fusion_params, extractor)
    table = report_emit(result.records, "table")
    summary = (
        f"\nmean psnr {result.psnr_mean:.2f}  mean ssim {result.ssim_mean:.4f}  "
        f"psnr variance {result.psnr_variance:.4f}  ssim variance {result.ssim_variance:.6f}\n"
    )
    (run_dir / "metrics.txt").write_text(table + summary)
    (run_dir / "metrics.csv").write_text(report_emit(result.records, "csv"))
    cka_lines = ["kind " + " ".join(result.kinds)]
    for kind, row in zip(result.kinds, result.cka_matrix):
        cka_lines.append(kind + " " + " ".join(f"{v:.6f}" for v in row))
    (run_dir / "cka.txt").write_text("\n".join(cka_lines) + "\n")
    save_metric_bars(run_dir / "metrics.png", [r.kind for r in result.records],
                     [r.psnr for r in result.records], [r.ssim for r in result.records])
    save_cka_heatmap(run_dir / "cka.png", result.kinds, result.cka_matrix)
    print(table + summary.rstrip())


def cmd_twin_infer(config: RunConfig, run_dir: Path) -> None:
    data = _require(config, "data", "a dataset directory or a directory of .ppm files")
    restorer, scorer, _, _ = _load_stage1(config)
    if (data / "eval").exists():
        kind_dirs = sorted(p for p in (data / "eval").iterdir() if p.is_dir())
        pairs = load_dataset(kind_dirs[0])
        images = [p.degraded for p in pairs]
    elif (data / "manifest.txt").exists():
        images = [p.degraded for p in load_dataset(data)]
    else:
        ppms = sorted(data.glob("*.ppm"))
        if not ppms:
            raise CliError(f"{data} holds no dataset manifest and no .ppm files")
        images = [read_ppm(p) for p in ppms]
    out_images = run_dir / "restored"
    out_masks = run_dir / "masks"
    out_images.mkdir()
    out_masks.mkdir()
    shown = {"input": [], "restored": []}
    for i, image in enumerate(images):
        h, w = image.shape[-2:]
        scores = scorer_forward(scorer, Tensor(image.astype(np.float32)), patch=config.patch)
        pix = importance_map(scores.data.astype(np.float64), h, w, config.patch)
        plan = sample_mask(pix, config.rho, rng.stream(config.seed, "twin", i))
        restored = twin_mask_infer(restorer, image, plan.mask)
        write_ppm(out_images / f"{i:04d}.ppm", np.clip(restored, 0, 1))
        write_mask_image(out_masks / f"{i:04d}.pgm", plan.mask)
        if len(shown["input"]) < 6:
            shown["input"].append(image)
            shown["restored"].append(np.clip(restored, 0, 1))
    save_sample_grid(run_dir / "twin_compare.png",
                     {k: np.stack(v) for k, v in shown.items()})
    print(f"restored {len(images)} images -> {out_images}")


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "mac-rank": cmd_mac_rank,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "twin-infer": cmd_twin_infer,
}


def run_command(config: RunConfig) -> Path:
    """Validate, create the run directory, execute the stage, return the dir."""
    validate(config)
    if config.stage not in COMMANDS:
        raise ConfigError(f"field 'stage' = {config.stage!r} outside its legal range {tuple(COMMANDS)}")
    run_dir = make_run_dir(config)
    COMMANDS[config.stage](config, run_dir)
    return run_dir


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskrestore",
        description="masked pre-training, conductance-ranked fine-tuning and evaluation "
                    "for small restoration networks",
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    flag_fields = [f for f in fields(RunConfig) if f.name != "stage"]
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file; flags override it")
        for f in flag_fields:
            p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name,
                           default=argparse.SUPPRESS, metavar=f.name.upper())
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("stage", "config")}
    overrides["stage"] = args.stage
    try:
        config = parse_config(getattr(args, "config", None), overrides)
        run_dir = run_command(config)
    except (ConfigError, CliError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"artifacts in {run_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
