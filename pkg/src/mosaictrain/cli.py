"""Command-line surface: train, eval, ablate, corrupt-eval, viz.

Report commands write delimited output (CSV, aligned text tables) and render
matplotlib figures alongside it under the output directory. Exit codes:
0 success, 2 config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import os
import statistics
import sys
from dataclasses import replace
from pathlib import Path

from . import figures
from .checkpoint import load_checkpoint
from .config import ConfigError, resolve
from .data import (
    FolderDataset,
    TransformSpec,
    make_synthetic,
    mix_seed,
    scan_dataset,
    split_per_class,
)
from .errors import (
    BadSizeError,
    CorruptCheckpointError,
    DatasetEmptyError,
    DecodeError,
    InvalidComboError,
    InvalidStageNumError,
    MissingRootError,
    NoClassesError,
    NonFiniteLossError,
    RecursionDepthError,
    ResumeMismatchError,
    UnknownKindError,
    UnknownStageError,
    UnreadableImageError,
    VersionMismatchError,
)
from .evalkit import CorruptionSpec, evaluate, evaluate_plain, gradcam, robustness_eval
from .model import ModelSpec, build_model, model_spec_from_dict
from .trainer import TrainConfig, fit

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_CONFIG_ERRORS = (ConfigError, InvalidStageNumError, InvalidComboError,
                  RecursionDepthError, ResumeMismatchError, UnknownKindError,
                  UnknownStageError, VersionMismatchError,
                  CorruptCheckpointError, ValueError)
_DATA_ERRORS = (MissingRootError, NoClassesError, DatasetEmptyError,
                DecodeError, UnreadableImageError, BadSizeError,
                FileNotFoundError)

# ablation variants in presentation order; value = (progressive, gates, mosaic)
ABLATION_VARIANTS = {
    "baseline": (False, False, False),
    "M": (False, True, False),
    "P": (True, False, False),
    "P&M": (True, True, False),
    "P&R": (True, False, True),
    "P&M&R": (True, True, True),
}


def out_root(cfg: dict) -> Path:
    if cfg["out"]:
        return Path(cfg["out"])
    env = os.environ.get("MOSAICTRAIN_OUT")
    return Path(env) if env else Path("runs")


def build_datasets(cfg: dict):
    """(train dataset, eval dataset) from config: image folder or synthetic."""
    if cfg["data.root"]:
        train_spec = TransformSpec(resize_to=cfg["data.resize_to"],
                                   crop_to=cfg["data.crop_to"], mode="train",
                                   seed=mix_seed(cfg["seed"], 10))
        eval_spec = replace(train_spec, mode="eval")
        train_manifest = scan_dataset(cfg["data.root"], "train")
        train_ds = FolderDataset(train_manifest, train_spec)
        test_dir = Path(cfg["data.root"]) / "test"
        if test_dir.is_dir():
            eval_ds = FolderDataset(scan_dataset(cfg["data.root"], "test"), eval_spec)
        else:
            eval_ds = FolderDataset(train_manifest, eval_spec)
        return train_ds, eval_ds
    ds = make_synthetic(K=cfg["data.synthetic_classes"],
                        per_class=cfg["data.synthetic_per_class"],
                        size=cfg["data.synthetic_size"],
                        seed=mix_seed(cfg["seed"], 11))
    return ds, ds


def train_config_from(cfg: dict, **overrides) -> TrainConfig:
    kwargs = dict(
        epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"],
        lr_pretrained=cfg["train.lr_pretrained"], lr_new=cfg["train.lr_new"],
        weight_decay=cfg["train.weight_decay"], momentum=cfg["train.momentum"],
        freeze_epochs=cfg["train.freeze_epochs"], stage_num=cfg["model.stage_num"],
        seed=cfg["seed"], progressive=cfg["train.progressive"],
        use_mosaic=cfg["train.use_mosaic"])
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def model_spec_from(cfg: dict, num_classes: int, **overrides) -> ModelSpec:
    kwargs = dict(
        num_classes=num_classes, stage_num=cfg["model.stage_num"],
        c=cfg["model.c"],
        mlp_hidden=cfg["model.mlp_hidden"] or None,
        channels=tuple(cfg["model.channels"]),
        input_size=cfg["model.input_size"],
        use_gates=cfg["model.use_gates"])
    kwargs.update(overrides)
    return ModelSpec(**kwargs)


def load_model_from_checkpoint(path):
    state = load_checkpoint(path)
    spec = model_spec_from_dict(state.config["model"])
    model = build_model(spec)
    model.load_state_dict({k[len("model/"):]: v for k, v in state.tensors.items()
                           if k.startswith("model/")})
    model.eval()
    return model, spec, state


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: dict, args) -> int:
    train_ds, eval_ds = build_datasets(cfg)
    num_classes = len(train_ds.classes)
    if cfg["model.stage_num"] > len(cfg["model.channels"]):
        raise InvalidStageNumError(
            f"stage_num={cfg['model.stage_num']} exceeds the backbone's "
            f"{len(cfg['model.channels'])} stages")
    config = train_config_from(cfg)
    spec = model_spec_from(cfg, num_classes)
    out_dir = out_root(cfg)
    result = fit(train_ds, config, spec, eval_dataset=eval_ds, out_dir=out_dir,
                 resume_from=args.resume)
    figures.save_training_curves(result.csv_text, out_dir / "training_curves.png")
    print(f"trained {result.epochs_run} epochs; "
          f"final acc_concat={result.final_eval.acc_concat:.4f} "
          f"acc_mix={result.final_eval.acc_mix:.4f}")
    print(f"metrics: {result.csv_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(cfg: dict, args) -> int:
    model, spec, state = load_model_from_checkpoint(args.checkpoint)
    _, eval_ds = build_datasets(cfg)
    out_dir = out_root(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    if spec.kind == "plain":
        report = evaluate_plain(model, eval_ds)
    else:
        report = evaluate(model, eval_ds)
    lines = ["metric,value",
             f"acc_concat,{report.acc_concat!r}",
             f"acc_mix,{report.acc_mix!r}"]
    for n in sorted(report.per_stage_acc):
        lines.append(f"acc_stage_{n},{report.per_stage_acc[n]!r}")
    lines.append(f"n_samples,{report.n_samples}")
    (out_dir / "eval_report.csv").write_text("\n".join(lines) + "\n")
    print(f"acc_concat={report.acc_concat:.4f} acc_mix={report.acc_mix:.4f} "
          f"n={report.n_samples}")
    print(f"report: {out_dir / 'eval_report.csv'}")
    return EXIT_OK


def parse_variant(label: str) -> str:
    """Normalize a toggle-set label and validate the combination."""
    cleaned = label.strip().lower()
    if cleaned in ("baseline", ""):
        return "baseline"
    letters = {ch for ch in cleaned.upper() if ch in "PMR"}
    leftovers = set(cleaned.upper()) - letters - set("&+ ")
    if leftovers:
        raise InvalidComboError(f"unknown ablation toggles in {label!r}")
    if "R" in letters and "P" not in letters:
        raise InvalidComboError(
            f"variant {label!r}: mosaic input (R) only applies across "
            "progressive phases (P)")
    key = "&".join(ch for ch in "PMR" if ch in letters)
    return key if key else "baseline"


def run_ablation(cfg: dict, variants: list[str], seeds: list[int]):
    """Train every variant on the same split per seed; median accuracies."""
    rows = []
    per_variant: dict[str, list[tuple[float, float | None]]] = {v: [] for v in variants}
    for seed in seeds:
        full = make_synthetic(K=cfg["data.synthetic_classes"],
                              per_class=cfg["data.synthetic_per_class"],
                              size=cfg["data.synthetic_size"],
                              seed=mix_seed(seed, 11))
        train_ds, test_ds = split_per_class(
            full, cfg["data.synthetic_per_class"] // 2)
        num_classes = len(full.classes)
        for label in variants:
            progressive, gates, mosaic_on = ABLATION_VARIANTS[label]
            config = train_config_from(cfg, progressive=progressive,
                                       use_mosaic=mosaic_on, seed=seed)
            kind = "plain" if label == "baseline" else "multistage"
            spec = model_spec_from(cfg, num_classes, kind=kind, use_gates=gates)
            result = fit(train_ds, config, spec, eval_dataset=test_ds)
            if label == "baseline":
                rep = evaluate_plain(result.model, test_ds)
                per_variant[label].append((rep.acc_concat, None))
            elif label == "M":
                rep = evaluate(result.model, test_ds, heads="concat")
                per_variant[label].append((rep.acc_concat, None))
            else:
                rep = evaluate(result.model, test_ds)
                per_variant[label].append((rep.acc_concat, rep.acc_mix))
    for label in variants:
        concat_accs = [a for a, _ in per_variant[label]]
        mix_accs = [m for _, m in per_variant[label] if m is not None]
        rows.append((label,
                     statistics.median(concat_accs),
                     statistics.median(mix_accs) if mix_accs else None))
    return rows


def cmd_ablate(cfg: dict, args) -> int:
    variants = [parse_variant(v) for v in args.variants.split(",")]
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise InvalidComboError(f"unknown variants: {unknown}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg["seed"]]
    rows = run_ablation(cfg, variants, seeds)
    out_dir = out_root(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_lines = ["variant,acc_concat,acc_mix"]
    for label, acc_c, acc_m in rows:
        csv_lines.append(f"{label},{acc_c!r},{'' if acc_m is None else repr(acc_m)}")
    (out_dir / "ablation.csv").write_text("\n".join(csv_lines) + "\n")
    width = max(len(r[0]) for r in rows) + 2
    tbl = [f"{'Variant':<{width}} {'Concat Acc':>11} {'Mix Acc':>9}",
           "-" * (width + 22)]
    for label, acc_c, acc_m in rows:
        mix_s = f"{100 * acc_m:>8.1f}%" if acc_m is not None else f"{'-':>9}"
        tbl.append(f"{label:<{width}} {100 * acc_c:>10.1f}% {mix_s}")
    table_text = "\n".join(tbl) + "\n"
    (out_dir / "ablation.txt").write_text(table_text)
    figures.save_ablation_bars(rows, out_dir / "ablation.png")
    print(table_text, end="")
    print(f"report: {out_dir / 'ablation.csv'}")
    return EXIT_OK


def cmd_corrupt_eval(cfg: dict, args) -> int:
    model, spec, state = load_model_from_checkpoint(args.checkpoint)
    _, eval_ds = build_datasets(cfg)
    specs = []
    names = [] if args.corruptions == "none" else args.corruptions.split(",")
    for name in names:
        name = name.strip()
        if name == "jitter":
            specs.append(CorruptionSpec(
                kind="color_jitter",
                jitter_coefficient=cfg["corrupt.jitter_coefficient"],
                seed=mix_seed(cfg["seed"], 20)))
        elif name == "noise":
            specs.append(CorruptionSpec(
                kind="gaussian_noise", noise_mean=cfg["corrupt.noise_mean"],
                noise_amplitude=cfg["corrupt.noise_amplitude"],
                seed=mix_seed(cfg["seed"], 21)))
        elif name:
            raise UnknownKindError(f"unknown corruption name: {name!r}")
    report = robustness_eval(model, eval_ds, specs)
    out_dir = out_root(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "robustness.csv").write_text(report.to_csv())
    (out_dir / "robustness.txt").write_text(report.to_table())
    figures.save_robustness_bars(report, out_dir / "robustness.png")
    print(report.to_table(), end="")
    print(f"report: {out_dir / 'robustness.csv'}")
    return EXIT_OK


def cmd_viz(cfg: dict, args) -> int:
    model, spec, state = load_model_from_checkpoint(args.checkpoint)
    if spec.kind == "plain":
        raise UnknownStageError("plain baseline models have no interacting stages")
    _, eval_ds = build_datasets(cfg)
    indices = [int(i) for i in args.index.split(",")]
    out_dir = out_root(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = args.target_class
    written = []
    for i in indices:
        img, label = eval_ds[i]
        for stage in model.stage_indices:
            cam, cls = gradcam(model, img, stage, target_class=target)
            path = out_dir / f"sample{i:04d}_stage{stage}_cam.{args.format}"
            figures.save_cam_overlay(img, cam, path)
            written.append(path)
        print(f"sample {i} (label {label}): target class {cls}, "
              f"{len(model.stage_indices)} maps")
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None,
                        help="config file (section.key = value lines)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", type=str, default=None,
                        help="output directory (default $MOSAICTRAIN_OUT or ./runs)")
    common.add_argument("--data", type=str, default=None, dest="data_root",
                        help="dataset root with train/<class>/ layout "
                             "(default: synthetic)")
    common.add_argument("--synthetic-classes", type=int, default=None)
    common.add_argument("--synthetic-per-class", type=int, default=None)

    parser = argparse.ArgumentParser(
        prog="mosaictrain",
        description="Progressive multi-phase training with recursive mosaic "
                    "augmentation and multi-stage feature interaction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", parents=[common], help="train a model")
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--batch-size", type=int, default=None)
    p_train.add_argument("--stage-num", type=int, default=None)
    p_train.add_argument("--c", type=int, default=None)
    p_train.add_argument("--lr-new", type=float, default=None)
    p_train.add_argument("--lr-pretrained", type=float, default=None)
    p_train.add_argument("--weight-decay", type=float, default=None)
    p_train.add_argument("--momentum", type=float, default=None)
    p_train.add_argument("--freeze-epochs", type=int, default=None)
    p_train.add_argument("--channels", type=str, default=None)
    p_train.add_argument("--no-mosaic", action="store_true")
    p_train.add_argument("--no-gates", action="store_true")
    p_train.add_argument("--single-phase", action="store_true")
    p_train.add_argument("--resume", type=str, default=None)

    p_eval = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", type=str, required=True)

    p_ablate = sub.add_parser("ablate", parents=[common],
                              help="component-contribution comparison")
    p_ablate.add_argument("--variants", type=str,
                          default="baseline,M,P,P&M,P&R,P&M&R")
    p_ablate.add_argument("--seeds", type=str, default=None,
                          help="comma-separated seeds; results are medians")
    p_ablate.add_argument("--epochs", type=int, default=None)
    p_ablate.add_argument("--batch-size", type=int, default=None)
    p_ablate.add_argument("--stage-num", type=int, default=None)
    p_ablate.add_argument("--c", type=int, default=None)
    p_ablate.add_argument("--channels", type=str, default=None)

    p_corrupt = sub.add_parser("corrupt-eval", parents=[common],
                               help="robustness under corruptions")
    p_corrupt.add_argument("--checkpoint", type=str, required=True)
    p_corrupt.add_argument("--corruptions", type=str, default="jitter,noise",
                           help="comma list from {jitter,noise}, or 'none'")
    p_corrupt.add_argument("--jitter-coefficient", type=float, default=None)
    p_corrupt.add_argument("--noise-amplitude", type=float, default=None)

    p_viz = sub.add_parser("viz", parents=[common],
                           help="per-stage activation heatmaps")
    p_viz.add_argument("--checkpoint", type=str, required=True)
    p_viz.add_argument("--index", type=str, default="0",
                       help="comma-separated eval-set sample indices")
    p_viz.add_argument("--target-class", type=int, default=None)
    p_viz.add_argument("--format", type=str, default="png",
                       choices=("png", "jpg", "pdf", "svg"))
    return parser


_FLAG_TO_KEY = {
    "seed": "seed", "out": "out", "data_root": "data.root",
    "epochs": "train.epochs", "batch_size": "train.batch_size",
    "stage_num": "model.stage_num", "c": "model.c",
    "lr_new": "train.lr_new", "lr_pretrained": "train.lr_pretrained",
    "weight_decay": "train.weight_decay", "momentum": "train.momentum",
    "freeze_epochs": "train.freeze_epochs", "channels": "model.channels",
    "synthetic_classes": "data.synthetic_classes",
    "synthetic_per_class": "data.synthetic_per_class",
    "jitter_coefficient": "corrupt.jitter_coefficient",
    "noise_amplitude": "corrupt.noise_amplitude",
}


def resolve_config(args) -> dict:
    overrides = {}
    for attr, key in _FLAG_TO_KEY.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "no_mosaic", False):
        overrides["train.use_mosaic"] = False
    if getattr(args, "no_gates", False):
        overrides["model.use_gates"] = False
    if getattr(args, "single_phase", False):
        overrides["train.progressive"] = False
    return resolve(args.config, overrides)


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        handler = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
                   "corrupt-eval": cmd_corrupt_eval, "viz": cmd_viz}[args.command]
        return handler(cfg, args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
