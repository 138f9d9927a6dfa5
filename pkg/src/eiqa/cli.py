"""Command-line interface: gen-data, pretrain, train, eval, ablate, report.

Config precedence is flags > config file > defaults; the config file is a
flat `key = value` text format. The EIQA_SEED environment variable
overrides the default seed when neither a flag nor the config file sets
one. Exit codes: 0 success, 2 usage or configuration error, 3 numerical
failure (training divergence).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .evalproto import PROTOCOLS, SplitPlan, algo_disjoint_split, evaluate, kfold_env_split, standard_split
from .metrics import DegenerateInputError, EvalReport
from .models import CheckpointConfigError, load_checkpoint, save_checkpoint
from .report import (
    read_eval_report,
    read_predictions,
    render_algo_errors,
    render_scatter,
    write_drop_table,
    write_eval_report,
    write_predictions,
    write_variant_table,
)
from .sampler import STRATEGIES
from .synthdata import DatasetConfig, Manifest, build_dataset, load_images, load_manifest
from .train import VARIANTS, TrainConfig, TrainingDivergedError, pretrain_preference, run_variant, train_quality

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

# ablation axes of the variant grid; each cell is (variant, stage1 sampling)
ABLATION_AXES: dict[str, list[tuple[str, str]]] = {
    "debiasing": [
        ("no_preference", "content_controlled"),
        ("preference_concat", "content_controlled"),
        ("full", "content_controlled"),
    ],
    "preference_learning": [
        ("no_preference", "content_controlled"),
        ("cls_preference", "content_controlled"),
        ("full", "content_controlled"),
    ],
    "training_strategy": [
        ("joint", "content_controlled"),
        ("two_stage_no_freeze", "content_controlled"),
        ("full", "content_controlled"),
    ],
    "sampling": [
        ("full", "random"),
        ("full", "algo_balanced"),
        ("full", "content_controlled"),
    ],
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        return args.handler(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError, CheckpointConfigError, DegenerateInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eiqa", description=__doc__)
    parser.add_argument("--version", action="version", version=f"eiqa {__version__}")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--algos", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_gen_data)

    for name, handler in (("pretrain", cmd_pretrain), ("train", cmd_train)):
        p = sub.add_parser(name, help=f"{name} on a dataset split")
        _add_train_flags(p)
        if name == "train":
            p.add_argument("--pretrained", type=Path, default=None, help="stage-1 checkpoint")
        p.set_defaults(handler=handler)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--data", type=Path, required=True, help="manifest file")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_split_flags(p)
    p.add_argument("--strict-determinism", action="store_true")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", help="run the variant grid and emit ablation tables")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=int, default=1, help="number of seeds per cell")
    p.add_argument("--parallel", type=int, default=1, help="worker processes")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--epochs-stage1", type=int, default=None)
    p.add_argument("--epochs-stage2", type=int, default=None)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("report", help="render figures and tables from eval artifacts")
    p.add_argument("--eval-dir", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_report)

    return parser


_FLAG_NAMES = {"d": "--pref-dim", "D": "--quality-dim"}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True, help="manifest file")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None, help="flat key=value config file")
    for f in fields(TrainConfig):
        if f.name in ("pref_widths", "quality_widths"):
            continue
        flag = _FLAG_NAMES.get(f.name, "--" + f.name.replace("_", "-"))
        if isinstance(f.default, bool):
            if f.name == "strict_determinism":
                p.add_argument("--strict-determinism", action="store_true", default=None)
            else:
                p.add_argument(flag, dest=f.name, type=_parse_bool, default=None)
        elif isinstance(f.default, int):
            p.add_argument(flag, dest=f.name, type=int, default=None)
        elif isinstance(f.default, float):
            p.add_argument(flag, dest=f.name, type=float, default=None)
        else:
            p.add_argument(flag, dest=f.name, type=str, default=None)
    _add_split_flags(p)


def _add_split_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split-file", type=Path, default=None, help="reuse a saved split.json")
    p.add_argument("--protocol", choices=PROTOCOLS, default=None)
    p.add_argument("--test-fraction", type=float, default=None)
    p.add_argument("--train-algos", type=int, default=None, help="algo_disjoint: training algorithm count")
    p.add_argument("--kfolds", type=int, default=None)
    p.add_argument("--fold", type=int, default=None, help="kfold_env: which fold to use")
    p.add_argument("--split-seed", type=int, default=None)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def parse_config_file(path: Path) -> dict[str, str]:
    """Flat `key = value` lines; # starts a comment."""
    out: dict[str, str] = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(value: str, template):
    if isinstance(template, bool):
        return _parse_bool(value)
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    return value


def _default_seed() -> int:
    env = os.environ.get("EIQA_SEED")
    return int(env) if env else 0


def resolve_train_config(args) -> TrainConfig:
    """flags > config file > defaults (EIQA_SEED overrides the default seed)."""
    cfg = TrainConfig(seed=_default_seed())
    file_cfg = parse_config_file(args.config) if getattr(args, "config", None) else {}
    for f in fields(TrainConfig):
        if f.name in ("pref_widths", "quality_widths"):
            continue
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            setattr(cfg, f.name, flag_value)
        elif f.name in file_cfg:
            setattr(cfg, f.name, _coerce(file_cfg[f.name], getattr(cfg, f.name)))
    cfg.validate()
    return cfg


def resolve_split(args, manifest: Manifest, default_seed: int) -> SplitPlan:
    if getattr(args, "split_file", None):
        return load_split(args.split_file)
    protocol = args.protocol or "standard"
    seed = args.split_seed if args.split_seed is not None else default_seed
    if protocol == "standard":
        fraction = args.test_fraction if args.test_fraction is not None else 0.2
        return standard_split(manifest, fraction, seed)
    if protocol == "algo_disjoint":
        n_train = args.train_algos if args.train_algos is not None else manifest.k_algorithms - 2
        return algo_disjoint_split(manifest, n_train, seed)
    k = args.kfolds if args.kfolds is not None else 5
    fold = args.fold if args.fold is not None else 0
    plans = kfold_env_split(manifest, k)
    if not 0 <= fold < k:
        raise ValueError(f"fold must be in [0, {k}), got {fold}")
    return plans[fold]


def save_split(plan: SplitPlan, path: Path) -> None:
    payload = {
        "protocol": plan.protocol,
        "seed": plan.seed,
        "fold_id": plan.fold_id,
        "train_indices": list(plan.train_indices),
        "test_indices": list(plan.test_indices),
        "test_envs": list(plan.test_envs),
        "test_algos": list(plan.test_algos),
    }
    path.write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_split(path: Path) -> SplitPlan:
    data = json.loads(Path(path).read_text())
    return SplitPlan(
        train_indices=tuple(data["train_indices"]),
        test_indices=tuple(data["test_indices"]),
        protocol=data["protocol"],
        seed=data["seed"],
        fold_id=data["fold_id"],
        test_envs=tuple(data["test_envs"]),
        test_algos=tuple(data["test_algos"]),
    )


def _write_run_manifest(out_dir: Path, command: str, config: dict, outputs: list[str], started: float) -> None:
    payload = {
        "command": command,
        "argv": sys.argv[1:] if sys.argv else [],
        "version": __version__,
        "config": config,
        "outputs": sorted(outputs),
        "wall_clock_sec": round(time.time() - started, 3),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_data(manifest_path: Path):
    manifest = load_manifest(manifest_path)
    images = load_images(manifest, manifest_path.parent)
    return manifest, images


# -- command handlers -------------------------------------------------------


def cmd_gen_data(args) -> int:
    started = time.time()
    file_cfg = parse_config_file(args.config) if args.config else {}
    cfg = DatasetConfig(
        n_scenes=args.scenes if args.scenes is not None else int(file_cfg.get("scenes", 290)),
        k_algorithms=args.algos if args.algos is not None else int(file_cfg.get("algos", 10)),
        size=args.size if args.size is not None else int(file_cfg.get("size", 64)),
        seed=args.seed if args.seed is not None else int(file_cfg.get("seed", _default_seed())),
    )
    args.out.mkdir(parents=True, exist_ok=True)
    manifest = build_dataset(cfg, args.out)
    outputs = ["manifest.tsv"] + [r.enhanced_path for r in manifest.records]
    _write_run_manifest(args.out, "gen-data", asdict(cfg), outputs, started)
    print(
        f"wrote {len(manifest.records)} records "
        f"({cfg.n_scenes} scenes x {cfg.k_algorithms} algorithms) to {args.out}"
    )
    return EXIT_OK


def cmd_pretrain(args) -> int:
    started = time.time()
    cfg = resolve_train_config(args)
    manifest, images = _load_data(args.data)
    split = resolve_split(args, manifest, cfg.seed)
    objective = "cls" if cfg.variant == "cls_preference" else "supcon"
    result = pretrain_preference(manifest, split, cfg, images, objective=objective)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, args.out / "pretrain_ckpt.npz")
    result.log.to_jsonl(args.out / "pretrain_log.jsonl")
    save_split(split, args.out / "split.json")
    _write_run_manifest(
        args.out, "pretrain", asdict(cfg), ["pretrain_ckpt.npz", "pretrain_log.jsonl", "split.json"], started
    )
    losses = result.log.stage_losses(1, "loss")
    tail = f"; contrastive loss {losses[0]:.4f} -> {losses[-1]:.4f}" if losses else ""
    print(f"pretrained preference encoder for {cfg.epochs_stage1} epochs{tail}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    cfg = resolve_train_config(args)
    manifest, images = _load_data(args.data)
    split = resolve_split(args, manifest, cfg.seed)
    pretrained = None
    if args.pretrained is not None:
        pretrained = load_checkpoint(args.pretrained, expect={"d": cfg.d, "D": cfg.D, "image_size": cfg.crop_size})
    if cfg.variant == "no_preference" and pretrained is not None:
        raise ValueError("--pretrained is not used by variant no_preference")
    if cfg.variant in ("full", "preference_concat", "cls_preference", "two_stage_no_freeze"):
        if pretrained is None:
            raise ValueError(f"variant {cfg.variant!r} needs --pretrained from the pretrain command")
        freeze = cfg.variant != "two_stage_no_freeze"
        result = train_quality(manifest, split, pretrained, cfg, images, freeze_preference_encoder=freeze)
    else:
        result = run_variant(manifest, split, cfg, images)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, args.out / "model_ckpt.npz")
    result.log.to_jsonl(args.out / "train_log.jsonl")
    save_split(split, args.out / "split.json")
    _write_run_manifest(
        args.out, "train", asdict(cfg), ["model_ckpt.npz", "train_log.jsonl", "split.json"], started
    )
    print(f"trained variant {cfg.variant} for {cfg.epochs_stage2} quality epochs")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    manifest, images = _load_data(args.data)
    model = load_checkpoint(args.checkpoint)
    if model.cfg.image_size > manifest.image_size:
        raise CheckpointConfigError(
            f"checkpoint expects {model.cfg.image_size} pixel inputs but the manifest "
            f"images are {manifest.image_size} pixels"
        )
    split = resolve_split(args, manifest, _default_seed())
    report, predictions = evaluate(model, manifest, split, images, return_predictions=True)
    args.out.mkdir(parents=True, exist_ok=True)
    write_eval_report(report, args.out / "eval_report.tsv")
    write_predictions(manifest.records, predictions, split.test_indices, args.out / "predictions.tsv")
    save_split(split, args.out / "split.json")
    _write_run_manifest(
        args.out,
        "eval",
        {"checkpoint": str(args.checkpoint), "data": str(args.data), "protocol": split.protocol},
        ["eval_report.tsv", "predictions.tsv", "split.json"],
        started,
    )
    print(f"srcc {report.srcc:.4f}\tplcc {report.plcc:.4f}\tkrcc {report.krcc:.4f}\tn {report.n}")
    return EXIT_OK


def _ablate_cell(payload: dict) -> dict:
    """Worker for one (seed, cell) ablation run; returns metric dicts or an error."""
    manifest = load_manifest(Path(payload["manifest_path"]))
    images = load_images(manifest, Path(payload["manifest_path"]).parent)
    cfg = TrainConfig(**payload["train_config"])
    out: dict = {"cell": payload["cell"], "seed": cfg.seed}
    try:
        split = standard_split(manifest, 0.2, cfg.seed)
        result = run_variant(manifest, split, cfg, images)
        out["standard"] = asdict(result.report)
        if payload["with_drop"]:
            dis = algo_disjoint_split(manifest, manifest.k_algorithms - 2, cfg.seed)
            dis_result = run_variant(manifest, dis, cfg, images)
            out["unseen"] = asdict(dis_result.report)
    except Exception as exc:  # cell failures are recorded, not fatal
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


def cmd_ablate(args) -> int:
    started = time.time()
    file_cfg = parse_config_file(args.config) if args.config else {}
    base = TrainConfig(seed=_default_seed())
    for key, value in file_cfg.items():
        if hasattr(base, key) and key not in ("pref_widths", "quality_widths"):
            setattr(base, key, _coerce(value, getattr(base, key)))
    if args.epochs_stage1 is not None:
        base.epochs_stage1 = args.epochs_stage1
    if args.epochs_stage2 is not None:
        base.epochs_stage2 = args.epochs_stage2
    base.validate()

    cells = sorted({cell for axis in ABLATION_AXES.values() for cell in axis})
    drop_cells = {("full", "content_controlled"), ("no_preference", "content_controlled")}
    jobs = []
    for seed_offset in range(args.seeds):
        for cell in cells:
            cfg_kwargs = asdict(base)
            cfg_kwargs.update(
                seed=base.seed + seed_offset,
                variant=cell[0],
                stage1_strategy=cell[1],
                pref_widths=tuple(base.pref_widths),
                quality_widths=tuple(base.quality_widths),
            )
            jobs.append(
                {
                    "manifest_path": str(args.data),
                    "train_config": cfg_kwargs,
                    "cell": list(cell),
                    "with_drop": cell in drop_cells,
                }
            )

    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_ablate_cell, jobs))
    else:
        results = [_ablate_cell(job) for job in jobs]

    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "cells.jsonl").write_text("\n".join(json.dumps(r, sort_keys=True) for r in results) + "\n")
    failures = [r for r in results if "error" in r]
    for failure in failures:
        print(f"cell {failure['cell']} seed {failure['seed']} failed: {failure['error']}", file=sys.stderr)

    by_cell: dict[tuple[str, str], list[dict]] = {}
    for r in results:
        if "error" not in r:
            by_cell.setdefault(tuple(r["cell"]), []).append(r)

    def mean_report(cell: tuple[str, str], key: str) -> EvalReport | None:
        rows = [r[key] for r in by_cell.get(cell, []) if key in r]
        if not rows:
            return None
        return EvalReport(
            srcc=float(np.mean([r["srcc"] for r in rows])),
            plcc=float(np.mean([r["plcc"] for r in rows])),
            krcc=float(np.mean([r["krcc"] for r in rows])),
            n=len(rows),
        )

    outputs = ["cells.jsonl"]
    for axis, axis_cells in ABLATION_AXES.items():
        rows = {}
        for cell in axis_cells:
            label = cell[1] if axis == "sampling" else cell[0]
            rep = mean_report(cell, "standard")
            if rep is not None:
                rows[label] = rep
        path = args.out / f"table_{axis}.tsv"
        write_variant_table(rows, path, title=f"{axis} (mean over {args.seeds} seeds, standard protocol)")
        outputs.append(path.name)

    drop_rows = {}
    for cell in sorted(drop_cells):
        std = mean_report(cell, "standard")
        unseen = mean_report(cell, "unseen")
        if std is not None and unseen is not None:
            drop_rows[cell[0]] = (std, unseen)
    write_drop_table(drop_rows, args.out / "table_drop.tsv")
    outputs.append("table_drop.tsv")

    _write_run_manifest(args.out, "ablate", asdict(base), outputs, started)
    print(f"wrote {len(outputs) - 1} tables to {args.out}" + (f" ({len(failures)} cells failed)" if failures else ""))
    return EXIT_OK if not failures else 1


def cmd_report(args) -> int:
    started = time.time()
    report_path = args.eval_dir / "eval_report.tsv"
    pred_path = args.eval_dir / "predictions.tsv"
    if not report_path.is_file() or not pred_path.is_file():
        raise ValueError(f"missing eval artifacts under {args.eval_dir} (need eval_report.tsv and predictions.tsv)")
    report = read_eval_report(report_path)
    preds = read_predictions(pred_path)
    args.out.mkdir(parents=True, exist_ok=True)
    render_scatter(preds["mos"], preds["prediction"], args.out / "scatter.svg")
    render_algo_errors(preds["algo_id"], preds["mos"], preds["prediction"], args.out / "algo_error.svg")
    write_eval_report(report, args.out / "eval_report.tsv")
    _write_run_manifest(
        args.out,
        "report",
        {"eval_dir": str(args.eval_dir)},
        ["scatter.svg", "algo_error.svg", "eval_report.tsv"],
        started,
    )
    print(f"rendered scatter.svg and algo_error.svg to {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
