"""Two-stage training orchestration and ablation variants.

Stage 1 trains the preference encoder with the contrastive objective on
content-controlled batches; stage 2 freezes it and trains the quality
encoder, bias predictor and regressor with the Huber+PLCC objective.
Variant switches reproduce the ablation grid: removing the preference
branch, concatenating instead of subtracting, classification-based
preference learning, joint single-phase training, and two-stage training
without freezing.
"""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import losses
from .evalproto import SplitPlan, evaluate
from .metrics import EvalReport
from .models import (
    DebiasModel,
    ModelConfig,
    build_model,
    component_parameters,
    freeze_component,
)
from .sampler import SamplerConfig, epoch_batches
from .synthdata import Manifest, subset_manifest

VARIANTS = (
    "full",
    "no_preference",
    "preference_concat",
    "cls_preference",
    "joint",
    "two_stage_no_freeze",
)

_VARIANT_MODES = {
    "full": "debias",
    "no_preference": "none",
    "preference_concat": "concat",
    "cls_preference": "debias",
    "joint": "debias",
    "two_stage_no_freeze": "debias",
}

_NEEDS_PRETRAIN = ("full", "preference_concat", "cls_preference", "two_stage_no_freeze")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the stage and epoch where it happened."""

    def __init__(self, stage: int, epoch: int):
        super().__init__(f"non-finite loss in stage {stage}, epoch {epoch}")
        self.stage = stage
        self.epoch = epoch


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs_stage1: int = 15
    epochs_stage2: int = 15
    optimizer: str = "adam"
    crop_size: int = 48
    rotate: bool = True
    hflip: bool = True
    seed: int = 0
    variant: str = "full"
    stage1_strategy: str = "content_controlled"
    stage2_strategy: str = "random"
    scenes_per_batch: int = 8
    algos_per_scene: int = 4
    temperature: float = 0.07
    huber_delta: float = 1.0
    lambda_plcc: float = 1.0
    d: int = 64
    D: int = 128
    pref_widths: tuple[int, ...] = (16, 32, 64, 64)
    quality_widths: tuple[int, ...] = (16, 32, 64, 128)
    strict_determinism: bool = False

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 4:
            raise ValueError(f"batch_size must be >= 4, got {self.batch_size}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.temperature <= 0 or self.huber_delta <= 0 or self.lambda_plcc < 0:
            raise ValueError("temperature and huber_delta must be > 0, lambda_plcc >= 0")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d=self.d,
            D=self.D,
            image_size=self.crop_size,
            pref_widths=tuple(self.pref_widths),
            quality_widths=tuple(self.quality_widths),
            preference_mode=_VARIANT_MODES[self.variant],
            seed=self.seed,
        )


@dataclass
class TrainLog:
    seed: int
    variant: str
    entries: list[dict] = field(default_factory=list)
    wall_clock_sec: float = 0.0

    def stage_losses(self, stage: int, key: str) -> list[float]:
        return [e[key] for e in self.entries if e["stage"] == stage]

    def assert_finite(self) -> None:
        for e in self.entries:
            for k, v in e.items():
                if isinstance(v, float) and not np.isfinite(v):
                    raise TrainingDivergedError(e["stage"], e["epoch"])

    def to_jsonl(self, path: str | Path) -> None:
        lines = [json.dumps({"seed": self.seed, "variant": self.variant, "wall_clock_sec": self.wall_clock_sec})]
        lines += [json.dumps(e, sort_keys=True) for e in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "TrainLog":
        lines = Path(path).read_text().splitlines()
        head = json.loads(lines[0])
        log = cls(seed=head["seed"], variant=head["variant"], wall_clock_sec=head.get("wall_clock_sec", 0.0))
        log.entries = [json.loads(line) for line in lines[1:] if line.strip()]
        return log


@dataclass
class RunResult:
    model: DebiasModel
    log: TrainLog
    report: EvalReport | None = None


def _mix(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


@contextmanager
def _determinism(strict: bool):
    if not strict:
        yield
        return
    n_threads = torch.get_num_threads()
    was_deterministic = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(n_threads)
        torch.use_deterministic_algorithms(was_deterministic)


def augment_batch(
    images: np.ndarray,
    indices: np.ndarray,
    crop_size: int,
    rng: np.random.Generator,
    rotate: bool = True,
    hflip: bool = True,
) -> torch.Tensor:
    """Random crop + optional 90-degree rotation and horizontal flip, training mode only."""
    h, w = images.shape[1], images.shape[2]
    if h < crop_size or w < crop_size:
        raise ValueError(f"crop_size {crop_size} exceeds image size {h}x{w}")
    out = np.empty((len(indices), crop_size, crop_size, 3), dtype=images.dtype)
    for row, idx in enumerate(indices):
        top = int(rng.integers(0, h - crop_size + 1))
        left = int(rng.integers(0, w - crop_size + 1))
        patch = images[idx, top : top + crop_size, left : left + crop_size, :]
        if rotate:
            patch = np.rot90(patch, k=int(rng.integers(0, 4)), axes=(0, 1))
        if hflip and rng.random() < 0.5:
            patch = patch[:, ::-1, :]
        out[row] = patch
    return torch.from_numpy(out.transpose(0, 3, 1, 2).copy())


def make_classification_head(d: int, n_classes: int) -> nn.Linear:
    """K-way head on the preference embedding used by the cls_preference variant."""
    return nn.Linear(d, n_classes)


def _contiguous_labels(manifest: Manifest) -> dict[int, int]:
    return {a: i for i, a in enumerate(sorted({r.algo_id for r in manifest.records}))}


def pretrain_preference(
    manifest: Manifest,
    split: SplitPlan,
    cfg: TrainConfig,
    images: np.ndarray,
    objective: str = "supcon",
) -> RunResult:
    """Stage 1: train only the preference encoder on the split's train side.

    objective is "supcon" (default) or "cls" for the classification-based
    ablation; the transient classification head is discarded afterwards.
    """
    cfg.validate()
    if objective not in ("supcon", "cls"):
        raise ValueError(f"unknown objective {objective!r}")
    model = build_model(cfg.model_config())
    log = TrainLog(seed=cfg.seed, variant=cfg.variant)
    if cfg.epochs_stage1 == 0:
        return RunResult(model=model, log=log)

    train_sub = subset_manifest(manifest, split.train_indices)
    sampler_cfg = SamplerConfig(
        batch_size=cfg.batch_size,
        scenes_per_batch=cfg.scenes_per_batch,
        algos_per_scene=cfg.algos_per_scene,
        seed=_mix(cfg.seed, 1),
        strategy=cfg.stage1_strategy,
    )
    epoch_batches(train_sub, sampler_cfg, epoch=0)  # fail on infeasible config before training

    label_map = _contiguous_labels(train_sub)
    head = make_classification_head(cfg.d, len(label_map)) if objective == "cls" else None
    params = [p for _, p in component_parameters(model, "preference")]
    if head is not None:
        head.to(model.cfg.torch_dtype)
        params += list(head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    ce = nn.CrossEntropyLoss()

    start = time.time()
    with _determinism(cfg.strict_determinism):
        for epoch in range(cfg.epochs_stage1):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, epoch, 7]))
            epoch_losses = []
            for batch in epoch_batches(train_sub, sampler_cfg, epoch=epoch):
                orig = np.array([split.train_indices[i] for i in batch.indices])
                x = augment_batch(images, orig, cfg.crop_size, rng, cfg.rotate, cfg.hflip)
                labels = torch.tensor([label_map[train_sub.records[i].algo_id] for i in batch.indices])
                e = model.preference_forward(x)
                if head is None:
                    loss = losses.supcon_loss(e, labels, temperature=cfg.temperature)
                else:
                    loss = ce(head(e), labels)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(stage=1, epoch=epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_losses.append(float(loss.item()))
            log.entries.append(
                {"stage": 1, "epoch": epoch, "loss": float(np.mean(epoch_losses)), "ts": time.time()}
            )
    log.wall_clock_sec = time.time() - start
    return RunResult(model=model, log=log)


def train_quality(
    manifest: Manifest,
    split: SplitPlan,
    pretrained: DebiasModel | None,
    cfg: TrainConfig,
    images: np.ndarray,
    freeze_preference_encoder: bool = True,
) -> RunResult:
    """Stage 2: MOS regression training of the quality branch.

    For variants with a preference branch the pretrained encoder is required
    and (by default) frozen; no_preference builds a fresh quality-only model.
    The model's MOS normalization range is set from the train split here.
    """
    cfg.validate()
    if cfg.variant in _NEEDS_PRETRAIN:
        if pretrained is None:
            raise ValueError(f"variant {cfg.variant!r} requires a pretrained preference encoder")
        model = pretrained
        expected_mode = _VARIANT_MODES[cfg.variant]
        if model.cfg.preference_mode != expected_mode:
            raise ValueError(
                f"variant {cfg.variant!r} needs preference_mode {expected_mode!r}, "
                f"got {model.cfg.preference_mode!r}"
            )
    elif cfg.variant == "no_preference":
        if pretrained is not None:
            raise ValueError("no_preference does not take a pretrained encoder")
        model = build_model(cfg.model_config())
    else:
        raise ValueError(f"variant {cfg.variant!r} is not a two-stage variant; use run_variant")

    mos = np.array([manifest.records[i].mos for i in split.train_indices], dtype=np.float64)
    lo, hi = float(mos.min()), float(mos.max())
    if hi <= lo:
        raise ValueError("train split has constant MOS; cannot normalize")
    model.cfg.mos_min, model.cfg.mos_max = lo, hi
    targets_all = np.array([r.mos for r in manifest.records], dtype=np.float64)
    targets_all = (targets_all - lo) / (hi - lo)

    uses_preference = cfg.variant != "no_preference"
    if uses_preference and freeze_preference_encoder:
        freeze_component(model, "preference")

    trainable = {"quality", "regressor"}
    if model.cfg.preference_mode == "debias":
        trainable.add("bias")
    if uses_preference and not freeze_preference_encoder:
        trainable.add("preference")
    params = [p for comp in sorted(trainable) for _, p in component_parameters(model, comp)]
    opt = torch.optim.Adam(params, lr=cfg.lr)

    log = TrainLog(seed=cfg.seed, variant=cfg.variant)
    sampler_cfg = SamplerConfig(
        batch_size=cfg.batch_size,
        scenes_per_batch=cfg.scenes_per_batch,
        algos_per_scene=cfg.algos_per_scene,
        seed=_mix(cfg.seed, 2),
        strategy=cfg.stage2_strategy,
    )
    train_sub = subset_manifest(manifest, split.train_indices)

    start = time.time()
    model.train()
    with _determinism(cfg.strict_determinism):
        for epoch in range(cfg.epochs_stage2):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, epoch, 7]))
            sums = {"huber": [], "plcc": [], "mos": []}
            for batch in epoch_batches(train_sub, sampler_cfg, epoch=epoch):
                orig = np.array([split.train_indices[i] for i in batch.indices])
                x = augment_batch(images, orig, cfg.crop_size, rng, cfg.rotate, cfg.hflip)
                y = torch.from_numpy(targets_all[orig]).to(model.cfg.torch_dtype)
                preds = model.predict(x)
                hub = losses.huber_loss(preds, y, delta=cfg.huber_delta)
                pl = losses.plcc_loss(preds, y)
                loss = hub + cfg.lambda_plcc * pl
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(stage=2, epoch=epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                sums["huber"].append(float(hub.item()))
                sums["plcc"].append(float(pl.item()))
                sums["mos"].append(float(loss.item()))
            log.entries.append(
                {
                    "stage": 2,
                    "epoch": epoch,
                    "huber": float(np.mean(sums["huber"])),
                    "plcc": float(np.mean(sums["plcc"])),
                    "loss": float(np.mean(sums["mos"])),
                    "ts": time.time(),
                }
            )
    log.wall_clock_sec = time.time() - start
    return RunResult(model=model, log=log)


def _train_joint(manifest: Manifest, split: SplitPlan, cfg: TrainConfig, images: np.ndarray) -> RunResult:
    """Single-phase ablation: all components optimized together from scratch."""
    model = build_model(cfg.model_config())

    mos = np.array([manifest.records[i].mos for i in split.train_indices], dtype=np.float64)
    lo, hi = float(mos.min()), float(mos.max())
    if hi <= lo:
        raise ValueError("train split has constant MOS; cannot normalize")
    model.cfg.mos_min, model.cfg.mos_max = lo, hi
    targets_all = np.array([r.mos for r in manifest.records], dtype=np.float64)
    targets_all = (targets_all - lo) / (hi - lo)

    train_sub = subset_manifest(manifest, split.train_indices)
    label_map = _contiguous_labels(train_sub)
    sampler_cfg = SamplerConfig(
        batch_size=cfg.batch_size,
        scenes_per_batch=cfg.scenes_per_batch,
        algos_per_scene=cfg.algos_per_scene,
        seed=_mix(cfg.seed, 3),
        strategy=cfg.stage1_strategy,  # contrastive term needs positive pairs
    )
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    log = TrainLog(seed=cfg.seed, variant=cfg.variant)

    start = time.time()
    model.train()
    with _determinism(cfg.strict_determinism):
        for epoch in range(cfg.epochs_stage1 + cfg.epochs_stage2):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, epoch, 7]))
            epoch_losses = []
            for batch in epoch_batches(train_sub, sampler_cfg, epoch=epoch):
                orig = np.array([split.train_indices[i] for i in batch.indices])
                x = augment_batch(images, orig, cfg.crop_size, rng, cfg.rotate, cfg.hflip)
                y = torch.from_numpy(targets_all[orig]).to(model.cfg.torch_dtype)
                labels = torch.tensor([label_map[train_sub.records[i].algo_id] for i in batch.indices])
                e = model.preference_forward(x)
                preds = model.regress(model.debias(model.quality_forward(x), model.bias_predict(e)))
                loss = losses.supcon_loss(e, labels, temperature=cfg.temperature) + losses.mos_loss(
                    preds, y, delta=cfg.huber_delta, lambda_plcc=cfg.lambda_plcc
                )
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(stage=1, epoch=epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_losses.append(float(loss.item()))
            log.entries.append(
                {"stage": 1, "epoch": epoch, "loss": float(np.mean(epoch_losses)), "ts": time.time()}
            )
    log.wall_clock_sec = time.time() - start
    return RunResult(model=model, log=log)


def run_variant(
    manifest: Manifest,
    split: SplitPlan,
    cfg: TrainConfig,
    images: np.ndarray,
    pretrained: DebiasModel | None = None,
) -> RunResult:
    """Full pipeline for one ablation variant, evaluated on the split's test side."""
    cfg.validate()
    t0 = time.time()
    if cfg.variant == "joint":
        result = _train_joint(manifest, split, cfg, images)
    elif cfg.variant == "no_preference":
        result = train_quality(manifest, split, None, cfg, images)
    else:
        if pretrained is None:
            objective = "cls" if cfg.variant == "cls_preference" else "supcon"
            stage1 = pretrain_preference(manifest, split, cfg, images, objective=objective)
            pretrained = stage1.model
            stage1_entries = stage1.log.entries
        else:
            stage1_entries = []
        freeze = cfg.variant != "two_stage_no_freeze"
        result = train_quality(manifest, split, pretrained, cfg, images, freeze_preference_encoder=freeze)
        result.log.entries = stage1_entries + result.log.entries

    report = evaluate(result.model, manifest, split, images)
    result.report = report
    result.log.wall_clock_sec = time.time() - t0
    result.log.entries.append(
        {
            "stage": 0,
            "epoch": -1,
            "srcc": report.srcc,
            "plcc": report.plcc,
            "krcc": report.krcc,
            "ts": time.time(),
        }
    )
    return result
