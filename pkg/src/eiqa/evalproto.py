"""Split construction and evaluation protocols.

Standard protocol: scene-level random split (all enhanced versions of a
scene land on one side, preventing content leakage). Environment-aware
k-fold: env_ids partitioned across folds. Algorithm-disjoint: train and
test come from non-overlapping enhancement algorithms; the drop from
standard to this setting is the bias statistic of interest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .metrics import EvalReport, evaluate_scores
from .models import DebiasModel
from .synthdata import Manifest

PROTOCOLS = ("standard", "kfold_env", "algo_disjoint")


@dataclass(frozen=True)
class SplitPlan:
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]
    protocol: str
    seed: int = 0
    fold_id: int | None = None
    test_scenes: tuple[int, ...] = field(default=(), repr=False)
    test_envs: tuple[int, ...] = ()
    test_algos: tuple[int, ...] = ()

    def validate(self) -> None:
        if set(self.train_indices) & set(self.test_indices):
            raise ValueError("train and test indices overlap")
        if not self.train_indices or not self.test_indices:
            raise ValueError("both split sides must be non-empty")


def standard_split(manifest: Manifest, test_fraction: float, seed: int) -> SplitPlan:
    """Scene-level random split; round(test_fraction * n_scenes) scenes go to test."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    scenes = sorted({r.scene_id for r in manifest.records})
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51]))
    order = rng.permutation(len(scenes))
    n_test = int(round(test_fraction * len(scenes)))
    n_test = min(max(n_test, 1), len(scenes) - 1)
    test_scenes = {scenes[i] for i in order[:n_test]}
    train_idx = tuple(i for i, r in enumerate(manifest.records) if r.scene_id not in test_scenes)
    test_idx = tuple(i for i, r in enumerate(manifest.records) if r.scene_id in test_scenes)
    plan = SplitPlan(
        train_indices=train_idx,
        test_indices=test_idx,
        protocol="standard",
        seed=seed,
        test_scenes=tuple(sorted(test_scenes)),
    )
    plan.validate()
    return plan


def kfold_env_split(manifest: Manifest, k: int) -> list[SplitPlan]:
    """k plans; fold i tests on the i-th group of env_ids, training on the rest."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    envs = sorted({r.env_id for r in manifest.records})
    if len(envs) < k:
        raise ValueError(f"need at least k={k} distinct env_ids, got {len(envs)}")
    groups = [list(g) for g in np.array_split(np.array(envs), k)]
    plans = []
    for fold_id, group in enumerate(groups):
        test_envs = set(int(e) for e in group)
        train_idx = tuple(i for i, r in enumerate(manifest.records) if r.env_id not in test_envs)
        test_idx = tuple(i for i, r in enumerate(manifest.records) if r.env_id in test_envs)
        plan = SplitPlan(
            train_indices=train_idx,
            test_indices=test_idx,
            protocol="kfold_env",
            fold_id=fold_id,
            test_envs=tuple(sorted(test_envs)),
        )
        plan.validate()
        plans.append(plan)
    return plans


def algo_disjoint_split(manifest: Manifest, n_train_algos: int, seed: int) -> SplitPlan:
    """All records of the held-out algorithms go to test, regardless of scene."""
    algos = sorted({r.algo_id for r in manifest.records})
    if not 1 <= n_train_algos < len(algos):
        raise ValueError(f"n_train_algos must be in [1, {len(algos) - 1}], got {n_train_algos}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA1]))
    order = rng.permutation(len(algos))
    train_algos = {algos[i] for i in order[:n_train_algos]}
    test_algos = {a for a in algos if a not in train_algos}
    train_idx = tuple(i for i, r in enumerate(manifest.records) if r.algo_id in train_algos)
    test_idx = tuple(i for i, r in enumerate(manifest.records) if r.algo_id in test_algos)
    plan = SplitPlan(
        train_indices=train_idx,
        test_indices=test_idx,
        protocol="algo_disjoint",
        seed=seed,
        test_algos=tuple(sorted(test_algos)),
    )
    plan.validate()
    return plan


def center_crop(images: np.ndarray, size: int) -> np.ndarray:
    h, w = images.shape[1], images.shape[2]
    if h < size or w < size:
        raise ValueError(f"images of size {h}x{w} cannot be cropped to {size}")
    top, left = (h - size) // 2, (w - size) // 2
    return images[:, top : top + size, left : left + size, :]


def predict_records(
    model: DebiasModel,
    images: np.ndarray,
    indices,
    batch_size: int = 64,
) -> np.ndarray:
    """Denormalized predictions for the given record indices (eval mode, no grad)."""
    model.eval()
    crop = center_crop(images[np.asarray(indices, dtype=np.int64)], model.cfg.image_size)
    preds = []
    with torch.no_grad():
        for start in range(0, crop.shape[0], batch_size):
            chunk = torch.from_numpy(crop[start : start + batch_size].transpose(0, 3, 1, 2).copy())
            preds.append(model.predict(chunk.to(model.cfg.torch_dtype)).cpu().numpy())
    return model.denormalize(np.concatenate(preds))


def evaluate(
    model: DebiasModel,
    manifest: Manifest,
    plan: SplitPlan,
    images: np.ndarray,
    return_predictions: bool = False,
):
    """SRCC/PLCC/KRCC of the model on the plan's test side.

    Consumes only enhanced images on the test path; degenerate predictions
    (e.g. a constant output) surface as DegenerateInputError rather than a
    fabricated score.
    """
    plan.validate()
    preds = predict_records(model, images, plan.test_indices)
    mos = np.array([manifest.records[i].mos for i in plan.test_indices])
    report = evaluate_scores(preds, mos)
    if return_predictions:
        return report, preds
    return report


def drop_report(standard: EvalReport, unseen: EvalReport) -> dict[str, float]:
    """Metric-wise performance decrease from the standard to the unseen setting."""
    return {
        "srcc": standard.srcc - unseen.srcc,
        "plcc": standard.plcc - unseen.plcc,
        "krcc": standard.krcc - unseen.krcc,
    }
