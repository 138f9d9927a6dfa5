"""Mini-batch construction for preference pretraining.

Three strategies: plain random chunking, algorithm-balanced dealing, and
content-controlled grouping that packs each batch with same-scene
different-algorithm records (the hard negatives) while rotating the
algorithm assignment so every sample keeps same-algorithm positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .synthdata import Manifest

STRATEGIES = ("random", "algo_balanced", "content_controlled")


@dataclass(frozen=True)
class Batch:
    indices: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int = 32
    scenes_per_batch: int = 8
    algos_per_scene: int = 4
    seed: int = 0
    strategy: str = "content_controlled"

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.strategy == "content_controlled":
            if self.algos_per_scene < 2:
                raise ValueError("content_controlled needs algos_per_scene >= 2")
            if self.scenes_per_batch * self.algos_per_scene != self.batch_size:
                raise ValueError(
                    "content_controlled needs scenes_per_batch * algos_per_scene == batch_size, "
                    f"got {self.scenes_per_batch} * {self.algos_per_scene} != {self.batch_size}"
                )


@dataclass(frozen=True)
class BatchDiagnostics:
    distinct_scenes: int
    distinct_algos: int
    same_scene_diff_algo_pairs: int
    positive_set_sizes: tuple[int, ...] = field(repr=False)

    @property
    def empty_positive_count(self) -> int:
        return sum(1 for s in self.positive_set_sizes if s == 0)


def epoch_batches(manifest: Manifest, cfg: SamplerConfig, epoch: int = 0) -> list[Batch]:
    """Plan one epoch of batches. Deterministic for fixed (cfg.seed, epoch).

    Every record index appears at most once per epoch; a trailing remainder
    smaller than one batch is dropped.
    """
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
    if cfg.strategy == "random":
        return _random_batches(len(manifest.records), cfg, rng)
    if cfg.strategy == "algo_balanced":
        return _balanced_batches(manifest, cfg, rng)
    return _content_batches(manifest, cfg, rng)


def _random_batches(n: int, cfg: SamplerConfig, rng: np.random.Generator) -> list[Batch]:
    order = rng.permutation(n)
    n_batches = n // cfg.batch_size
    return [
        Batch(tuple(int(i) for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]))
        for b in range(n_batches)
    ]


def _balanced_batches(manifest: Manifest, cfg: SamplerConfig, rng: np.random.Generator) -> list[Batch]:
    queues: dict[int, list[int]] = {}
    for i, r in enumerate(manifest.records):
        queues.setdefault(r.algo_id, []).append(i)
    for q in queues.values():
        rng.shuffle(q)
    # deal one index per algorithm per round (fresh random algo order each
    # round) so any batch-sized window has near-uniform algo counts
    stream: list[int] = []
    while True:
        live = [a for a, q in queues.items() if q]
        if not live:
            break
        rng.shuffle(live)
        for a in live:
            stream.append(queues[a].pop())
    n_batches = len(stream) // cfg.batch_size
    return [
        Batch(tuple(stream[b * cfg.batch_size : (b + 1) * cfg.batch_size]))
        for b in range(n_batches)
    ]


def _content_batches(manifest: Manifest, cfg: SamplerConfig, rng: np.random.Generator) -> list[Batch]:
    by_scene: dict[int, dict[int, int]] = {}
    for i, r in enumerate(manifest.records):
        by_scene.setdefault(r.scene_id, {})[r.algo_id] = i
    short = [s for s, versions in by_scene.items() if len(versions) < cfg.algos_per_scene]
    if short:
        raise ValueError(
            f"content_controlled needs >= {cfg.algos_per_scene} versions per scene; "
            f"scenes with fewer: {sorted(short)[:10]}"
        )
    scene_ids = list(by_scene)
    rng.shuffle(scene_ids)
    n_batches = len(scene_ids) // cfg.scenes_per_batch

    batches: list[Batch] = []
    for b in range(n_batches):
        scenes = scene_ids[b * cfg.scenes_per_batch : (b + 1) * cfg.scenes_per_batch]
        start = int(rng.integers(0, manifest.k_algorithms))
        indices: list[int] = []
        for j, sid in enumerate(scenes):
            available = sorted(by_scene[sid])
            base = start + j * cfg.algos_per_scene
            chosen = [available[(base + i) % len(available)] for i in range(cfg.algos_per_scene)]
            indices.extend(by_scene[sid][a] for a in chosen)
        batches.append(Batch(tuple(indices)))
    return batches


def verify_batch(batch: Batch, manifest: Manifest, cfg: SamplerConfig) -> BatchDiagnostics:
    """Structure report for one batch: scene/algo coverage, hard-negative pairs, positive sets."""
    records = [manifest.records[i] for i in batch.indices]
    scenes = [r.scene_id for r in records]
    algos = [r.algo_id for r in records]
    same_scene_diff_algo = sum(
        1
        for i in range(len(records))
        for j in range(i + 1, len(records))
        if scenes[i] == scenes[j] and algos[i] != algos[j]
    )
    positive_sizes = tuple(sum(1 for j, a in enumerate(algos) if a == algos[i] and j != i) for i in range(len(algos)))
    return BatchDiagnostics(
        distinct_scenes=len(set(scenes)),
        distinct_algos=len(set(algos)),
        same_scene_diff_algo_pairs=same_scene_diff_algo,
        positive_set_sizes=positive_sizes,
    )


def empty_positive_rate(manifest: Manifest, cfg: SamplerConfig, epochs: int) -> float:
    """Fraction of emitted samples with an empty positive set across epochs."""
    total = 0
    empty = 0
    for epoch in range(epochs):
        for batch in epoch_batches(manifest, cfg, epoch=epoch):
            diag = verify_batch(batch, manifest, cfg)
            total += batch.size
            empty += diag.empty_positive_count
    if total == 0:
        raise ValueError("sampler produced no batches")
    return empty / total
