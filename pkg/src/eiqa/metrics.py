"""Correlation metrics between predicted and ground-truth quality scores.

Implements PLCC (Pearson), SRCC (Spearman via midranks), KRCC (Kendall
tau-b with tie corrections) and the standard-to-unseen performance drop.
Degenerate inputs raise instead of returning a fabricated value; the
training losses handle degeneracy differently (epsilon smoothing) and on
purpose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class DegenerateInputError(ValueError):
    """A correlation is undefined for the given inputs (e.g. zero variance)."""


@dataclass(frozen=True)
class EvalReport:
    """SRCC/PLCC/KRCC of one evaluation over n test scores."""

    srcc: float
    plcc: float
    krcc: float
    n: int


def _as_pair(predicted, ground_truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predicted, dtype=np.float64)
    g = np.asarray(ground_truth, dtype=np.float64)
    if p.ndim != 1 or g.ndim != 1:
        raise ValueError("score vectors must be one-dimensional")
    if p.shape[0] != g.shape[0]:
        raise ValueError(f"length mismatch: {p.shape[0]} vs {g.shape[0]}")
    if p.shape[0] < 2:
        raise ValueError("need at least 2 scores")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(g))):
        raise ValueError("scores must be finite")
    return p, g


def plcc(predicted, ground_truth) -> float:
    """Pearson linear correlation coefficient."""
    p, g = _as_pair(predicted, ground_truth)
    dp = p - p.mean()
    dg = g - g.mean()
    denom = np.sqrt((dp * dp).sum() * (dg * dg).sum())
    if denom == 0.0:
        raise DegenerateInputError("zero variance in predicted or ground-truth scores")
    return float((dp * dg).sum() / denom)


def srcc(predicted, ground_truth) -> float:
    """Spearman rank correlation: Pearson on midrank-transformed vectors."""
    p, g = _as_pair(predicted, ground_truth)
    rp = rankdata(p, method="average")
    rg = rankdata(g, method="average")
    return plcc(rp, rg)


def krcc(predicted, ground_truth) -> float:
    """Kendall tau-b: (concordant - discordant) / sqrt((n0 - tp) * (n0 - tg)).

    n0 = n(n-1)/2 and tp, tg are the tie corrections sum(t*(t-1)/2) over
    tied groups of each vector.
    """
    p, g = _as_pair(predicted, ground_truth)
    n = p.shape[0]
    sp = np.sign(p[:, None] - p[None, :])
    sg = np.sign(g[:, None] - g[None, :])
    iu = np.triu_indices(n, k=1)
    concordant_minus_discordant = float((sp[iu] * sg[iu]).sum())
    n0 = n * (n - 1) / 2.0
    tp = _tie_correction(p)
    tg = _tie_correction(g)
    denom = np.sqrt((n0 - tp) * (n0 - tg))
    if denom == 0.0:
        raise DegenerateInputError("tau-b denominator is zero (all values tied)")
    return concordant_minus_discordant / float(denom)


def _tie_correction(x: np.ndarray) -> float:
    _, counts = np.unique(x, return_counts=True)
    return float((counts * (counts - 1) / 2.0).sum())


def drop(standard: float, unseen: float) -> float:
    """Performance decrease from the standard to the unseen-algorithm setting."""
    return standard - unseen


def evaluate_scores(predicted, ground_truth) -> EvalReport:
    """All three correlations in one report."""
    p, g = _as_pair(predicted, ground_truth)
    return EvalReport(
        srcc=srcc(p, g),
        plcc=plcc(p, g),
        krcc=krcc(p, g),
        n=int(p.shape[0]),
    )
