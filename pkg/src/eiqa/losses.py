"""Training objectives: supervised contrastive loss, Huber, PLCC, and their sum.

All functions take torch tensors and return differentiable scalars. Unlike
the evaluation metrics, the PLCC loss is epsilon-smoothed so a degenerate
batch cannot crash training.
"""

from __future__ import annotations

import torch

PLCC_EPS = 1e-8
_UNIT_NORM_TOL = 1e-4


def supcon_loss(embeddings: torch.Tensor, labels: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Supervised contrastive loss over a batch of unit-norm embeddings.

    For each anchor i, positives are the other samples with the same label;
    the denominator runs over every other sample in the batch. Anchors with
    an empty positive set contribute zero. The result is the sum over
    anchors (not the mean), so identical embeddings with identical labels
    give exactly ``B * log(B - 1)``.

    Args:
        embeddings: (B, d) tensor with rows of unit L2 norm.
        labels: (B,) integer tensor of algorithm ids.
        temperature: softmax temperature, > 0.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if embeddings.ndim != 2:
        raise ValueError("embeddings must be a (B, d) matrix")
    b = embeddings.shape[0]
    if b < 2:
        raise ValueError("need a batch of at least 2 samples")
    if labels.shape != (b,):
        raise ValueError(f"labels shape {tuple(labels.shape)} does not match batch size {b}")
    norms = embeddings.detach().norm(dim=1)
    if (norms - 1.0).abs().max().item() > _UNIT_NORM_TOL:
        raise ValueError("embedding rows must be unit-norm")

    sim = embeddings @ embeddings.T / temperature
    eye = torch.eye(b, dtype=torch.bool, device=embeddings.device)
    # stabilized log-softmax over k != i
    masked = sim.masked_fill(eye, float("-inf"))
    row_max = masked.max(dim=1, keepdim=True).values
    logsumexp = row_max + torch.log(torch.exp(masked - row_max).sum(dim=1, keepdim=True))
    log_prob = sim - logsumexp

    pos_mask = (labels[:, None] == labels[None, :]) & ~eye
    pos_counts = pos_mask.sum(dim=1)
    has_pos = pos_counts > 0
    if not bool(has_pos.any()):
        return embeddings.sum() * 0.0
    mean_log_prob = (log_prob * pos_mask).sum(dim=1)[has_pos] / pos_counts[has_pos]
    return -mean_log_prob.sum()


def huber_loss(predictions: torch.Tensor, targets: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Mean Huber penalty over the batch: 0.5 r^2 inside |r| <= delta, linear outside."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    _check_same_length(predictions, targets)
    r = predictions - targets
    abs_r = r.abs()
    quad = 0.5 * r * r
    lin = delta * (abs_r - 0.5 * delta)
    return torch.where(abs_r <= delta, quad, lin).mean()


def plcc_loss(predictions: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """1 - Pearson correlation, smoothed so constant batches stay finite.

    The standard deviations are computed as sqrt(var + eps); a perfectly
    correlated batch gives ~0, anti-correlated ~2, and a constant batch a
    finite value near 1 with finite gradients.
    """
    _check_same_length(predictions, targets)
    if predictions.shape[0] < 2:
        raise ValueError("need a batch of at least 2 samples")
    dp = predictions - predictions.mean()
    dt = targets - targets.mean()
    cov = (dp * dt).mean()
    sp = torch.sqrt((dp * dp).mean() + PLCC_EPS)
    st = torch.sqrt((dt * dt).mean() + PLCC_EPS)
    return 1.0 - cov / (sp * st)


def mos_loss(
    predictions: torch.Tensor,
    targets: torch.Tensor,
    delta: float = 1.0,
    lambda_plcc: float = 1.0,
) -> torch.Tensor:
    """Huber + lambda * PLCC loss for MOS regression."""
    if lambda_plcc < 0:
        raise ValueError(f"lambda_plcc must be nonnegative, got {lambda_plcc}")
    return huber_loss(predictions, targets, delta=delta) + lambda_plcc * plcc_loss(predictions, targets)


def _check_same_length(predictions: torch.Tensor, targets: torch.Tensor) -> None:
    if predictions.ndim != 1 or targets.ndim != 1:
        raise ValueError("predictions and targets must be 1-D")
    if predictions.shape[0] != targets.shape[0]:
        raise ValueError(f"length mismatch: {predictions.shape[0]} vs {targets.shape[0]}")
