"""Segmentation and detection losses with analytic gradients.

The classification losses consume probability rows (softmax/sigmoid outputs)
and return gradients with respect to the underlying logits, so the gradient
contract is self-contained; the softmax/sigmoid maps live here too. Items
labeled with the ignore sentinel are excluded from every loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import BinaryMask

#: Focal-loss defaults (the conventional values; tunable per call).
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass(frozen=True)
class LossWeights:
    """Weights of the five loss terms; defaults are the trained-model settings."""

    lambda1: float = 10.0  # voxel focal
    lambda2: float = 10.0  # voxel Lovasz
    lambda3: float = 5.0  # thing-mask focal
    lambda4: float = 2.0  # detection classification
    lambda5: float = 0.25  # detection box regression

    def __post_init__(self):
        vals = (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"loss weights must be finite and non-negative, got {vals}")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. probabilities back through softmax to the logits."""
    probs = np.asarray(probs, dtype=np.float64)
    grad_probs = np.asarray(grad_probs, dtype=np.float64)
    inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def sigmoid(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_probs(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"probs must be (items, classes), got shape {probs.shape}")
    if np.any(probs < 0.0):
        raise ValueError("probabilities must be non-negative")
    if np.max(np.abs(probs.sum(axis=-1) - 1.0)) > 1e-6:
        raise ValueError("probability rows must sum to 1 within 1e-6")
    return probs


def _focal_dl_dpt(pt: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    """Derivative of -alpha*(1-pt)^gamma*log(pt) with respect to pt."""
    one_minus = 1.0 - pt
    with np.errstate(divide="ignore", invalid="ignore"):
        coeff = -alpha * one_minus**gamma / pt
        if gamma > 0.0:
            coeff = coeff + alpha * gamma * one_minus ** (gamma - 1.0) * np.log(pt)
    return np.where(pt >= 1.0, 0.0, coeff)


def focal_loss(
    probs: np.ndarray,
    targets: np.ndarray,
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
    ignore_label: int | None = None,
) -> tuple[float, np.ndarray]:
    """Mean focal loss -alpha*(1-p_t)^gamma*log(p_t) and its logit gradient.

    ``probs`` is (N, K) softmax output, ``targets`` (N,) class indices;
    items whose target equals ``ignore_label`` are skipped entirely.
    """
    probs = _check_probs(probs)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != probs.shape[0]:
        raise ValueError("targets length must match probs rows")
    eligible = np.ones(targets.shape[0], dtype=bool)
    if ignore_label is not None:
        eligible = targets != ignore_label
    n = int(eligible.sum())
    if n == 0:
        raise ValueError("focal loss needs at least one non-ignored item")
    idx = np.flatnonzero(eligible)
    tgt = targets[idx]
    if np.any(tgt < 0) or np.any(tgt >= probs.shape[1]):
        raise ValueError("targets out of class range")
    pt = probs[idx, tgt]
    with np.errstate(divide="ignore"):
        losses = -alpha * (1.0 - pt) ** gamma * np.log(pt)
    loss = float(losses.mean())

    # chain through softmax: dpt/dz_j = pt * (delta_tj - p_j)
    coeff = _focal_dl_dpt(pt, alpha, gamma) / n
    grad = np.zeros_like(probs)
    grad[idx] = -(coeff * pt)[:, None] * probs[idx]
    grad[idx, tgt] += coeff * pt
    return loss, grad


def _jaccard_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient vector of the Jaccard loss extension for sorted binary ground truth."""
    total = gt_sorted.sum()
    intersection = total - np.cumsum(gt_sorted)
    union = total + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if gt_sorted.shape[0] > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax_loss(
    probs: np.ndarray,
    targets: np.ndarray,
    eligible: np.ndarray | None = None,
    ignore_label: int | None = None,
) -> tuple[float, np.ndarray]:
    """Lovasz extension of the per-class Jaccard loss, averaged over present classes.

    ``eligible`` flags the items the loss is evaluated on (e.g. voxels that
    contain LiDAR points); sort ties are broken by item index. Returns the
    loss and its gradient with respect to the probabilities.
    """
    probs = _check_probs(probs)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != probs.shape[0]:
        raise ValueError("targets length must match probs rows")
    mask = np.ones(targets.shape[0], dtype=bool) if eligible is None else np.asarray(eligible, dtype=bool)
    if mask.shape[0] != targets.shape[0]:
        raise ValueError("eligible mask length must match probs rows")
    if ignore_label is not None:
        mask = mask & (targets != ignore_label)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("Lovasz loss needs at least one eligible item")
    tgt = targets[idx]
    if np.any(tgt < 0) or np.any(tgt >= probs.shape[1]):
        raise ValueError("targets out of class range")

    present = np.unique(tgt)
    grad = np.zeros_like(probs)
    total = 0.0
    for c in present:
        fg = (tgt == c).astype(np.float64)
        err = np.abs(fg - probs[idx, c])
        perm = np.argsort(-err, kind="stable")
        g = _jaccard_grad(fg[perm])
        total += float(err[perm] @ g)
        sign = np.where(fg > 0.0, -1.0, 1.0)
        derr = np.zeros_like(err)
        derr[perm] = g
        grad[idx, c] += sign * derr
    loss = total / present.size
    grad /= present.size
    return loss, grad


def thing_mask_loss(
    pred_scores: np.ndarray,
    target: BinaryMask,
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> tuple[float, np.ndarray]:
    """Binary focal loss of per-voxel foreground scores against a thing mask.

    ``pred_scores`` are probabilities shaped like the grid; the returned
    gradient is with respect to the sigmoid logits behind them.
    """
    scores = np.asarray(pred_scores, dtype=np.float64)
    if scores.shape != target.spec.dims:
        raise ValueError(f"scores shape {scores.shape} does not match dims {target.spec.dims}")
    if np.any(scores < 0.0) or np.any(scores > 1.0):
        raise ValueError("scores must be probabilities in [0, 1]")
    p = scores.reshape(-1)
    t = target.bits.reshape(-1)
    pt = np.where(t, p, 1.0 - p)
    with np.errstate(divide="ignore"):
        losses = -alpha * (1.0 - pt) ** gamma * np.log(pt)
    loss = float(losses.mean())
    coeff = _focal_dl_dpt(pt, alpha, gamma) / pt.size
    dpt_dp = np.where(t, 1.0, -1.0)
    grad = (coeff * dpt_dp * p * (1.0 - p)).reshape(scores.shape)
    return loss, grad


def l1_box_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error over box parameters; subgradient 0 at equality."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("need at least one box parameter")
    diff = pred - target
    loss = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return loss, grad


def total_loss(parts: dict, weights: LossWeights = LossWeights()) -> float:
    """Weighted sum of the five loss parts.

    ``parts`` maps "focal", "lovasz", "thing", "cls", "reg" to scalars;
    the segmentation terms take lambda1..3, the detection terms lambda4..5.
    """
    seg = (
        weights.lambda1 * parts.get("focal", 0.0)
        + weights.lambda2 * parts.get("lovasz", 0.0)
        + weights.lambda3 * parts.get("thing", 0.0)
    )
    det = weights.lambda4 * parts.get("cls", 0.0) + weights.lambda5 * parts.get("reg", 0.0)
    return float(seg + det)
