"""Soft segmentation losses and the nearest-neighbour similarity-alignment loss.

Every differentiable loss returns a :class:`LossResult` carrying the value
and the analytic gradient with respect to its differentiable argument.
Sums run over every axis of the input, so a batch is treated as one big map
(batch-global Dice).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DICE_EPS = 1e-5
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossResult:
    value: float
    grad: np.ndarray


def _check_pair(p: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ")
    return p, t


def soft_dice_loss(probs: np.ndarray, target: np.ndarray, eps: float = DICE_EPS) -> LossResult:
    """1 - 2 sum(P*T) / (sum P + sum T + eps)."""
    p, t = _check_pair(probs, target)
    inter = float(np.sum(p * t))
    denom = float(np.sum(p) + np.sum(t) + eps)
    value = 1.0 - 2.0 * inter / denom
    grad = -2.0 * t / denom + 2.0 * inter / (denom * denom)
    return LossResult(value, grad)


def soft_cross_entropy(probs: np.ndarray, target: np.ndarray, prob_clamp: float = PROB_CLAMP,
                       reduction: str = "sum", class_axis: int = -3) -> LossResult:
    """-sum T * log(clamp(P)).

    ``reduction="mean"`` divides by the number of pixels (all axes except the
    class axis). The gradient is zero wherever P sits at or below the clamp.
    """
    p, t = _check_pair(probs, target)
    pc = np.clip(p, prob_clamp, 1.0)
    value = -float(np.sum(t * np.log(pc)))
    active = p > prob_clamp
    grad = np.where(active, -t / np.where(active, p, 1.0), 0.0)
    if reduction == "mean":
        n = p.size // p.shape[class_axis]
        value /= n
        grad /= n
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return LossResult(value, grad)


def soft_segmentation_loss(probs, target, eps: float = DICE_EPS, prob_clamp: float = PROB_CLAMP,
                           reduction: str = "sum") -> LossResult:
    dice = soft_dice_loss(probs, target, eps)
    ce = soft_cross_entropy(probs, target, prob_clamp, reduction)
    return LossResult(dice.value + ce.value, dice.grad + ce.grad)


def nn_min_distances(f_syn: np.ndarray, f_real: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean distance from each synthetic row to its nearest real row.

    Returns ``(d, idx)``; ties resolve to the lowest real index. Squared
    distances are accumulated one feature at a time, left to right.
    """
    a = np.asarray(f_syn, dtype=np.float64)
    b = np.asarray(f_real, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("embedding batches must be 2-D")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"embedding dims differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("nn_min_distances needs at least one synthetic and one real embedding")
    sq = np.zeros((len(a), len(b)))
    for k in range(a.shape[1]):
        diff = a[:, k, None] - b[None, :, k]
        sq += diff * diff
    idx = np.argmin(sq, axis=1)
    d = np.sqrt(sq[np.arange(len(a)), idx])
    return d, idx


def sa_loss(f_syn: np.ndarray, f_real: np.ndarray) -> LossResult:
    """Mean nearest-real distance; gradient flows to ``f_syn`` only.

    Rows already sitting on a real embedding (d = 0) get a zero subgradient.
    """
    a = np.asarray(f_syn, dtype=np.float64)
    b = np.asarray(f_real, dtype=np.float64)
    d, idx = nn_min_distances(a, b)
    m = len(a)
    diff = a - b[idx]
    safe = np.where(d > 0, d, 1.0)
    grad = np.where((d > 0)[:, None], diff / (m * safe[:, None]), 0.0)
    return LossResult(float(d.mean()), grad)


def total_loss(l_soft: LossResult, l_sa: LossResult, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return l_soft.value + lam * l_sa.value
