"""Soft-mix augmentation: a rectangular hole mask smoothed by a box filter,
then bidirectional convex blending of images and label distributions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    height: int
    width: int


@dataclass(frozen=True)
class BlendMask:
    raw: np.ndarray      # 0 inside the hole, 1 outside
    smooth: np.ndarray   # per-pixel blend coefficient in [0, 1]
    rect: Rect


@dataclass(frozen=True)
class MixedPair:
    v1: np.ndarray
    v2: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    mask: BlendMask


def region_size(h: int, w: int, beta: float) -> tuple[int, int]:
    rh, rw = int(np.floor(beta * h + 0.5)), int(np.floor(beta * w + 0.5))
    return rh, rw


def sample_blend_region(h: int, w: int, beta: float, rng: np.random.Generator) -> Rect:
    rh, rw = region_size(h, w, beta)
    if not (0 < beta <= 1) or rh < 1 or rw < 1 or rh > h or rw > w:
        raise ValueError(f"degenerate blend region {rh}x{rw} for {h}x{w}, beta={beta}")
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    return Rect(top, left, rh, rw)


def box_filter(x: np.ndarray, k: int) -> np.ndarray:
    """k x k mean filter, stride 1, edge-replicate padding."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {k}")
    if k == 1:
        return x.astype(np.float64, copy=True)
    r = k // 2
    h, w = x.shape
    p = np.pad(x.astype(np.float64), r, mode="edge")
    acc = np.zeros((h, w))
    # integer-valued inputs sum exactly, so constant neighbourhoods stay exactly 0 or 1
    for dy in range(k):
        for dx in range(k):
            acc += p[dy:dy + h, dx:dx + w]
    return acc / (k * k)


def build_blend_mask(h: int, w: int, rect: Rect, kernel: int = 3) -> BlendMask:
    raw = np.ones((h, w))
    raw[rect.top:rect.top + rect.height, rect.left:rect.left + rect.width] = 0.0
    return BlendMask(raw, box_filter(raw, kernel), rect)


def _coef(mask) -> np.ndarray:
    return mask.smooth if isinstance(mask, BlendMask) else np.asarray(mask, dtype=np.float64)


def blend_images(v_a: np.ndarray, v_b: np.ndarray, mask) -> np.ndarray:
    """coef * v_a + (1 - coef) * v_b for H x W x Ch images (or batches thereof).

    ``mask`` is a BlendMask or a coefficient array of shape (..., H, W); it
    is broadcast over the channel axis.
    """
    v_a, v_b = np.asarray(v_a), np.asarray(v_b)
    if v_a.shape != v_b.shape:
        raise ShapeError(f"image shapes differ: {v_a.shape} vs {v_b.shape}")
    a = _coef(mask)[..., None]
    return a * v_a + (1.0 - a) * v_b


def blend_labels(l_a: np.ndarray, l_b: np.ndarray, mask) -> np.ndarray:
    """Per-class convex combination of (..., C, H, W) label distributions."""
    l_a, l_b = np.asarray(l_a), np.asarray(l_b)
    if l_a.shape != l_b.shape:
        raise ShapeError(f"label shapes differ: {l_a.shape} vs {l_b.shape}")
    a = _coef(mask)[..., None, :, :]
    return a * l_a + (1.0 - a) * l_b


def make_complementary_mixtures(labeled, pseudo, mask) -> MixedPair:
    """Both blend directions from a single shared mask.

    ``labeled`` is (V_lab, L_lab) and ``pseudo`` is (V_syn, L_pseudo). The
    first mixture keeps synthetic content where the coefficient is 1 (outside
    the hole), the second keeps labeled content there.
    """
    v_lab, l_lab = labeled
    v_syn, l_pseudo = pseudo
    if np.shape(v_lab)[:-1] != np.shape(l_lab)[:-3] + np.shape(l_lab)[-2:]:
        raise ShapeError("labeled image and label map disagree in size")
    if np.shape(v_syn)[:-1] != np.shape(l_pseudo)[:-3] + np.shape(l_pseudo)[-2:]:
        raise ShapeError("synthetic image and pseudo-label map disagree in size")
    return MixedPair(
        v1=blend_images(v_syn, v_lab, mask),
        v2=blend_images(v_lab, v_syn, mask),
        l1=blend_labels(l_pseudo, l_lab, mask),
        l2=blend_labels(l_lab, l_pseudo, mask),
        mask=mask if isinstance(mask, BlendMask) else None,
    )


def sample_masks(n: int, h: int, w: int, beta: float, kernel: int,
                 rng: np.random.Generator) -> np.ndarray:
    """One smoothed blend coefficient map per pair, stacked to n x H x W."""
    return np.stack([build_blend_mask(h, w, sample_blend_region(h, w, beta, rng), kernel).smooth
                     for _ in range(n)])
