"""EMA teacher maintenance and one-hot pseudo-label synthesis.

Arrays follow the (..., C, H, W) layout for class maps and (..., H, W) for
hard label maps, so every function works on a single image or a batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError


@dataclass(frozen=True)
class EmaState:
    teacher: np.ndarray
    decay: float

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"EMA decay must be in [0, 1), got {self.decay}")


def ema_update(state: EmaState, student: np.ndarray) -> EmaState:
    """teacher <- decay * teacher + (1 - decay) * student."""
    student = np.asarray(student)
    if student.shape != state.teacher.shape:
        raise ShapeError(f"teacher has {state.teacher.shape}, student {student.shape}")
    d = state.decay
    teacher = d * state.teacher + (1.0 - d) * student
    return EmaState(teacher.astype(state.teacher.dtype, copy=False), d)


def softmax_probs(logits: np.ndarray, axis: int = -3) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def argmax_labels(probs: np.ndarray, axis: int = -3) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(probs, axis=axis)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def largest_component_filter(labels: np.ndarray, connectivity: int = 8) -> np.ndarray:
    """Keep only the largest connected component of every foreground class.

    Pixels of the discarded components revert to background (class 0), which
    is never filtered itself. Equal-size components are resolved in favour
    of the one whose first pixel comes earliest in row-major order.
    """
    labels = np.asarray(labels)
    if labels.ndim > 2:
        return np.stack([largest_component_filter(l, connectivity) for l in labels])
    struct = _structure(connectivity)
    out = labels.copy()
    for c in np.unique(labels):
        if c == 0:
            continue
        comp, n = ndimage.label(labels == c, structure=struct)
        if n <= 1:
            continue
        # scipy numbers components in raster order of their first pixel,
        # so argmax (first max) implements the top-left tie rule
        sizes = np.bincount(comp.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
        out[(comp > 0) & (comp != keep)] = 0
    return out


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(..., H, W) integer map -> (..., C, H, W) one-hot float map."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes})")
    oh = np.eye(num_classes, dtype=np.float64)[labels]
    return np.moveaxis(oh, -1, -3)


def labels_from_logits(logits: np.ndarray, connectivity: int = 8) -> np.ndarray:
    return largest_component_filter(argmax_labels(softmax_probs(logits)), connectivity)


def generate_pseudo_labels(teacher, images: np.ndarray, connectivity: int = 8) -> np.ndarray:
    """softmax -> argmax -> LCC -> one-hot on the teacher's predictions.

    ``images`` is an N x H x W x Ch batch. The teacher runs in inference mode
    and the returned maps are plain arrays, i.e. detached from any graph.
    """
    logits = teacher.predict(images)
    num_classes = logits.shape[1]
    return one_hot(labels_from_logits(logits, connectivity), num_classes)
