"""Procedural toy benchmark: filled ellipses (class 1) and elliptical rings
(class 2) on a noisy background.

The ``unlabeled_synthetic`` pool is drawn from the same geometry
distribution but brightened by ``shift`` (then clipped) and blurred with a
Gaussian of sigma ``3 * shift`` pixels, emulating a generator whose images
look plausible yet sit in a different intensity/texture regime.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .data_io import substream

DISK, RING = 1, 2


@dataclass
class Shape:
    kind: int
    cy: float
    cx: float
    ry: float
    rx: float
    theta: float
    thickness: float
    intensity: float


def _ellipse_level(shape: Shape, yy: np.ndarray, xx: np.ndarray, shrink: float = 0.0) -> np.ndarray:
    dy, dx = yy - shape.cy, xx - shape.cx
    c, s = np.cos(shape.theta), np.sin(shape.theta)
    u = dy * c + dx * s
    v = -dy * s + dx * c
    return (u / (shape.ry - shrink)) ** 2 + (v / (shape.rx - shrink)) ** 2


def rasterize(shapes: list[Shape], size: int) -> np.ndarray:
    """Exact label map: pixel centres at integer coordinates."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = np.zeros((size, size), dtype=np.uint8)
    for sh in shapes:
        inside = _ellipse_level(sh, yy, xx) <= 1.0
        if sh.kind == RING:
            inside &= _ellipse_level(sh, yy, xx, sh.thickness) > 1.0
        labels[inside] = sh.kind
    return labels


def sample_shapes(rng: np.random.Generator, size: int) -> list[Shape]:
    n = int(rng.integers(1, 4))
    shapes: list[Shape] = []
    for _ in range(n):
        for _attempt in range(50):
            kind = int(rng.integers(1, 3))
            lo = 8.0 if kind == RING else 5.0
            ry, rx = rng.uniform(lo, 13.0, size=2)
            r = max(ry, rx)
            cy, cx = rng.uniform(r + 1, size - r - 2, size=2)
            if all(np.hypot(cy - o.cy, cx - o.cx) > r + max(o.ry, o.rx) + 2 for o in shapes):
                shapes.append(Shape(kind, float(cy), float(cx), float(ry), float(rx),
                                    float(rng.uniform(0, np.pi)),
                                    float(rng.uniform(2.0, 3.5)) if kind == RING else 0.0,
                                    float(rng.uniform(0.6, 0.85))))
                break
    return shapes


def render(shapes: list[Shape], size: int, rng: np.random.Generator, shift: float = 0.0) -> np.ndarray:
    img = np.full((size, size), rng.uniform(0.1, 0.3))
    # low-frequency background variation plus pixel noise
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), 8.0)
    img += 0.05 * field / (np.abs(field).max() + 1e-12)
    for sh in shapes:
        obj = rasterize([sh], size) > 0
        img[obj] = sh.intensity
    img += rng.normal(0.0, 0.04, size=img.shape)
    if shift > 0:
        img = ndimage.gaussian_filter(img, 3.0 * shift)
        img = img + shift
    return np.clip(img, 0.0, 1.0)


def _write_pool(root: Path, pool: str, n: int, size: int, shift: float, seed: int, with_masks: bool) -> None:
    img_dir = root / pool / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    if with_masks:
        (root / pool / "masks").mkdir(parents=True, exist_ok=True)
    rng = substream(seed, f"toy/{pool}")
    geometry = {}
    for i in range(n):
        name = f"{pool}_{i:04d}.png"
        shapes = sample_shapes(rng, size)
        img = render(shapes, size, rng, shift)
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(img_dir / name)
        if with_masks:
            Image.fromarray(rasterize(shapes, size)).save(root / pool / "masks" / name)
        geometry[name] = [asdict(s) for s in shapes]
    (root / pool / "geometry.json").write_text(json.dumps(geometry, indent=1, sort_keys=True) + "\n")


def make_toy_data(out_dir: str | Path, n_images: int = 200, shift: float = 0.3, seed: int = 0,
                  size: int = 64) -> Path:
    """Write ``out_dir/{labeled,unlabeled_synthetic,val,test}/{images,masks}``.

    ``n_images`` real training images go to ``labeled`` (the pool that
    :func:`~synalign.data_io.make_splits` draws from) and the same number of
    synthetic images to ``unlabeled_synthetic``; val and test get
    ``n_images // 5`` each.
    """
    if n_images < 20:
        raise ValueError("make_toy_data needs n_images >= 20")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {root}: {exc}") from exc
    n_eval = max(n_images // 5, 4)
    _write_pool(root, "labeled", n_images, size, 0.0, seed, True)
    _write_pool(root, "unlabeled_synthetic", n_images, size, shift, seed, False)
    _write_pool(root, "val", n_eval, size, 0.0, seed, True)
    _write_pool(root, "test", n_eval, size, 0.0, seed, True)
    return root


def load_geometry(pool_dir: str | Path) -> dict[str, list[Shape]]:
    raw = json.loads((Path(pool_dir) / "geometry.json").read_text())
    return {k: [Shape(**s) for s in v] for k, v in raw.items()}
