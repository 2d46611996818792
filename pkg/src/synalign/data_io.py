"""Dataset ingestion, labeled/unlabeled splits, run configuration and the
binary embedding exchange format."""

from __future__ import annotations

import dataclasses
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import yaml
from PIL import Image

from .errors import ConfigError, FormatError, ShapeError, SplitError

POOLS = ("labeled", "unlabeled_synthetic", "val", "test")
IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg")


# --------------------------------------------------------------------------
# manifests

@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    mask_path: str | None
    group_id: str
    pool: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.pool not in POOLS:
                raise FormatError(f"unknown pool {e.pool!r} for {e.image_path}")
            if not e.group_id:
                raise FormatError(f"empty group_id for {e.image_path}")
            if e.pool == "unlabeled_synthetic" and e.mask_path is not None:
                raise FormatError(f"synthetic entry {e.image_path} must not carry a mask")
            if e.pool != "unlabeled_synthetic" and e.mask_path is None:
                raise FormatError(f"{e.pool} entry {e.image_path} has no mask")
            if e.image_path in seen:
                raise FormatError(f"duplicate path {e.image_path}")
            seen.add(e.image_path)

    def pool(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.pool == name]

    def __len__(self):
        return len(self.entries)


def group_of(path: str | Path) -> str:
    """Group id from a file name: the part before ``__`` if present, else the stem."""
    stem = Path(path).stem
    return stem.split("__", 1)[0] if "__" in stem else stem


def scan_dataset(root: str | Path) -> DatasetManifest:
    """Index ``root/{pool}/{images,masks}``; masks are matched by file name."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data root not found: {root}")
    entries = []
    for pool in POOLS:
        img_dir = root / pool / "images"
        if not img_dir.is_dir():
            continue
        for img in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            mask = None
            if pool != "unlabeled_synthetic":
                mask_path = root / pool / "masks" / img.name
                if not mask_path.exists():
                    raise FormatError(f"missing mask for {img}")
                mask = str(mask_path)
            entries.append(ManifestEntry(str(img), mask, group_of(img), pool))
    if not entries:
        raise FormatError(f"no images found under {root}")
    return DatasetManifest(tuple(entries))


def _entry_line(role: str, e: ManifestEntry) -> str:
    return "\t".join([role, e.group_id, e.image_path, e.mask_path or "-"])


def _parse_entry_line(line: str, lineno: int) -> tuple[str, ManifestEntry]:
    parts = line.split("\t")
    if len(parts) != 4:
        raise FormatError(f"line {lineno}: expected 4 tab-separated fields")
    role, group, image, mask = parts
    return role, ManifestEntry(image, None if mask == "-" else mask, group, role)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = ["# pool\tgroup_id\timage_path\tmask_path"]
    lines += [_entry_line(e.pool, e) for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> DatasetManifest:
    entries = []
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        entries.append(_parse_entry_line(line, i)[1])
    return DatasetManifest(tuple(entries))


# --------------------------------------------------------------------------
# splits

SPLIT_ROLES = ("labeled", "unlabeled", "synthetic", "val", "test")
ROLE_POOL = {"labeled": "labeled", "unlabeled": "labeled", "synthetic": "unlabeled_synthetic",
             "val": "val", "test": "test"}


@dataclass(frozen=True)
class SplitManifest:
    """Result of :func:`make_splits`.

    ``unlabeled`` holds the real training entries that were *not* selected;
    they only define how many synthetic images fill the unlabeled slot.
    """

    labeled: tuple[ManifestEntry, ...]
    unlabeled: tuple[ManifestEntry, ...]
    synthetic: tuple[ManifestEntry, ...] = ()
    val: tuple[ManifestEntry, ...] = ()
    test: tuple[ManifestEntry, ...] = ()
    fraction: float = 0.0
    seed: int = 0

    @property
    def synthetic_in_use(self) -> tuple[ManifestEntry, ...]:
        # the unlabeled slot is filled with as many synthetic images as there are slots
        return self.synthetic[: len(self.unlabeled)]

    def to_text(self) -> str:
        lines = [f"# fraction={self.fraction!r} seed={self.seed}",
                 "# role\tgroup_id\timage_path\tmask_path"]
        for role in SPLIT_ROLES:
            lines += [_entry_line(role, e) for e in getattr(self, role)]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path: str | Path) -> "SplitManifest":
        buckets: dict[str, list[ManifestEntry]] = {r: [] for r in SPLIT_ROLES}
        fraction, seed = 0.0, 0
        for i, line in enumerate(Path(path).read_text().splitlines(), 1):
            if line.startswith("# fraction="):
                f, s = line[2:].split()
                fraction, seed = float(f.split("=")[1]), int(s.split("=")[1])
                continue
            if not line or line.startswith("#"):
                continue
            role, e = _parse_entry_line(line, i)
            if role not in buckets:
                raise FormatError(f"line {i}: unknown role {role!r}")
            buckets[role].append(dataclasses.replace(e, pool=ROLE_POOL[role]))
        return cls(**{k: tuple(v) for k, v in buckets.items()}, fraction=fraction, seed=seed)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_splits(manifest: DatasetManifest, fraction: float, seed: int) -> SplitManifest:
    """Select a labeled subset of the real training pool by whole groups.

    Groups are visited in a seeded random order and added until the labeled
    image count reaches ``round(fraction * n_train)``; the overshoot is
    therefore smaller than one group.
    """
    if len(manifest) == 0:
        raise SplitError("empty manifest")
    if not 0.0 < fraction < 1.0:
        raise SplitError(f"fraction must be in (0, 1), got {fraction}")
    train = manifest.pool("labeled")
    if not train:
        raise SplitError("manifest has no training (labeled pool) entries")
    target = round_half_up(fraction * len(train))
    if target == 0:
        raise SplitError(f"fraction {fraction} of {len(train)} images selects no labeled group")

    groups: dict[str, list[ManifestEntry]] = {}
    for e in train:
        groups.setdefault(e.group_id, []).append(e)
    order = sorted(groups)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(order))

    chosen: set[str] = set()
    count = 0
    for k in perm:
        if count >= target:
            break
        g = order[k]
        chosen.add(g)
        count += len(groups[g])

    labeled = tuple(e for e in train if e.group_id in chosen)
    unlabeled = tuple(e for e in train if e.group_id not in chosen)
    return SplitManifest(
        labeled=labeled,
        unlabeled=unlabeled,
        synthetic=tuple(manifest.pool("unlabeled_synthetic")),
        val=tuple(manifest.pool("val")),
        test=tuple(manifest.pool("test")),
        fraction=fraction,
        seed=seed,
    )


# --------------------------------------------------------------------------
# images and masks

def normalize_image(arr: np.ndarray) -> np.ndarray:
    """Per-image min-max to [0, 1]; a constant image maps to all zeros."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi <= lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def load_image(path: str | Path) -> np.ndarray:
    """Read a 1- or 3-channel raster as an H x W x Ch float array in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode in ("RGBA", "P", "CMYK", "YCbCr", "LA"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise FormatError(f"{path}: unsupported image shape {arr.shape}")
    return normalize_image(arr).astype(np.float32)


def load_mask(path: str | Path, num_classes: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read mask {path}: {exc}") from exc
    if arr.ndim != 2:
        raise FormatError(f"{path}: mask must be single-channel, got shape {arr.shape}")
    arr = arr.astype(np.int64)
    if arr.min() < 0 or arr.max() >= num_classes:
        raise FormatError(f"{path}: mask value {arr.max()} outside [0, {num_classes})")
    return arr


def load_pair(entry: ManifestEntry, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    img = load_image(entry.image_path)
    mask = load_mask(entry.mask_path, num_classes)
    if img.shape[:2] != mask.shape:
        raise ShapeError(f"{entry.image_path}: image {img.shape[:2]} vs mask {mask.shape}")
    return img, mask


def save_label_map(labels: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(path)


def save_unit_image(img: np.ndarray, path: str | Path) -> None:
    """Write a [0, 1] float image (H x W or H x W x 1/3) as 8-bit PNG."""
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)


# --------------------------------------------------------------------------
# configuration

@dataclass
class RunConfig:
    data_root: str = ""
    split_path: str = ""
    labeled_fraction: float = 0.1
    patch_fraction: float = 2 / 3
    smooth_kernel: int = 3
    lambda_sa: float = 0.1
    ema_decay: float = 0.99
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "constant"
    iterations: int = 2000
    warmup_iterations: int | None = None
    eval_every: int = 200
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    seed: int = 0
    num_classes: int = 3
    sa_input_mode: str = "prob_weighted_image"
    mode: str = "semi"
    soft_targets: bool = True
    connectivity: int = 8
    dice_eps: float = 1e-5
    prob_clamp: float = 1e-7
    ce_reduction: str = "mean"
    widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    embed_dim: int = 64
    eval_model: str = "student"
    num_threads: int = 1

    def __post_init__(self):
        self.validate()

    @property
    def warmup(self) -> int:
        if self.warmup_iterations is None:
            return round_half_up(0.1 * self.iterations)
        return self.warmup_iterations

    def validate(self) -> None:
        checks = [
            (0 < self.patch_fraction <= 1, "patch_fraction must be in (0, 1]"),
            (self.smooth_kernel >= 1 and self.smooth_kernel % 2 == 1, "smooth_kernel must be odd and >= 1"),
            (self.lambda_sa >= 0, "lambda_sa must be >= 0"),
            (0 <= self.ema_decay < 1, "ema_decay must be in [0, 1)"),
            (0 < self.labeled_fraction < 1, "labeled_fraction must be in (0, 1)"),
            (self.lr > 0, "lr must be > 0"),
            (self.num_classes >= 2, "num_classes must be >= 2"),
            (self.sa_input_mode in ("raw_image", "prob_weighted_image", "prob_map"),
             f"unknown sa_input_mode {self.sa_input_mode!r}"),
            (self.mode in ("semi", "supervised"), f"unknown mode {self.mode!r}"),
            (self.lr_schedule in ("constant", "poly"), f"unknown lr_schedule {self.lr_schedule!r}"),
            (self.ce_reduction in ("sum", "mean"), f"unknown ce_reduction {self.ce_reduction!r}"),
            (self.connectivity in (4, 8), "connectivity must be 4 or 8"),
            (self.eval_model in ("student", "teacher"), f"unknown eval_model {self.eval_model!r}"),
            (self.iterations >= 0 and self.eval_every >= 1, "iterations >= 0 and eval_every >= 1 required"),
            (self.batch_labeled >= 1 and self.batch_unlabeled >= 1, "batch sizes must be >= 1"),
            (self.dice_eps > 0 and 0 < self.prob_clamp < 1, "dice_eps > 0 and 0 < prob_clamp < 1 required"),
            (self.warmup_iterations is None or self.warmup_iterations >= 0, "warmup_iterations must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _config_fields() -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value: Any) -> Any:
    default = getattr(RunConfig(), name)
    if value is None:
        if name != "warmup_iterations":
            raise ConfigError(f"{name}: null is not allowed")
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) or name == "warmup_iterations":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return [int(v) for v in value]
    return str(value)


def merge_config(base: dict[str, Any], updates: dict[str, Any]) -> dict[str, Any]:
    known = _config_fields()
    out = dict(base)
    for key, value in updates.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def parse_overrides(items: Iterable[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw) if raw.strip() else ""
    return out


def load_config(path: str | Path | None = None, overrides: Sequence[str] = (),
                **explicit: Any) -> RunConfig:
    """Resolve a config: defaults < file < ``overrides`` (``key=value``) < ``explicit``."""
    values = RunConfig().to_dict()
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a key: value mapping")
        values = merge_config(values, loaded)
    values = merge_config(values, parse_overrides(overrides))
    values = merge_config(values, {k: v for k, v in explicit.items() if v is not None})
    return RunConfig(**values)


def substream(seed: int, name: str) -> np.random.Generator:
    """Named, independent random stream derived from the single run seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


# --------------------------------------------------------------------------
# embedding exchange format

EMBED_MAGIC = b"SRAE"
EMBED_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_embeddings(batch: np.ndarray) -> bytes:
    batch = np.asarray(batch)
    if batch.ndim != 2:
        raise ShapeError(f"embedding batch must be 2-D, got {batch.shape}")
    if not np.all(np.isfinite(batch)):
        raise FormatError("embedding batch contains non-finite values")
    m, d = batch.shape
    payload = np.ascontiguousarray(batch, dtype="<f4").tobytes()
    return _HEADER.pack(EMBED_MAGIC, EMBED_VERSION, m, d) + payload


def read_embeddings(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError("embedding file shorter than its header")
    magic, version, m, d = _HEADER.unpack_from(data)
    if magic != EMBED_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != EMBED_VERSION:
        raise FormatError(f"unsupported version {version}")
    n = 4 * m * d
    if len(data) - _HEADER.size != n:
        raise FormatError(f"payload is {len(data) - _HEADER.size} bytes, expected {n}")
    arr = np.frombuffer(data, dtype="<f4", count=m * d, offset=_HEADER.size).reshape(m, d)
    if not np.all(np.isfinite(arr)):
        raise FormatError("embedding payload contains non-finite values")
    return arr.astype(np.float32)
