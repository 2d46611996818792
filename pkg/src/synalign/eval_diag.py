"""Segmentation metrics (Dice, Jaccard, 95HD, ASD) and the KDE domain-gap
diagnostic comparing a per-image statistic across two data pools."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .pseudo_label import softmax_probs

_CROSS = ndimage.generate_binary_structure(2, 1)


# --------------------------------------------------------------------------
# overlap and surface metrics

def overlap_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per foreground class Dice and Jaccard in percent.

    Both masks empty scores 100; exactly one empty scores 0.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    dice = np.zeros(num_classes - 1)
    jac = np.zeros(num_classes - 1)
    for c in range(1, num_classes):
        a, b = pred == c, gt == c
        sa, sb = int(a.sum()), int(b.sum())
        if sa == 0 and sb == 0:
            dice[c - 1] = jac[c - 1] = 100.0
            continue
        inter = int(np.logical_and(a, b).sum())
        union = sa + sb - inter
        dice[c - 1] = 100.0 * 2 * inter / (sa + sb)
        jac[c - 1] = 100.0 * inter / union
    return dice, jac


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside (the image border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def surface_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pooled directed boundary distances a->b and b->a (both masks non-empty)."""
    ba, bb = boundary(a), boundary(b)
    to_b = ndimage.distance_transform_edt(~bb)
    to_a = ndimage.distance_transform_edt(~ba)
    return np.concatenate([to_b[ba], to_a[bb]])


@dataclass(frozen=True)
class SurfaceResult:
    hd95: float
    asd: float
    defined: bool


def surface_metrics(pred: np.ndarray, gt: np.ndarray) -> SurfaceResult:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    ea, eb = not pred.any(), not gt.any()
    if ea and eb:
        return SurfaceResult(0.0, 0.0, True)
    if ea or eb:
        return SurfaceResult(float("nan"), float("nan"), False)
    d = surface_distances(pred, gt)
    return SurfaceResult(float(np.percentile(d, 95)), float(d.mean()), True)


@dataclass
class MetricsRecord:
    """Per-class metrics (foreground classes 1..C-1) plus macro means.

    ``valid`` is False for classes whose surface metrics are undefined (the
    class is empty in exactly one of prediction and ground truth); those
    entries are excluded from the hd95/asd means and counted in
    ``n_undefined``.
    """

    dice: list[float]
    jaccard: list[float]
    hd95: list[float]
    asd: list[float]
    valid: list[bool]
    mean_dice: float = 0.0
    mean_jaccard: float = 0.0
    mean_hd95: float = float("nan")
    mean_asd: float = float("nan")
    n_images: int = 1
    n_undefined: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, allow_nan=True)


def evaluate_case(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> MetricsRecord:
    dice, jac = overlap_metrics(pred, gt, num_classes)
    hd, asd, valid = [], [], []
    for c in range(1, num_classes):
        s = surface_metrics(pred == c, gt == c)
        hd.append(s.hd95)
        asd.append(s.asd)
        valid.append(s.defined)
    rec = MetricsRecord(dice.tolist(), jac.tolist(), hd, asd, valid)
    return aggregate([rec])


def aggregate(records: Sequence[MetricsRecord]) -> MetricsRecord:
    """Macro average: per class over images first, then over classes."""
    dice = np.array([r.dice for r in records])
    jac = np.array([r.jaccard for r in records])
    hd = np.array([r.hd95 for r in records], dtype=np.float64)
    asd = np.array([r.asd for r in records], dtype=np.float64)
    valid = np.array([r.valid for r in records], dtype=bool)
    hd = np.where(valid, hd, np.nan)
    asd = np.where(valid, asd, np.nan)

    def _nanmean(x, axis=None):
        with np.errstate(invalid="ignore"):
            n = np.sum(~np.isnan(x), axis=axis)
            s = np.nansum(x, axis=axis)
            return np.where(n > 0, s / np.maximum(n, 1), np.nan)

    hd_c, asd_c = _nanmean(hd, 0), _nanmean(asd, 0)
    return MetricsRecord(
        dice=dice.mean(0).tolist(),
        jaccard=jac.mean(0).tolist(),
        hd95=hd_c.tolist(),
        asd=asd_c.tolist(),
        valid=valid.any(0).tolist(),
        mean_dice=float(dice.mean(0).mean()),
        mean_jaccard=float(jac.mean(0).mean()),
        mean_hd95=float(_nanmean(hd_c)),
        mean_asd=float(_nanmean(asd_c)),
        n_images=sum(r.n_images for r in records),
        n_undefined=int((~valid).sum()),
    )


def predict_labels(model, images: np.ndarray, chunk: int = 16) -> np.ndarray:
    out = [np.argmax(model.predict(images[i:i + chunk]), axis=1) for i in range(0, len(images), chunk)]
    return np.concatenate(out)


def evaluate_model(model, images: np.ndarray, masks: np.ndarray, num_classes: int) -> MetricsRecord:
    preds = predict_labels(model, images)
    return aggregate([evaluate_case(p, g, num_classes) for p, g in zip(preds, masks)])


def mean_foreground_dice(model, images: np.ndarray, masks: np.ndarray, num_classes: int) -> float:
    """Macro-mean foreground Dice as a fraction in [0, 1] (overlap terms only)."""
    preds = predict_labels(model, images)
    per_image = np.array([overlap_metrics(p, g, num_classes)[0] for p, g in zip(preds, masks)])
    return float(per_image.mean(0).mean() / 100.0)


def write_metrics(record: MetricsRecord, out_dir: str | Path, stem: str = "metrics") -> None:
    out_dir = Path(out_dir)
    (out_dir / f"{stem}.json").write_text(record.to_json() + "\n")
    with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "dice", "jaccard", "hd95", "asd", "valid"])
        for c in range(len(record.dice)):
            w.writerow([c + 1, f"{record.dice[c]:.6f}", f"{record.jaccard[c]:.6f}",
                        f"{record.hd95[c]:.6f}", f"{record.asd[c]:.6f}", int(record.valid[c])])
        w.writerow(["mean", f"{record.mean_dice:.6f}", f"{record.mean_jaccard:.6f}",
                    f"{record.mean_hd95:.6f}", f"{record.mean_asd:.6f}", ""])


# --------------------------------------------------------------------------
# kernel density estimation

@dataclass(frozen=True)
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float


def silverman_bandwidth(samples: np.ndarray) -> float:
    """0.9 * min(std, IQR / 1.34) * n^(-1/5), floored at 1e-6.

    When the IQR is zero the standard deviation alone is used.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    n = len(x)
    sd = float(np.std(x, ddof=1)) if n > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    iqr = float(q75 - q25)
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return max(0.9 * spread * n ** (-0.2), 1e-6)


def kde(samples, grid: np.ndarray | None = None, bandwidth: float | str = "silverman",
        n_points: int = 1024) -> KdeCurve:
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("kde needs at least one sample")
    h = silverman_bandwidth(x) if bandwidth == "silverman" else float(bandwidth)
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    if grid is None:
        grid = np.linspace(x.min() - 4 * h, x.max() + 4 * h, n_points)
    grid = np.asarray(grid, dtype=np.float64)
    z = (grid[:, None] - x[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (len(x) * h * np.sqrt(2 * np.pi))
    return KdeCurve(grid, dens, h)


def gap_score(a: KdeCurve, b: KdeCurve) -> float:
    """1 - overlap coefficient of two densities sampled on the same grid."""
    if a.grid.shape != b.grid.shape or not np.allclose(a.grid, b.grid):
        raise ShapeError("curves must share a grid")
    overlap = np.trapezoid(np.minimum(a.density, b.density), a.grid)
    return float(np.clip(1.0 - overlap, 0.0, 1.0))


def paired_kde(stat_a, stat_b, n_points: int = 1024) -> tuple[KdeCurve, KdeCurve]:
    a = np.asarray(stat_a, dtype=np.float64).ravel()
    b = np.asarray(stat_b, dtype=np.float64).ravel()
    ha, hb = silverman_bandwidth(a), silverman_bandwidth(b)
    h = max(ha, hb)
    lo = min(a.min(), b.min()) - 4 * h
    hi = max(a.max(), b.max()) + 4 * h
    grid = np.linspace(lo, hi, n_points)
    return kde(a, grid, ha), kde(b, grid, hb)


def area_fraction(probs: np.ndarray, class_index: int) -> np.ndarray:
    """Fraction of pixels whose argmax prediction is ``class_index``, per image."""
    return (np.argmax(probs, axis=1) == class_index).mean(axis=(1, 2))


def mean_probability(probs: np.ndarray, class_index: int) -> np.ndarray:
    return probs[:, class_index].mean(axis=(1, 2))


STATISTICS: dict[str, Callable[[np.ndarray, int], np.ndarray]] = {
    "area_fraction": area_fraction,
    "mean_probability": mean_probability,
}


@dataclass
class GapReport:
    labeled: KdeCurve
    unlabeled: KdeCurve
    gap: float
    stat_labeled: np.ndarray = field(repr=False)
    stat_unlabeled: np.ndarray = field(repr=False)
    class_index: int = 1
    statistic: str = "area_fraction"


def pool_statistic(model, images: np.ndarray, class_index: int, statistic="area_fraction",
                   chunk: int = 16) -> np.ndarray:
    fn = STATISTICS[statistic] if isinstance(statistic, str) else statistic
    vals = []
    for i in range(0, len(images), chunk):
        probs = softmax_probs(model.predict(images[i:i + chunk]), axis=1)
        if class_index >= probs.shape[1]:
            raise ValueError(f"class index {class_index} >= number of classes {probs.shape[1]}")
        vals.append(fn(probs, class_index))
    return np.concatenate(vals)


def domain_gap_report(model, labeled_images: np.ndarray, unlabeled_images: np.ndarray,
                      class_index: int = 1, statistic="area_fraction") -> GapReport:
    if len(labeled_images) == 0 or len(unlabeled_images) == 0:
        raise ValueError("both pools must be non-empty")
    sa = pool_statistic(model, labeled_images, class_index, statistic)
    sb = pool_statistic(model, unlabeled_images, class_index, statistic)
    ca, cb = paired_kde(sa, sb)
    name = statistic if isinstance(statistic, str) else getattr(statistic, "__name__", "custom")
    return GapReport(ca, cb, gap_score(ca, cb), sa, sb, class_index, name)


def write_gap_report(report: GapReport, out_dir: str | Path, stem: str = "kde") -> None:
    out_dir = Path(out_dir)
    with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "labeled", "unlabeled"])
        for x, a, b in zip(report.labeled.grid, report.labeled.density, report.unlabeled.density):
            w.writerow([f"{x:.8g}", f"{a:.8g}", f"{b:.8g}"])
    summary = {
        "gap": report.gap,
        "class_index": report.class_index,
        "statistic": report.statistic,
        "bandwidth_labeled": report.labeled.bandwidth,
        "bandwidth_unlabeled": report.unlabeled.bandwidth,
        "n_labeled": int(len(report.stat_labeled)),
        "n_unlabeled": int(len(report.stat_unlabeled)),
    }
    (out_dir / f"{stem}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    plot_gap_report(report, out_dir / f"{stem}.svg")


def plot_gap_report(report: GapReport, path: str | Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "synalign"
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(report.labeled.grid, report.labeled.density, color="tab:green", label="labeled")
    ax.plot(report.unlabeled.grid, report.unlabeled.density, color="tab:blue", label="unlabeled")
    ax.set_xlabel(f"{report.statistic} (class {report.class_index})")
    ax.set_ylabel("density")
    ax.set_title(f"gap = {report.gap:.3f}")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
