"""
Phrase-grounding metrics over heatmaps.

Heatmaps are upsampled bilinearly (half-pixel centers, i.e. corner-aligned
false: output pixel i samples source coordinate (i + 0.5) * in / out - 0.5,
clamped to the valid range), zero-padded to the image shape and min-max
normalized. A pixel belongs to a box when its center (x + 0.5, y + 0.5) lies
in the half-open box [x_min, x_max) x [y_min, y_max).
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .atlas import BBox, gaussian_grid
from .curation import PATHOLOGIES
from .tensorio import derive_seed, read_jsonl, read_tensor

logger = logging.getLogger(__name__)

THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)
CNR_CAP = 100.0
VAR_FLOOR = 1e-12
OTSU_BINS = 256


class EvalError(ValueError):
    pass


class ConstantHeatmapError(EvalError):
    pass


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray
    provenance: str = "normalized"


# ---------------------------------------------------------------- heatmaps

def _resize_weights(n_in: int, n_out: int) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    w = np.zeros((n_out, n_in))
    w[np.arange(n_out), lo] += 1.0 - frac
    w[np.arange(n_out), hi] += frac
    return w


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return _resize_weights(x.shape[0], out_h) @ x @ _resize_weights(x.shape[1], out_w).T


def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def postprocess(raw, image_size: Tuple[int, int], use_otsu: bool = False) -> Heatmap:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or min(raw.shape) < 2:
        raise EvalError(f"raw heatmap must be 2D and at least 2x2, got {raw.shape}")
    H, W = int(image_size[0]), int(image_size[1])
    if H < 2 or W < 2:
        raise EvalError(f"image must be at least 2x2, got {(H, W)}")
    side = min(H, W)
    up = bilinear_resize(raw, side, side)
    out = np.zeros((H, W))
    top, left = (H - side) // 2, (W - side) // 2
    out[top:top + side, left:left + side] = up
    out = normalize(out)
    if use_otsu:
        return Heatmap(apply_otsu(out), "otsu")
    return Heatmap(out, "normalized")


def box_region(boxes: Sequence[BBox], shape: Tuple[int, int]) -> np.ndarray:
    """Boolean union of the boxes on an ``(H, W)`` pixel grid."""
    H, W = shape
    ys = np.arange(H)[:, None] + 0.5
    xs = np.arange(W)[None, :] + 0.5
    region = np.zeros((H, W), dtype=bool)
    for b in boxes:
        region |= (xs >= b.x_min) & (xs < b.x_max) & (ys >= b.y_min) & (ys < b.y_max)
    return region


# ------------------------------------------------------------------ metrics

def cnr_region(values, region) -> Tuple[float, bool]:
    """CNR of ``values`` inside vs outside a boolean region.

    Returns ``(cnr, capped)``; ``capped`` is set when the variance sum is
    below the floor and the value was replaced by ``sign * CNR_CAP``.
    """
    v = np.asarray(values, dtype=np.float64)
    region = np.asarray(region, dtype=bool)
    if v.shape != region.shape:
        raise EvalError(f"region {region.shape} does not match heatmap {v.shape}")
    n_in = int(region.sum())
    if n_in == 0:
        raise EvalError("region is empty")
    if n_in == region.size:
        raise EvalError("region covers the whole image")
    if v.max() == v.min():
        raise ConstantHeatmapError("CNR undefined on a constant heatmap")
    inside, outside = v[region], v[~region]
    diff = inside.mean() - outside.mean()
    var = inside.var() + outside.var()
    if var < VAR_FLOOR:
        return float(np.sign(diff) * CNR_CAP), True
    return float(diff / math.sqrt(var)), False


def cnr(h, boxes: Sequence[BBox]) -> float:
    values = h.values if isinstance(h, Heatmap) else np.asarray(h)
    return cnr_region(values, box_region(boxes, values.shape))[0]


def iou_region(values, region, threshold: float) -> float:
    binary = np.asarray(values) >= threshold
    union = np.count_nonzero(binary | region)
    if union == 0:
        return 0.0
    return np.count_nonzero(binary & region) / union


def miou_region(values, region, thresholds: Sequence[float] = THRESHOLDS) -> float:
    return math.fsum(iou_region(values, region, t) for t in thresholds) / len(thresholds)


def miou(h, boxes: Sequence[BBox], thresholds: Sequence[float] = THRESHOLDS) -> float:
    """Mean IoU of ``h >= t`` against the box union over the thresholds."""
    values = h.values if isinstance(h, Heatmap) else np.asarray(h)
    return miou_region(values, box_region(boxes, values.shape), thresholds)


def _otsu_bins(values) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0.0, 1.0)
    return np.minimum((v * OTSU_BINS).astype(int), OTSU_BINS - 1)


def otsu_threshold(values) -> float:
    """Threshold k/256 maximizing between-class variance of the 256-bin histogram.

    Bin b holds values in [b/256, (b+1)/256) and is represented by its center.
    Class 1 is bins >= k. Ties go to the lowest k.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2 or v.max() == v.min():
        raise EvalError("Otsu needs at least two distinct values")
    counts = np.bincount(_otsu_bins(v), minlength=OTSU_BINS).astype(np.float64)
    levels = (np.arange(OTSU_BINS) + 0.5) / OTSU_BINS
    p = counts / counts.sum()
    w0 = np.cumsum(p)[:-1]
    m0 = np.cumsum(p * levels)[:-1]
    total = float((p * levels).sum())
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros_like(w0)
    between[valid] = (total * w0[valid] - m0[valid]) ** 2 / (w0[valid] * w1[valid])
    if not valid.any() or between.max() <= 0:
        raise EvalError("all values fall in one histogram bin")
    k = int(np.argmax(between)) + 1
    return k / OTSU_BINS


def apply_otsu(values) -> np.ndarray:
    """Zero the values whose bin lies below the Otsu threshold; keep the rest as-is."""
    v = np.asarray(values, dtype=np.float64)
    k = round(otsu_threshold(v) * OTSU_BINS)
    keep = _otsu_bins(v).reshape(v.shape) >= k
    return np.where(keep, v, 0.0)


def bootstrap_ci(values: Sequence[float], resamples: int = 10000, level: float = 0.95,
                 seed: int = 0) -> Tuple[float, float]:
    """Percentile interval of resampled means."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise EvalError("bootstrap needs at least one value")
    if np.all(x == x[0]):
        return float(x[0]), float(x[0])
    rng = np.random.default_rng(seed)
    means = np.empty(resamples)
    chunk = max(1, 2_000_000 // x.size)
    for start in range(0, resamples, chunk):
        stop = min(resamples, start + chunk)
        idx = rng.integers(0, x.size, size=(stop - start, x.size))
        means[start:stop] = x[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(means, [tail, 100.0 - tail])
    return float(lo), float(hi)


def oracle_heatmap(boxes: Sequence[BBox], image_size: Tuple[int, int]) -> Heatmap:
    """Max over boxes of a Gaussian with mu = midpoint, sigma = extent / 3, normalized."""
    if not boxes:
        raise EvalError("oracle needs at least one box")
    grids = []
    for b in boxes:
        if not (b.x_min < b.x_max and b.y_min < b.y_max):
            raise EvalError(f"degenerate box {b}")
        grids.append(gaussian_grid((b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0,
                                   (b.x_max - b.x_min) / 3.0, (b.y_max - b.y_min) / 3.0, image_size))
    return Heatmap(normalize(np.maximum.reduce(grids)), "normalized")


# ------------------------------------------------------------------ records

@dataclass
class EvalRecord:
    image_id: str
    class_name: str
    gt_boxes: List[BBox]
    heatmap: np.ndarray
    image_size: Tuple[int, int]

    def check(self) -> None:
        if self.class_name not in PATHOLOGIES:
            raise EvalError(f"{self.image_id}: unknown class {self.class_name!r}")
        if not self.gt_boxes:
            raise EvalError(f"{self.image_id}: no ground-truth boxes")
        H, W = self.image_size
        for b in self.gt_boxes:
            try:
                b.check(W, H)
            except ValueError as exc:
                raise EvalError(f"{self.image_id}: {exc}") from None


def load_records(path) -> List[EvalRecord]:
    """Read eval records; heatmap paths resolve relative to the record file."""
    path = Path(path)
    records = []
    for n, rec, err in read_jsonl(path):
        if err:
            raise EvalError(f"{path}:{n}: {err}")
        try:
            hm_path = Path(rec["heatmap"])
            if not hm_path.is_absolute():
                hm_path = path.parent / hm_path
            r = EvalRecord(str(rec["image_id"]), rec["class"],
                           [BBox.from_dict(b) for b in rec["boxes"]],
                           read_tensor(hm_path).astype(np.float64),
                           tuple(int(s) for s in rec["image_size"]))
        except (KeyError, TypeError, OSError) as exc:
            raise EvalError(f"{path}:{n}: bad record ({exc!r})") from None
        r.check()
        records.append(r)
    return records


@dataclass(frozen=True)
class EvalConfig:
    thresholds: Tuple[float, ...] = THRESHOLDS
    resamples: int = 10000
    level: float = 0.95
    seed: int = 0
    use_otsu: bool = False
    workers: int = 1


@dataclass
class RecordScore:
    image_id: str
    class_name: str
    cnr: Optional[float]
    miou: float
    capped: bool = False


@dataclass
class ClassReport:
    class_name: str
    n: int
    cnr_mean: Optional[float]
    cnr_ci: Optional[Tuple[float, float]]
    miou_mean: float
    miou_ci: Tuple[float, float]
    cnr_missing: int = 0
    cnr_capped: int = 0

    def to_dict(self) -> dict:
        return {
            "class": self.class_name,
            "n": self.n,
            "cnr_mean": self.cnr_mean,
            "cnr_ci": None if self.cnr_ci is None else list(self.cnr_ci),
            "miou_mean": self.miou_mean,
            "miou_ci": list(self.miou_ci),
            "cnr_missing": self.cnr_missing,
            "cnr_capped": self.cnr_capped,
        }


@dataclass
class Report:
    classes: List[ClassReport] = field(default_factory=list)
    cnr_average: Optional[float] = None
    miou_average: Optional[float] = None

    def to_records(self) -> List[dict]:
        rows = [c.to_dict() for c in self.classes]
        rows.append({"class": "Average", "cnr_mean": self.cnr_average, "miou_mean": self.miou_average})
        return rows

    def dumps_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    def table(self) -> str:
        def fmt(mean, ci, scale=1.0, digits=2):
            if mean is None:
                return "n/a"
            if ci is None:
                return f"{mean * scale:.{digits}f}"
            return f"{mean * scale:.{digits}f} [{ci[0] * scale:.{digits}f}, {ci[1] * scale:.{digits}f}]"

        lines = [f"{'class':<18} {'n':>4}  {'CNR [95% CI]':<24} {'mIoU % [95% CI]'}"]
        for c in self.classes:
            lines.append(f"{c.class_name:<18} {c.n:>4}  {fmt(c.cnr_mean, c.cnr_ci):<24} "
                         f"{fmt(c.miou_mean, c.miou_ci, 100.0, 1):<24}".rstrip())
        lines.append(f"{'Average':<18} {'':>4}  {fmt(self.cnr_average, None):<24} "
                     f"{fmt(self.miou_average, None, 100.0, 1):<24}".rstrip())
        return "\n".join(lines) + "\n"


def score_record(rec: EvalRecord, cfg: EvalConfig = EvalConfig()) -> RecordScore:
    hm = np.asarray(rec.heatmap, dtype=np.float64)
    if hm.shape == tuple(rec.image_size):
        values = normalize(hm)
        if cfg.use_otsu and values.max() > 0:
            values = apply_otsu(values)
    else:
        values = postprocess(hm, rec.image_size, cfg.use_otsu).values
    region = box_region(rec.gt_boxes, values.shape)
    try:
        value, capped = cnr_region(values, region)
    except ConstantHeatmapError:
        logger.warning("%s: constant heatmap, CNR reported as missing", rec.image_id)
        value, capped = None, False
    return RecordScore(rec.image_id, rec.class_name, value, miou_region(values, region, cfg.thresholds), capped)


def _score_star(args):
    return score_record(*args)


def score_records(records: Sequence[EvalRecord], cfg: EvalConfig = EvalConfig()) -> List[RecordScore]:
    """Per-record scores in input order; ``cfg.workers > 1`` uses a process pool."""
    if cfg.workers > 1 and len(records) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            return list(pool.map(_score_star, [(r, cfg) for r in records]))
    return [score_record(r, cfg) for r in records]


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs)


def _ci(values, cfg: EvalConfig, name: str) -> Tuple[float, float]:
    lo, hi = bootstrap_ci(values, cfg.resamples, cfg.level, derive_seed(cfg.seed, name))
    m = _mean(values)
    # the percentile interval can miss the mean by rounding on tiny samples
    return min(lo, m), max(hi, m)


def aggregate(scores: Sequence[RecordScore], cfg: EvalConfig = EvalConfig()) -> Report:
    by_class: Dict[str, List[RecordScore]] = {}
    for s in scores:
        by_class.setdefault(s.class_name, []).append(s)
    report = Report()
    for name in PATHOLOGIES:
        rows = by_class.get(name)
        if not rows:
            continue
        cnrs = [s.cnr for s in rows if s.cnr is not None]
        mious = [s.miou for s in rows]
        report.classes.append(ClassReport(
            name, len(rows),
            _mean(cnrs) if cnrs else None,
            _ci(cnrs, cfg, f"bootstrap:{name}:cnr") if cnrs else None,
            _mean(mious),
            _ci(mious, cfg, f"bootstrap:{name}:miou"),
            cnr_missing=len(rows) - len(cnrs),
            cnr_capped=sum(s.capped for s in rows),
        ))
    cnr_means = [c.cnr_mean for c in report.classes if c.cnr_mean is not None]
    if cnr_means:
        report.cnr_average = _mean(cnr_means)
    if report.classes:
        report.miou_average = _mean([c.miou_mean for c in report.classes])
    return report


def evaluate(records: Iterable[EvalRecord], cfg: EvalConfig = EvalConfig()) -> Report:
    """Per-class means with bootstrap CIs and a macro average across classes."""
    return aggregate(score_records(list(records), cfg), cfg)
