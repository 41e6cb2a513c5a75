"""
Location atlas: per-location 2D Gaussians summarizing bounding-box statistics,
and rendering of those Gaussians onto target grids.

All Gaussian parameters live in pixels of a 512 x 512 reference frame.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .curation import LOCATION_TERMS, REGIONS
from .tensorio import atomic_write_text

REFERENCE_RESOLUTION = 512

# region word -> Chest Imagenome-style region name (laterality prepended)
SOURCE_REGIONS = {
    "": "lung",
    "apical": "apical zone",
    "upper": "upper lung zone",
    "middle": "mid lung zone",
    "lower": "lower lung zone",
    "costophrenic": "costophrenic angle",
}
DEFAULT_FALLBACK = {
    "base": "lower lung zone",
    "pleural": "lower lung zone",
    "lingular": "left mid lung zone",
}
SPECIAL_SOURCES = {
    "cardiomegaly": ("cardiac silhouette",),
    "pulmonary": ("left lung", "right lung"),
}


class AtlasError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    location_name: str = ""
    image_id: str = ""

    def rescale(self, sx: float, sy: float) -> "BBox":
        return BBox(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy,
                    self.location_name, self.image_id)

    def check(self, width: float = REFERENCE_RESOLUTION, height: float = REFERENCE_RESOLUTION) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise AtlasError(f"degenerate box {self}")
        if self.x_min < 0 or self.y_min < 0 or self.x_max > width or self.y_max > height:
            raise AtlasError(f"box {self} outside a {width}x{height} frame")

    @classmethod
    def from_dict(cls, rec: dict) -> "BBox":
        return cls(float(rec["x_min"]), float(rec["y_min"]), float(rec["x_max"]), float(rec["y_max"]),
                   rec.get("location", rec.get("location_name", "")), str(rec.get("image_id", "")))

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "y_min": self.y_min, "x_max": self.x_max, "y_max": self.y_max}


@dataclass(frozen=True)
class Gaussian2D:
    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float

    def params(self) -> Tuple[float, float, float, float]:
        return (self.mu_x, self.mu_y, self.sigma_x, self.sigma_y)


def bbox_stats(b: BBox, divisor: float = 6.0) -> Gaussian2D:
    """Midpoint and extent/``divisor`` per axis (the +-3 sigma rule by default)."""
    if not (b.x_min < b.x_max and b.y_min < b.y_max):
        raise AtlasError(f"degenerate box {b}")
    return Gaussian2D(
        (b.x_min + b.x_max) / 2.0,
        (b.y_min + b.y_max) / 2.0,
        (b.x_max - b.x_min) / divisor,
        (b.y_max - b.y_min) / divisor,
    )


def _enclosing(boxes: Sequence[BBox]) -> BBox:
    return BBox(min(b.x_min for b in boxes), min(b.y_min for b in boxes),
                max(b.x_max for b in boxes), max(b.y_max for b in boxes),
                boxes[0].location_name, boxes[0].image_id)


def source_names(term: str, fallback: Optional[Dict[str, str]] = None) -> Tuple[str, ...]:
    """Annotated region names whose boxes define ``term``.

    More than one name means the per-image boxes are merged into their
    enclosing box (bilateral terms).
    """
    fallback = DEFAULT_FALLBACK if fallback is None else fallback
    if term in SPECIAL_SOURCES:
        return SPECIAL_SOURCES[term]
    if term in fallback and term not in REGIONS:
        return (fallback[term],)
    if term == "bibasilar":
        lat, region = "bilateral", "base"
    else:
        lat, _, region = term.partition(" ")
    if region in SOURCE_REGIONS:
        region_name = SOURCE_REGIONS[region]
    elif region in fallback:
        region_name = fallback[region]
    else:
        raise AtlasError(f"no source region for location {term!r}")
    sides = ("left", "right") if lat == "bilateral" else (lat,)
    return tuple(f"{side} {region_name}" for side in sides)


class Atlas:
    """Immutable mapping from location term to :class:`Gaussian2D`."""

    reference_resolution = REFERENCE_RESOLUTION

    def __init__(self, entries: Dict[str, Gaussian2D]):
        self._entries = dict(entries)

    def __getitem__(self, term: str) -> Gaussian2D:
        try:
            return self._entries[term]
        except KeyError:
            raise AtlasError(f"location {term!r} not in atlas") from None

    def __contains__(self, term) -> bool:
        return term in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, Atlas) and self._entries == other._entries

    def items(self):
        return sorted(self._entries.items())

    def names(self) -> List[str]:
        return sorted(self._entries)

    def missing(self, terms: Iterable[str] = LOCATION_TERMS) -> List[str]:
        return [t for t in terms if t not in self._entries]

    def dumps(self) -> str:
        lines = []
        for term in [t for t in LOCATION_TERMS if t in self._entries] + \
                [t for t in sorted(self._entries) if t not in LOCATION_TERMS]:
            g = self._entries[term]
            lines.append(json.dumps({"location": term, "mu_x": g.mu_x, "mu_y": g.mu_y,
                                     "sigma_x": g.sigma_x, "sigma_y": g.sigma_y}))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Atlas":
        entries = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            g = Gaussian2D(float(rec["mu_x"]), float(rec["mu_y"]), float(rec["sigma_x"]), float(rec["sigma_y"]))
            if g.sigma_x <= 0 or g.sigma_y <= 0:
                raise AtlasError(f"non-positive sigma for {rec['location']!r}")
            entries[rec["location"]] = g
        return cls(entries)

    @classmethod
    def load(cls, path) -> "Atlas":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def _mean_gaussian(stats: Sequence[Gaussian2D]) -> Gaussian2D:
    # fsum is exactly rounded, so the mean does not depend on input order
    n = len(stats)
    return Gaussian2D(*(math.fsum(p) / n for p in zip(*(g.params() for g in stats))))


def build_atlas(boxes: Iterable[BBox], fallback: Optional[Dict[str, str]] = None,
                terms: Sequence[str] = LOCATION_TERMS) -> Atlas:
    """Average box statistics per location term.

    Boxes labelled directly with a location term are used as-is; otherwise the
    term is resolved to annotated region names through :func:`source_names`.
    Raises :class:`AtlasError` naming the first term left without boxes.
    """
    by_name: Dict[str, List[BBox]] = {}
    for b in boxes:
        b.check()
        by_name.setdefault(b.location_name, []).append(b)

    entries = {}
    for term in terms:
        if term in by_name:
            chosen = by_name[term]
        else:
            names = source_names(term, fallback)
            if len(names) == 1:
                chosen = by_name.get(names[0], [])
            else:
                per_image: Dict[str, Dict[str, BBox]] = {}
                for name in names:
                    for b in by_name.get(name, []):
                        per_image.setdefault(b.image_id, {})[name] = b
                chosen = [_enclosing([parts[n] for n in names])
                          for _, parts in sorted(per_image.items()) if len(parts) == len(names)]
        if not chosen:
            raise AtlasError(f"no boxes for location {term!r}")
        entries[term] = _mean_gaussian([bbox_stats(b) for b in chosen])
    return Atlas(entries)


def render_gaussian(g: Gaussian2D, res: Tuple[int, int],
                    reference: float = REFERENCE_RESOLUTION) -> np.ndarray:
    """Peak-1 axis-aligned Gaussian on an ``(h, w)`` grid, sampled at pixel centers."""
    h, w = int(res[0]), int(res[1])
    if h < 2 or w < 2:
        raise AtlasError(f"grid must be at least 2x2, got {res}")
    sx, sy = w / reference, h / reference
    return gaussian_grid(g.mu_x * sx, g.mu_y * sy, g.sigma_x * sx, g.sigma_y * sy, (h, w))


def gaussian_grid(mu_x: float, mu_y: float, sigma_x: float, sigma_y: float,
                  res: Tuple[int, int]) -> np.ndarray:
    """Peak-1 Gaussian with parameters already in pixels of the ``(h, w)`` grid."""
    h, w = int(res[0]), int(res[1])
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    gx = np.exp(-((xs - mu_x) ** 2) / (2.0 * sigma_x ** 2))
    gy = np.exp(-((ys - mu_y) ** 2) / (2.0 * sigma_y ** 2))
    return np.outer(gy, gx)


def gaussian_mask(grid, eps: float = 1e-5) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    return (np.asarray(grid) > eps).astype(np.float64)


def load_boxes(path, reference: float = REFERENCE_RESOLUTION) -> List[BBox]:
    """Read box records, rescaling each from its ``image_size`` ([H, W]) to the reference frame."""
    boxes = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            b = BBox.from_dict(rec)
            if "image_size" in rec:
                height, width = rec["image_size"]
                b = b.rescale(reference / width, reference / height)
            boxes.append(b)
    return boxes
