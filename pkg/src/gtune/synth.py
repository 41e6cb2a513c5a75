"""
Synthetic prompts for box-only datasets.

Each box is summarized as a Gaussian (midpoint, extent/6) and matched to the
nearest atlas entry under the diagonal squared 2-Wasserstein form, i.e. the
plain sum of squared differences of (mu_x, mu_y, sigma_x, sigma_y). The
Bures cross-terms of the full metric are not included.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

from .atlas import REFERENCE_RESOLUTION, Atlas, AtlasError, BBox, Gaussian2D, bbox_stats
from .curation import PATHOLOGIES, CuratedSample, build_prompt

logger = logging.getLogger(__name__)


class SynthError(ValueError):
    pass


def w2_sq(a: Gaussian2D, b: Gaussian2D) -> float:
    return sum((p - q) ** 2 for p, q in zip(a.params(), b.params()))


@dataclass(frozen=True)
class MatchResult:
    box: BBox
    matched_location: str
    distance: float
    runner_up: Optional[Tuple[str, float]]


def match_box(b: BBox, atlas: Atlas) -> MatchResult:
    """Nearest atlas entry; equal distances resolve to the lexicographically first name."""
    if len(atlas) == 0:
        raise SynthError("atlas is empty")
    try:
        g = bbox_stats(b)
    except AtlasError as exc:
        raise SynthError(str(exc)) from None
    ranked = sorted((w2_sq(g, entry), name) for name, entry in atlas.items())
    best = ranked[0]
    runner = (ranked[1][1], ranked[1][0]) if len(ranked) > 1 else None
    return MatchResult(b, best[1], best[0], runner)


@dataclass(frozen=True)
class BoxRecord:
    image_id: str
    class_name: str
    boxes: Tuple[BBox, ...]
    image_size: Tuple[int, int] = (REFERENCE_RESOLUTION, REFERENCE_RESOLUTION)

    @classmethod
    def from_dict(cls, rec: dict) -> "BoxRecord":
        try:
            size = tuple(int(s) for s in rec.get("image_size", (REFERENCE_RESOLUTION, REFERENCE_RESOLUTION)))
            boxes = tuple(BBox.from_dict(b) for b in rec["boxes"])
            image_id, class_name = str(rec["image_id"]), rec["class"]
        except (KeyError, TypeError, ValueError) as exc:
            raise SynthError(f"malformed box record: {exc!r}") from None
        if class_name not in PATHOLOGIES:
            raise SynthError(f"unknown class {class_name!r}")
        return cls(image_id, class_name, boxes, size)

    def rescaled(self) -> Tuple[BBox, ...]:
        H, W = self.image_size
        return tuple(b.rescale(REFERENCE_RESOLUTION / W, REFERENCE_RESOLUTION / H) for b in self.boxes)


def synth_one(rec: BoxRecord, atlas: Atlas) -> Optional[CuratedSample]:
    if not rec.boxes:
        return None
    locations: List[str] = []
    for b in rec.rescaled():
        loc = match_box(b, atlas).matched_location
        if loc not in locations:
            locations.append(loc)
    return CuratedSample(rec.image_id, build_prompt(locations, rec.class_name), tuple(locations), rec.class_name)


def _synth_star(args):
    return synth_one(*args)


def synth_prompts(records: Iterable[BoxRecord], atlas: Atlas, workers: int = 1,
                  diagnostics: Optional[list] = None) -> List[CuratedSample]:
    """One prompt per image; records without boxes are skipped."""
    records = list(records)
    if workers > 1 and len(records) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_synth_star, [(r, atlas) for r in records]))
    else:
        results = [synth_one(r, atlas) for r in records]
    out = []
    for rec, sample in zip(records, results):
        if sample is None:
            logger.warning("%s: no boxes, skipped", rec.image_id)
            if diagnostics is not None:
                diagnostics.append(f"{rec.image_id}: no boxes")
            continue
        out.append(sample)
    return out
