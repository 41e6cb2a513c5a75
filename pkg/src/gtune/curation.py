"""
Report sentence curation.

Turns entity-annotated report sentences into ``"{location} {pathology}"``
prompts: sentences are filtered by pathology mention and negation/resolution
words, anatomy spans are mapped onto the closed set of 27 location terms, and
left/right pairs over the same region are merged into a bilateral term.
"""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)

PATHOLOGIES = (
    "Pneumonia",
    "Pneumothorax",
    "Pleural Effusion",
    "Lung Opacity",
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
)

LATERALITIES = ("left", "right", "bilateral")
REGIONS = ("", "apical", "upper", "middle", "lower", "costophrenic", "pleural", "base")
SPECIAL_LOCATIONS = ("lingular", "cardiomegaly", "pulmonary")
AND_TOKEN = "<and>"
ANATOMY_LABEL = "ANAT-DP"


def _location_name(laterality: str, region: str) -> str:
    if laterality == "bilateral" and region == "base":
        return "bibasilar"
    return f"{laterality} {region}".strip()


LOCATION_TERMS = tuple(
    [_location_name(lat, reg) for lat in LATERALITIES for reg in REGIONS] + list(SPECIAL_LOCATIONS)
)
assert len(LOCATION_TERMS) == 27


class CurationError(ValueError):
    pass


@dataclass
class Lexicon:
    negation: List[str]
    resolution: List[str]
    synonyms: dict
    plural_suffixes: List[str] = field(default_factory=lambda: ["s", "es"])
    irregular_plurals: dict = field(default_factory=dict)
    laterality_aliases: dict = field(default_factory=dict)
    region_aliases: dict = field(default_factory=dict)
    plural_regions: dict = field(default_factory=dict)
    term_aliases: dict = field(default_factory=dict)
    pathology_locations: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "Lexicon":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise CurationError(f"unknown lexicon keys: {sorted(unknown)}")
        lex = cls(**data)
        missing = set(lex.synonyms) ^ set(PATHOLOGIES)
        if missing:
            raise CurationError(f"lexicon synonyms must cover exactly the 8 pathologies, off by {sorted(missing)}")
        return lex

    @classmethod
    def load(cls, path=None) -> "Lexicon":
        if path is None:
            text = resources.files("gtune.data").joinpath("lexicon.json").read_text(encoding="utf-8")
        else:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class EntityAnnotation:
    image_id: str
    sentence: str
    spans: Tuple[Tuple[int, int, str], ...]
    pathology: str

    def anatomy_terms(self) -> List[str]:
        return [self.sentence[s:e].lower() for s, e, label in self.spans if label == ANATOMY_LABEL]

    @classmethod
    def from_dict(cls, rec: dict) -> "EntityAnnotation":
        try:
            image_id, sentence, pathology = rec["image_id"], rec["sentence"], rec["pathology"]
            spans = tuple((int(s), int(e), str(label)) for s, e, label in rec["spans"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CurationError(f"malformed record: {exc!r}") from None
        if not isinstance(image_id, str) or not isinstance(sentence, str):
            raise CurationError("image_id and sentence must be strings")
        if pathology not in PATHOLOGIES:
            raise CurationError(f"unknown pathology {pathology!r}")
        for s, e, _ in spans:
            if not 0 <= s < e <= len(sentence):
                raise CurationError(f"span ({s}, {e}) outside sentence of length {len(sentence)}")
        return cls(image_id, sentence, spans, pathology)


@dataclass(frozen=True)
class CuratedSample:
    image_id: str
    prompt: str
    locations: Tuple[str, ...]
    pathology: str

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "prompt": self.prompt,
            "locations": list(self.locations),
            "pathology": self.pathology,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "CuratedSample":
        return cls(rec["image_id"], rec["prompt"], tuple(rec["locations"]), rec["pathology"])


class Verdict(NamedTuple):
    keep: bool
    reason: Optional[str] = None


_WORD = re.compile(r"[a-z0-9]+")


def _words(text: str) -> List[str]:
    return _WORD.findall(text.lower())


def _word_forms(word: str, lexicon: Lexicon) -> set:
    forms = {word} | {word + suf for suf in lexicon.plural_suffixes}
    if word in lexicon.irregular_plurals:
        forms.add(lexicon.irregular_plurals[word])
    return forms


def mentions(words: Sequence[str], phrase: str, lexicon: Lexicon) -> bool:
    """Whole-word phrase match; the last word may carry a plural form."""
    target = _words(phrase)
    n = len(target)
    last = _word_forms(target[-1], lexicon)
    for i in range(len(words) - n + 1):
        if list(words[i:i + n - 1]) == target[:-1] and words[i + n - 1] in last:
            return True
    return False


def filter_sentence(sentence: str, pathology: str, lexicon: Lexicon) -> Verdict:
    if pathology not in lexicon.synonyms:
        raise CurationError(f"unknown pathology {pathology!r}")
    words = _words(sentence)
    if not any(mentions(words, syn, lexicon) for syn in lexicon.synonyms[pathology]):
        return Verdict(False, "no_mention")
    present = set(words)
    if present & set(lexicon.negation):
        return Verdict(False, "negation")
    if present & set(lexicon.resolution):
        return Verdict(False, "resolution")
    return Verdict(True)


def parse_location(term: str, lexicon: Lexicon):
    """Map one raw anatomy span onto ``(laterality, region)`` or a special term.

    Returns ``(parsed, reason)``; ``parsed`` is None when the span is unmappable.
    """
    words = _words(term)
    for w in words:
        if w in lexicon.term_aliases:
            canon = lexicon.term_aliases[w]
            if canon == "bibasilar":
                return ("bilateral", "base"), None
            return canon, None
    laterality = next((lexicon.laterality_aliases[w] for w in words if w in lexicon.laterality_aliases), None)
    region = next((lexicon.region_aliases[w] for w in words if w in lexicon.region_aliases), None)
    plural = next((lexicon.plural_regions[w] for w in words if w in lexicon.plural_regions), None)
    region = region or plural
    if laterality is None:
        # "bases", "apices": the plural alone implies both sides
        if plural is not None:
            return ("bilateral", plural), None
        return None, "region without laterality" if region else "no laterality or region"
    return (laterality, region or ""), None


def _merge(parsed: list) -> List[str]:
    sides = {}
    for item in parsed:
        if isinstance(item, tuple):
            sides.setdefault(item[1], set()).add(item[0])
    out = []
    for item in parsed:
        if isinstance(item, tuple):
            lat, region = item
            seen = sides[region]
            if "bilateral" in seen or {"left", "right"} <= seen:
                lat = "bilateral"
            name = _location_name(lat, region)
        else:
            name = item
        if name not in out:
            out.append(name)
    return out


def normalize_locations(raw_terms, scope: str = "sentence", lexicon: Optional[Lexicon] = None,
                        dropped: Optional[list] = None) -> List[str]:
    """Canonical location terms for the anatomy spans of a sentence or report.

    With ``scope="report"``, ``raw_terms`` is a list of per-sentence term
    lists; each sentence is merged first, then the report as a whole.
    Unmappable spans are dropped and, if ``dropped`` is given, appended to it
    as ``(term, reason)``.
    """
    lexicon = lexicon or default_lexicon()
    if scope == "report":
        per_sentence = [normalize_locations(terms, "sentence", lexicon, dropped) for terms in raw_terms]
        return normalize_locations([t for terms in per_sentence for t in terms], "sentence", lexicon)
    if scope != "sentence":
        raise CurationError(f"unknown scope {scope!r}")
    parsed = []
    for term in raw_terms:
        item, reason = parse_location(term, lexicon)
        if item is None:
            logger.debug("dropping anatomy term %r: %s", term, reason)
            if dropped is not None:
                dropped.append((term, reason))
            continue
        parsed.append(item)
    return _merge(parsed)


def build_prompt(locations: Sequence[str], pathology: str) -> str:
    if not locations:
        raise CurationError("a prompt needs at least one location")
    loc = f" {AND_TOKEN} ".join(locations)
    path = pathology.lower()
    # single-location pathology: "cardiomegaly cardiomegaly" collapses
    if loc == path:
        return path
    return f"{loc} {path}"


_DEFAULT_LEXICON = None


def default_lexicon() -> Lexicon:
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = Lexicon.load()
    return _DEFAULT_LEXICON


def _emit(image_id, locations, pathology, multi_location):
    if multi_location:
        return [CuratedSample(image_id, build_prompt(locations, pathology), tuple(locations), pathology)]
    return [CuratedSample(image_id, build_prompt([loc], pathology), (loc,), pathology) for loc in locations]


def curate(records: Iterable, lexicon: Optional[Lexicon] = None, scope: str = "report",
           multi_location: bool = True):
    """Run filtering, location normalization and prompt building over a record stream.

    Returns ``(samples, stats)``. ``records`` may hold dicts or
    :class:`EntityAnnotation`; malformed dicts are skipped and counted.
    """
    lexicon = lexicon or default_lexicon()
    if scope not in ("sentence", "report"):
        raise CurationError(f"unknown scope {scope!r}")
    skipped = Counter()
    diagnostics = []
    dropped_terms = []
    n_records = kept = malformed = no_location = 0
    groups = {}  # (image_id, pathology) -> per-sentence term lists
    samples = []

    for n, rec in enumerate(records, 1):
        n_records += 1
        if not isinstance(rec, EntityAnnotation):
            try:
                rec = EntityAnnotation.from_dict(rec)
            except CurationError as exc:
                malformed += 1
                diagnostics.append(f"record {n}: {exc}")
                continue
        verdict = filter_sentence(rec.sentence, rec.pathology, lexicon)
        if not verdict.keep:
            skipped[verdict.reason] += 1
            continue
        kept += 1
        fixed = lexicon.pathology_locations.get(rec.pathology)
        terms = [fixed] if fixed else rec.anatomy_terms()
        if scope == "sentence":
            locs = normalize_locations(terms, "sentence", lexicon, dropped_terms)
            if not locs:
                no_location += 1
                continue
            samples.extend(_emit(rec.image_id, locs, rec.pathology, multi_location))
        else:
            groups.setdefault((rec.image_id, rec.pathology), []).append(terms)

    for (image_id, pathology), term_lists in groups.items():
        locs = normalize_locations(term_lists, "report", lexicon, dropped_terms)
        if not locs:
            no_location += 1
            continue
        samples.extend(_emit(image_id, locs, pathology, multi_location))

    per_location = Counter(loc for s in samples for loc in s.locations)
    per_pathology = Counter(s.pathology for s in samples)
    stats = {
        "records": n_records,
        "kept_sentences": kept,
        "skipped": dict(sorted(skipped.items())),
        "malformed": malformed,
        "dropped_no_location": no_location,
        "dropped_terms": len(dropped_terms),
        "samples": len(samples),
        "per_location": dict(sorted(per_location.items())),
        "per_pathology": dict(sorted(per_pathology.items())),
        "diagnostics": diagnostics,
    }
    return samples, stats


def parse_prompt(prompt: str, pathology: str) -> List[str]:
    """Recover the location list from a prompt built by :func:`build_prompt`."""
    path = pathology.lower()
    if prompt == path:
        return [path]
    if not prompt.endswith(" " + path):
        raise CurationError(f"prompt {prompt!r} does not end with pathology {path!r}")
    head = prompt[: -len(path) - 1]
    return head.split(f" {AND_TOKEN} ")
