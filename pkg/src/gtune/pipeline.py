"""
File-to-file stages and the cached end-to-end runner.

Each stage reads its inputs from disk and writes its outputs atomically.
``run_pipeline`` keys every stage on (stage name, digests of its inputs,
the config subset it reads) and reuses cached outputs when the key matches.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
import tempfile
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from .atlas import Atlas, AtlasError, build_atlas, load_boxes, render_gaussian
from .attention import AttentionError, ToyBackend, forward, heatmap
from .config import ConfigError
from .curation import CuratedSample, CurationError, Lexicon, curate
from .evaluation import EvalConfig, EvalError, evaluate, load_records, oracle_heatmap, postprocess
from .synth import BoxRecord, SynthError, synth_prompts
from .tensorio import (TensorFormatError, atomic_write_text, dumps_jsonl, file_digest, read_jsonl,
                       write_pgm, write_tensor)
from .tuning import Codebook, TuneConfig, TuningError, dumps_trace, optimize, prepare_samples, tokenize

logger = logging.getLogger(__name__)

DATA_ERRORS = (CurationError, AtlasError, AttentionError, EvalError, SynthError, TensorFormatError,
               TuningError, json.JSONDecodeError, KeyError, OSError)


class DataError(Exception):
    pass


class StageError(DataError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


# ----------------------------------------------------------------- builders

def make_backend(cfg: dict) -> ToyBackend:
    try:
        return ToyBackend(seed=cfg["seed"], **cfg["backend"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"backend: {exc}") from None


def make_tune_config(cfg: dict) -> TuneConfig:
    try:
        return TuneConfig(seed=cfg["seed"], **cfg["tune"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"tune: {exc}") from None


def make_eval_config(cfg: dict) -> EvalConfig:
    e = cfg["eval"]
    thresholds = tuple(float(t) for t in e["thresholds"])
    if not thresholds or any(not 0.0 <= t <= 1.0 for t in thresholds):
        raise ConfigError("eval thresholds must be a non-empty list within [0, 1]")
    if int(e["resamples"]) < 1 or not 0.0 < float(e["level"]) < 1.0 or int(e["workers"]) < 1:
        raise ConfigError("eval: resamples and workers must be >= 1, level in (0, 1)")
    return EvalConfig(thresholds, int(e["resamples"]), float(e["level"]), int(cfg["seed"]),
                      bool(e["use_otsu"]), int(e["workers"]))


def validate(cfg: dict) -> None:
    """Build every typed config once so bad values fail before any work starts."""
    make_backend(cfg)
    make_tune_config(cfg)
    make_eval_config(cfg)
    if cfg["curation"]["scope"] not in ("sentence", "report"):
        raise ConfigError("curation scope must be 'sentence' or 'report'")
    if int(cfg["synth"]["workers"]) < 1:
        raise ConfigError("synth workers must be >= 1")


# ------------------------------------------------------------------ helpers

def _records(path) -> List[dict]:
    out = []
    for n, rec, err in read_jsonl(path):
        if err:
            raise DataError(f"{path}:{n}: {err}")
        out.append(rec)
    return out


def read_samples(path) -> List[CuratedSample]:
    try:
        return [CuratedSample.from_dict(r) for r in _records(path)]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: bad sample record ({exc!r})") from None


def write_samples(path, samples: Sequence[CuratedSample]) -> None:
    atomic_write_text(path, dumps_jsonl(s.to_dict() for s in samples))


def read_box_records(path) -> List[BoxRecord]:
    return [BoxRecord.from_dict(r) for r in _records(path)]


def _dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------------- stages

def stage_curate(annotations, out_dir, cfg: dict) -> dict:
    c = cfg["curation"]
    lexicon = Lexicon.load(c["lexicon"]) if c["lexicon"] else None
    samples, stats = curate(_records(annotations), lexicon, c["scope"], c["multi_location"])
    out_dir = Path(out_dir)
    write_samples(out_dir / "samples.jsonl", samples)
    atomic_write_text(out_dir / "stats.json", _dumps_json(stats))
    return stats


def stage_atlas_build(boxes, out_dir, cfg: dict) -> Atlas:
    atlas = build_atlas(load_boxes(boxes), cfg["atlas"]["fallback"])
    atlas.save(Path(out_dir) / "atlas.jsonl")
    return atlas


def stage_atlas_render(atlas_path, out_dir, res: int, locations: Optional[Sequence[str]] = None,
                       pgm: bool = False) -> List[Path]:
    atlas = Atlas.load(atlas_path)
    written = []
    for term in locations or atlas.names():
        grid = render_gaussian(atlas[term], (res, res))
        stem = Path(out_dir) / term.replace(" ", "_")
        write_tensor(stem.with_suffix(".gtt"), grid)
        written.append(stem.with_suffix(".gtt"))
        if pgm:
            write_pgm(stem.with_suffix(".pgm"), grid)
    return written


def stage_tune(samples_path, atlas_path, out_dir, cfg: dict, init_codebook=None):
    backend = make_backend(cfg)
    tcfg = make_tune_config(cfg)
    if init_codebook:
        codebook = Codebook.load(init_codebook)
    else:
        codebook = Codebook.init(dim=backend.emb_dim, seed=cfg["seed"], scale=cfg["codebook"]["scale"])
    diagnostics: List[str] = []
    samples = prepare_samples(read_samples(samples_path), Atlas.load(atlas_path), codebook.vocab,
                              backend.side, backend.S, diagnostics)
    if not samples:
        raise DataError("no tunable samples")
    tuned, trace = optimize(samples, codebook, backend, tcfg)
    out_dir = Path(out_dir)
    tuned.save(out_dir / "codebook.gtt")
    atomic_write_text(out_dir / "trace.jsonl", dumps_trace(trace))
    return tuned, trace


def _gt_index(gt_path) -> Dict[tuple, BoxRecord]:
    return {(r.image_id, r.class_name): r for r in read_box_records(gt_path)}


def stage_predict(samples_path, gt_path, codebook_path, out_dir, cfg: dict) -> Path:
    """Heatmaps at image resolution for every sample that has ground truth, plus eval records."""
    backend = make_backend(cfg)
    codebook = Codebook.load(codebook_path)
    gt = _gt_index(gt_path)
    out_dir = Path(out_dir)
    rows = []
    for n, s in enumerate(read_samples(samples_path)):
        ref = gt.get((s.image_id, s.pathology))
        if ref is None:
            logger.warning("%s/%s: no ground truth, not predicted", s.image_id, s.pathology)
            continue
        ids, mask = tokenize(list(s.locations), s.pathology, codebook.vocab, backend.S)
        stack = forward(backend.for_image(s.image_id), codebook, ids, mask)
        hm = postprocess(heatmap(stack), ref.image_size).values
        name = f"heatmaps/{n:05d}.gtt"
        write_tensor(out_dir / name, hm)
        if cfg["predict"]["pgm"]:
            write_pgm(out_dir / name.replace(".gtt", ".pgm"), hm)
        rows.append({"image_id": s.image_id, "class": s.pathology, "prompt": s.prompt,
                     "image_size": list(ref.image_size), "boxes": [b.to_dict() for b in ref.boxes],
                     "heatmap": name})
    if not rows:
        raise DataError("no sample matched a ground-truth record")
    atomic_write_text(out_dir / "records.jsonl", dumps_jsonl(rows))
    return out_dir / "records.jsonl"


def stage_eval(records_path, out_dir, cfg: dict):
    report = evaluate(load_records(records_path), make_eval_config(cfg))
    out_dir = Path(out_dir)
    atomic_write_text(out_dir / "report.txt", report.table())
    atomic_write_text(out_dir / "report.jsonl", report.dumps_jsonl())
    return report


def stage_synth(boxes_path, atlas_path, out_path, cfg: dict) -> List[CuratedSample]:
    diagnostics: List[str] = []
    samples = synth_prompts(read_box_records(boxes_path), Atlas.load(atlas_path),
                            int(cfg["synth"]["workers"]), diagnostics)
    write_samples(out_path, samples)
    return samples


def stage_oracle(gt_path, out_dir, cfg: dict):
    """Oracle Gaussian heatmaps for every ground-truth record, their eval records and report."""
    out_dir = Path(out_dir)
    rows = []
    for n, rec in enumerate(read_box_records(gt_path)):
        if not rec.boxes:
            logger.warning("%s: no boxes, skipped", rec.image_id)
            continue
        hm = oracle_heatmap(rec.boxes, rec.image_size).values
        name = f"heatmaps/{n:05d}.gtt"
        write_tensor(out_dir / name, hm)
        if cfg["predict"]["pgm"]:
            write_pgm(out_dir / name.replace(".gtt", ".pgm"), hm)
        rows.append({"image_id": rec.image_id, "class": rec.class_name, "image_size": list(rec.image_size),
                     "boxes": [b.to_dict() for b in rec.boxes], "heatmap": name})
    atomic_write_text(out_dir / "records.jsonl", dumps_jsonl(rows))
    return stage_eval(out_dir / "records.jsonl", out_dir, cfg)


# ------------------------------------------------------------------ caching

def tree_digest(path) -> str:
    path = Path(path)
    if path.is_file():
        return file_digest(path)
    h = hashlib.sha256()
    for p in sorted(q for q in path.rglob("*") if q.is_file()):
        h.update(p.relative_to(path).as_posix().encode() + b"\0" + file_digest(p).encode() + b"\n")
    return h.hexdigest()


def stage_key(stage: str, inputs: Dict[str, str], config_subset) -> str:
    blob = json.dumps({"stage": stage, "inputs": inputs, "config": config_subset}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def cached_stage(cache_dir: Path, stage: str, inputs: Dict[str, Path], config_subset,
                 run: Callable[[Path], object]):
    """Run ``run(tmp_dir)`` unless outputs for this key exist. Returns ``(stage_dir, hit)``."""
    key = stage_key(stage, {k: tree_digest(p) for k, p in sorted(inputs.items())}, config_subset)
    final = cache_dir / f"{stage}-{key[:24]}"
    if final.is_dir():
        logger.info("stage %s: cache hit", stage)
        return final, True
    cache_dir.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=cache_dir, prefix=f".{stage}-"))
    try:
        run(tmp)
        os.replace(tmp, final)
    except BaseException as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        if isinstance(exc, (DataError,) + DATA_ERRORS):
            raise StageError(stage, exc) from exc
        raise
    logger.info("stage %s: ran", stage)
    return final, False


def require_inputs(cfg: dict, names: Sequence[str]) -> Dict[str, Path]:
    paths = {}
    for name in names:
        value = cfg["inputs"].get(name)
        if not value:
            raise ConfigError(f"input {name!r} not set")
        p = Path(value)
        if not p.is_file():
            raise ConfigError(f"input {name!r}: {p} not found")
        paths[name] = p
    return paths


def run_pipeline(cfg: dict, out_dir, cache_dir=None) -> Dict[str, bool]:
    """curate -> atlas -> tune -> predict -> eval, each stage cached by content hash.

    Stage outputs are copied under ``out_dir/<stage>/``. Returns stage -> cache hit.
    """
    validate(cfg)
    inputs = require_inputs(cfg, ("annotations", "boxes", "gt"))
    out_dir = Path(out_dir)
    cache_dir = Path(cache_dir) if cache_dir else out_dir / ".cache"
    lexicon = cfg["curation"]["lexicon"]
    cur_inputs = {"annotations": inputs["annotations"]}
    if lexicon:
        cur_inputs["lexicon"] = Path(lexicon)
    hits = {}
    dirs = {}
    dirs["curate"], hits["curate"] = cached_stage(
        cache_dir, "curate", cur_inputs, cfg["curation"] | {"lexicon": None},
        lambda d: stage_curate(inputs["annotations"], d, cfg))
    dirs["atlas"], hits["atlas"] = cached_stage(
        cache_dir, "atlas", {"boxes": inputs["boxes"]}, cfg["atlas"],
        lambda d: stage_atlas_build(inputs["boxes"], d, cfg))
    samples = dirs["curate"] / "samples.jsonl"
    atlas = dirs["atlas"] / "atlas.jsonl"
    dirs["tune"], hits["tune"] = cached_stage(
        cache_dir, "tune", {"samples": samples, "atlas": atlas},
        {k: cfg[k] for k in ("seed", "backend", "codebook", "tune")},
        lambda d: stage_tune(samples, atlas, d, cfg))
    dirs["predict"], hits["predict"] = cached_stage(
        cache_dir, "predict", {"samples": samples, "gt": inputs["gt"], "codebook": dirs["tune"]},
        {k: cfg[k] for k in ("seed", "backend", "predict")},
        lambda d: stage_predict(samples, inputs["gt"], dirs["tune"] / "codebook.gtt", d, cfg))
    dirs["eval"], hits["eval"] = cached_stage(
        cache_dir, "eval", {"predict": dirs["predict"]}, {k: cfg[k] for k in ("seed", "eval")},
        lambda d: stage_eval(dirs["predict"] / "records.jsonl", d, cfg))

    for stage, src in dirs.items():
        dst = out_dir / stage
        if dst.exists():
            shutil.rmtree(dst)
        shutil.copytree(src, dst)
    manifest = {stage: d.name for stage, d in dirs.items()}
    atomic_write_text(out_dir / "manifest.json", _dumps_json(manifest))
    return hits


def _alpha_label(alpha: float) -> str:
    return f"alpha_{alpha:g}"


def run_ablate(cfg: dict, out_dir, cache_dir=None) -> Dict[float, Path]:
    """One cached pipeline run per alpha; curation and atlas are shared."""
    out_dir = Path(out_dir)
    cache_dir = Path(cache_dir) if cache_dir else out_dir / ".cache"
    runs = {}
    lines = [f"{'alpha':<8} {'L_loc start':>12} {'L_loc end':>12} {'CNR':>8} {'mIoU %':>8}"]
    for alpha in cfg["ablate"]["alphas"]:
        alpha = float(alpha)
        if not math.isfinite(alpha) or alpha < 0:
            raise ConfigError(f"ablation alpha must be >= 0, got {alpha}")
        sub = dict(cfg, tune=dict(cfg["tune"], alpha=alpha))
        run_dir = out_dir / _alpha_label(alpha)
        run_pipeline(sub, run_dir, cache_dir)
        trace = _records(run_dir / "tune" / "trace.jsonl")
        avg = _records(run_dir / "eval" / "report.jsonl")[-1]
        cnr = "n/a" if avg["cnr_mean"] is None else f"{avg['cnr_mean']:.3f}"
        lines.append(f"{alpha:<8g} {trace[0]['L_loc']:>12.4f} {trace[-1]['L_loc']:>12.4f} "
                     f"{cnr:>8} {avg['miou_mean'] * 100:>8.1f}")
        runs[alpha] = run_dir
    atomic_write_text(out_dir / "ablation.txt", "\n".join(lines) + "\n")
    return runs
