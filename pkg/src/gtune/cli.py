"""
Command-line entry point.

Settings come from packaged defaults, then a JSON config file (``--config``
or the GTUNE_CONFIG environment variable; ``--config toy`` selects the
packaged toy problem), then flags. Exit status: 0 success, 1 invalid usage
or configuration, 2 bad input data.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import pipeline as pl
from .config import ENV_VAR, ConfigError, load_config
from .evaluation import Heatmap
from .tensorio import write_pgm

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _floats(value: str) -> List[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON config file, or 'toy' (default: ${ENV_VAR})")
    common.add_argument("--seed", type=int, help="run seed; every stage derives its own from it")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="gtune", description="Grounding-oriented prompt tuning toolkit.",
                epilog=f"Config precedence: flag > config file > default. {ENV_VAR} names a config "
                       "file used when --config is absent.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    c = sub.add_parser("curate", parents=[common], help="annotated sentences -> prompts")
    c.add_argument("--annotations", help="entity-annotated sentences (JSON lines)")
    c.add_argument("--out", required=True, help="output directory (samples.jsonl, stats.json)")
    c.add_argument("--scope", choices=("sentence", "report"))
    c.add_argument("--multi-location", type=_on_off, metavar="on|off")
    c.add_argument("--lexicon", help="lexicon JSON replacing the packaged one")

    c = sub.add_parser("atlas-build", parents=[common], help="bounding boxes -> location atlas")
    c.add_argument("--boxes", help="region boxes (JSON lines)")
    c.add_argument("--out", required=True, help="output directory (atlas.jsonl)")

    c = sub.add_parser("atlas-render", parents=[common], help="render atlas Gaussians to tensor files")
    c.add_argument("--atlas", required=True)
    c.add_argument("--out", required=True, help="output directory")
    c.add_argument("--res", type=int, help="grid side (default 16)")
    c.add_argument("--location", action="append", help="location term; repeatable (default: all)")
    c.add_argument("--pgm", action="store_true", help="also write graymap images")

    c = sub.add_parser("tune", parents=[common], help="optimize location-token embeddings")
    c.add_argument("--samples", required=True)
    c.add_argument("--atlas", required=True)
    c.add_argument("--out", required=True, help="output directory (codebook.gtt, trace.jsonl)")
    c.add_argument("--init", help="starting codebook (default: seeded random)")
    c.add_argument("--alpha", type=float)
    c.add_argument("--eps-mask", type=float)
    c.add_argument("--lr", type=float)
    c.add_argument("--steps", type=int)
    c.add_argument("--optimizer", choices=("sgd", "adam"))
    c.add_argument("--div-loss", type=_on_off, metavar="on|off")

    c = sub.add_parser("predict", parents=[common], help="emit heatmaps for prompts with ground truth")
    c.add_argument("--samples", required=True)
    c.add_argument("--gt", help="ground-truth boxes (JSON lines)")
    c.add_argument("--codebook", required=True)
    c.add_argument("--out", required=True, help="output directory (heatmaps/, records.jsonl)")
    c.add_argument("--pgm", action="store_true")

    c = sub.add_parser("eval", parents=[common], help="CNR and mIoU report")
    c.add_argument("--records", required=True, help="eval records (JSON lines)")
    c.add_argument("--out", required=True, help="output directory (report.txt, report.jsonl)")
    c.add_argument("--otsu", type=_on_off, metavar="on|off")
    c.add_argument("--resamples", type=int)
    c.add_argument("--thresholds", type=_floats, help="comma-separated, default 0.1,...,0.5")
    c.add_argument("--workers", type=int)

    c = sub.add_parser("synth", parents=[common], help="box-only records -> prompts")
    c.add_argument("--boxes", required=True, help="records {image_id, class, boxes, image_size}")
    c.add_argument("--atlas", required=True)
    c.add_argument("--out", required=True, help="output samples file (JSON lines)")
    c.add_argument("--workers", type=int)

    c = sub.add_parser("oracle", parents=[common], help="oracle Gaussian baseline heatmaps and report")
    c.add_argument("--gt", help="ground-truth boxes (JSON lines)")
    c.add_argument("--out", required=True)
    c.add_argument("--pgm", action="store_true")
    c.add_argument("--resamples", type=int)

    for name, text in (("pipeline", "curate -> atlas -> tune -> predict -> eval, cached"),
                       ("ablate", "pipeline once per alpha in the sweep")):
        c = sub.add_parser(name, parents=[common], help=text)
        c.add_argument("--annotations")
        c.add_argument("--boxes")
        c.add_argument("--gt")
        c.add_argument("--out", required=True)
        c.add_argument("--cache-dir", help="default: OUT/.cache")
        c.add_argument("--alpha", type=float)
        c.add_argument("--lr", type=float)
        c.add_argument("--steps", type=int)
        c.add_argument("--resamples", type=int)
        if name == "ablate":
            c.add_argument("--alphas", type=_floats, help="comma-separated, default 0,0.1,1")
    return p


FLAG_KEYS = {
    "seed": "seed",
    "annotations": "inputs.annotations",
    "boxes": "inputs.boxes",
    "gt": "inputs.gt",
    "scope": "curation.scope",
    "multi_location": "curation.multi_location",
    "lexicon": "curation.lexicon",
    "res": "atlas.render_res",
    "alpha": "tune.alpha",
    "eps_mask": "tune.eps_mask",
    "lr": "tune.lr",
    "steps": "tune.steps",
    "optimizer": "tune.optimizer",
    "div_loss": "tune.div_loss",
    "otsu": "eval.use_otsu",
    "resamples": "eval.resamples",
    "thresholds": "eval.thresholds",
    "alphas": "ablate.alphas",
}


def config_from_args(args: argparse.Namespace) -> dict:
    flags = {key: getattr(args, attr) for attr, key in FLAG_KEYS.items() if hasattr(args, attr)}
    if getattr(args, "workers", None) is not None:
        flags["synth.workers" if args.command == "synth" else "eval.workers"] = args.workers
    if getattr(args, "pgm", False):
        flags["predict.pgm"] = True
    # the box file of `synth` is a record stream, not the atlas box fixture
    if args.command == "synth":
        flags.pop("inputs.boxes", None)
    cfg = load_config(args.config, flags)
    pl.validate(cfg)
    return cfg


def emit_pgm(heatmap, path) -> None:
    """8-bit graymap of a normalized heatmap, pixel = round(255 * v)."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else heatmap
    write_pgm(path, values)


def _need_file(path, what: str) -> Path:
    p = Path(path) if path else None
    if p is None:
        raise ConfigError(f"{what} not given")
    if not p.is_file():
        raise ConfigError(f"{what}: {p} not found")
    return p


def _run(args, cfg) -> None:
    cmd = args.command
    out = Path(args.out)
    if cmd == "curate":
        src = _need_file(cfg["inputs"]["annotations"], "--annotations")
        stats = pl.stage_curate(src, out, cfg)
        print(f"{stats['samples']} prompts from {stats['records']} records "
              f"({stats['malformed']} malformed) -> {out / 'samples.jsonl'}")
    elif cmd == "atlas-build":
        src = _need_file(cfg["inputs"]["boxes"], "--boxes")
        atlas = pl.stage_atlas_build(src, out, cfg)
        print(f"{len(atlas)} locations -> {out / 'atlas.jsonl'}")
    elif cmd == "atlas-render":
        src = _need_file(args.atlas, "--atlas")
        res = int(cfg["atlas"]["render_res"])
        if res < 2:
            raise ConfigError("--res must be >= 2")
        files = pl.stage_atlas_render(src, out, res, args.location, args.pgm)
        print(f"{len(files)} grids -> {out}")
    elif cmd == "tune":
        samples, atlas = _need_file(args.samples, "--samples"), _need_file(args.atlas, "--atlas")
        init = _need_file(args.init, "--init") if args.init else None
        _, trace = pl.stage_tune(samples, atlas, out, cfg, init)
        if trace:
            print(f"L_loc {trace[0]['L_loc']:.4f} -> {trace[-1]['L_loc']:.4f} over {len(trace) - 1} steps")
    elif cmd == "predict":
        samples = _need_file(args.samples, "--samples")
        gt = _need_file(cfg["inputs"]["gt"], "--gt")
        codebook = _need_file(args.codebook, "--codebook")
        print(pl.stage_predict(samples, gt, codebook, out, cfg))
    elif cmd == "eval":
        report = pl.stage_eval(_need_file(args.records, "--records"), out, cfg)
        sys.stdout.write(report.table())
    elif cmd == "synth":
        samples = pl.stage_synth(_need_file(args.boxes, "--boxes"), _need_file(args.atlas, "--atlas"), out, cfg)
        print(f"{len(samples)} prompts -> {out}")
    elif cmd == "oracle":
        report = pl.stage_oracle(_need_file(cfg["inputs"]["gt"], "--gt"), out, cfg)
        sys.stdout.write(report.table())
    elif cmd == "pipeline":
        hits = pl.run_pipeline(cfg, out, args.cache_dir)
        for stage, hit in hits.items():
            print(f"{stage:<8} {'cached' if hit else 'ran'}")
        sys.stdout.write((out / "eval" / "report.txt").read_text(encoding="utf-8"))
    elif cmd == "ablate":
        pl.run_ablate(cfg, out, args.cache_dir)
        sys.stdout.write((out / "ablation.txt").read_text(encoding="utf-8"))


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"gtune: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        _run(args, cfg)
    except ConfigError as exc:
        print(f"gtune: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (pl.DataError,) + pl.DATA_ERRORS as exc:
        print(f"gtune: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
