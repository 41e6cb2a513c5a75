"""
Run configuration: packaged defaults, overlaid by a JSON config file, overlaid
by command-line flags. Every section rejects keys it does not know.
"""
from __future__ import annotations

import copy
import json
import os
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Optional

from .atlas import DEFAULT_FALLBACK
from .evaluation import THRESHOLDS

ENV_VAR = "GTUNE_CONFIG"
TOY = "toy"

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "inputs": {"annotations": None, "boxes": None, "gt": None},
    "curation": {"scope": "report", "multi_location": True, "lexicon": None},
    "atlas": {"fallback": dict(DEFAULT_FALLBACK), "render_res": 16},
    "backend": {"T": 2, "L": 2, "D": 256, "S": 16, "emb_dim": 1024, "d_head": 32, "channels": 16,
                "noise": 0.1, "key_gain": 1.0, "image_jitter": 0.0, "softmax_axis": "tokens"},
    "codebook": {"scale": 0.02},
    "tune": {"alpha": 0.1, "eps_mask": 1e-5, "lr": 1e-4, "batch_size": 1, "steps": 200,
             "optimizer": "sgd", "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8,
             "div_loss": True, "alpha_in_mask_only": False},
    "predict": {"pgm": False},
    "eval": {"thresholds": list(THRESHOLDS), "resamples": 10000, "level": 0.95,
             "use_otsu": False, "workers": 1},
    "synth": {"workers": 1},
    "ablate": {"alphas": [0.0, 0.1, 1.0]},
}

# keys whose value is a free-form mapping rather than a fixed schema
OPEN_KEYS = {("atlas", "fallback")}


class ConfigError(ValueError):
    pass


def _overlay(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and tuple(path.split(".")) not in OPEN_KEYS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            out[key] = _overlay(base[key], value, path)
        else:
            out[key] = copy.deepcopy(value)
    return out


def toy_config_path() -> Path:
    return Path(str(resources.files("gtune.data").joinpath("toy", "config.json")))


def resolve_config_path(path: Optional[str]) -> Optional[Path]:
    """Explicit path, else $GTUNE_CONFIG, else none. ``toy`` names the packaged toy config."""
    path = path or os.environ.get(ENV_VAR) or None
    if path is None:
        return None
    if path == TOY:
        return toy_config_path()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return p


def load_config(path: Optional[str] = None, flags: Optional[Dict[str, Any]] = None) -> dict:
    """Defaults < config file < flags. ``flags`` maps dotted keys to values; None means unset.

    Relative input paths in a config file resolve against the file's directory.
    """
    cfg = copy.deepcopy(DEFAULTS)
    cfg_path = resolve_config_path(path)
    if cfg_path is not None:
        try:
            data = json.loads(cfg_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{cfg_path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{cfg_path}: top level must be a mapping")
        for key in ("inputs",):
            for name, value in data.get(key, {}).items():
                if isinstance(value, str) and not Path(value).is_absolute():
                    data[key][name] = str(cfg_path.parent / value)
        for key in ("curation",):
            lex = data.get(key, {}).get("lexicon")
            if isinstance(lex, str) and not Path(lex).is_absolute():
                data[key]["lexicon"] = str(cfg_path.parent / lex)
        cfg = _overlay(cfg, data)
    for dotted, value in (flags or {}).items():
        if value is None:
            continue
        section, _, key = dotted.rpartition(".")
        cfg = _overlay(cfg, {section: {key: value}} if section else {key: value})
    return cfg


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
