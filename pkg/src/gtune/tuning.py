"""
Embedding-only fine-tuning of cross-attention grounding.

The objective is ``L = L_div + L_loc``:

* ``L_div`` -- mean squared cosine between the l2-normalized activation maps
  of every ordered pair of distinct non-special tokens, averaged over
  timesteps and layers.
* ``L_loc`` -- mean over (timestep, layer) of ``1 - cos(A_sp, trg)`` where
  ``A_sp`` is the token-averaged spatial map and
  ``trg = 1[G > eps] * sg(A_sp) + alpha * G`` for the location Gaussian ``G``.

Only codebook rows flagged trainable (location tokens) are ever updated.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .atlas import Atlas, AtlasError, gaussian_mask, render_gaussian
from .attention import AttentionStack, ToyBackend, forward, spatialize, token_slices
from .curation import AND_TOKEN, CuratedSample, parse_prompt
from .tensorio import atomic_write_text, derive_seed, read_tensor, write_tensor

logger = logging.getLogger(__name__)

SPECIAL_TOKENS = ("<BoS>", "<EoS>", "<pad>", AND_TOKEN)


class TuningError(ValueError):
    pass


# --------------------------------------------------------------------- vocab

@dataclass(frozen=True)
class Vocab:
    tokens: Tuple[str, ...]
    kinds: Tuple[str, ...]

    def __post_init__(self):
        keys = [self._key(t, k) for t, k in zip(self.tokens, self.kinds)]
        if len(set(keys)) != len(keys):
            raise TuningError("duplicate vocabulary entries")
        object.__setattr__(self, "_index", {k: i for i, k in enumerate(keys)})

    @staticmethod
    def _key(token: str, kind: str) -> str:
        return token if kind in ("special", "reserved") else f"{kind}:{token}"

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, token: str, kind: str = "special") -> int:
        try:
            return self._index[self._key(token, kind)]
        except KeyError:
            raise TuningError(f"{kind} token {token!r} not in vocabulary") from None

    def trainable_mask(self) -> np.ndarray:
        return np.array([k == "location" for k in self.kinds], dtype=bool)

    def to_list(self) -> List[dict]:
        return [{"token": t, "kind": k} for t, k in zip(self.tokens, self.kinds)]

    @classmethod
    def from_list(cls, rows: Sequence[dict]) -> "Vocab":
        return cls(tuple(r["token"] for r in rows), tuple(r["kind"] for r in rows))

    @classmethod
    def default(cls) -> "Vocab":
        text = resources.files("gtune.data").joinpath("vocab.json").read_text(encoding="utf-8")
        return cls.from_list(json.loads(text))


def tokenize(locations: Sequence[str], pathology: str, vocab: Vocab, seq_len: int):
    """Token ids and special-token mask for a ``{location} {pathology}`` prompt.

    Sequence layout: ``<BoS>``, location words (``<and>`` between locations),
    pathology words, ``<EoS>``, then ``<pad>`` up to ``seq_len``. The
    collapsed single-location prompt (e.g. ``cardiomegaly``) carries only
    the location word.
    """
    ids = [vocab.index("<BoS>")]
    for k, loc in enumerate(locations):
        if k:
            ids.append(vocab.index(AND_TOKEN))
        ids.extend(vocab.index(w, "location") for w in loc.split())
    path = pathology.lower()
    if " ".join(locations) != path:
        ids.extend(vocab.index(w, "pathology") for w in path.split())
    ids.append(vocab.index("<EoS>"))
    if len(ids) > seq_len:
        raise TuningError(f"prompt needs {len(ids)} tokens, sequence length is {seq_len}")
    ids.extend([vocab.index("<pad>")] * (seq_len - len(ids)))
    special = {vocab.index(t) for t in SPECIAL_TOKENS}
    mask = np.array([i in special for i in ids], dtype=bool)
    return ids, mask


# ------------------------------------------------------------------ codebook

@dataclass
class Codebook:
    embeddings: np.ndarray  # float32, rows x dim
    trainable: np.ndarray  # bool, rows
    vocab: Vocab

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.trainable = np.asarray(self.trainable, dtype=bool)
        if self.embeddings.shape[0] != len(self.vocab) or self.trainable.shape != (len(self.vocab),):
            raise TuningError("codebook rows, trainable flags and vocabulary disagree in length")

    @classmethod
    def init(cls, vocab: Optional[Vocab] = None, dim: int = 1024, seed: int = 0,
             scale: float = 0.02) -> "Codebook":
        """Random stand-in for pre-trained text embeddings."""
        vocab = vocab or Vocab.default()
        rng = np.random.default_rng(derive_seed(seed, "codebook"))
        emb = rng.normal(0.0, scale, size=(len(vocab), dim)).astype(np.float32)
        return cls(emb, vocab.trainable_mask(), vocab)

    def copy(self) -> "Codebook":
        return Codebook(self.embeddings.copy(), self.trainable.copy(), self.vocab)

    def save(self, path) -> None:
        """Tensor file at ``path`` plus a ``.json`` sidecar (vocab, trainable flags)."""
        path = Path(path)
        write_tensor(path, self.embeddings)
        side = {"vocab": self.vocab.to_list(), "trainable": [bool(t) for t in self.trainable]}
        atomic_write_text(path.with_suffix(path.suffix + ".json"), json.dumps(side, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Codebook":
        path = Path(path)
        side = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
        return cls(read_tensor(path), np.array(side["trainable"], dtype=bool), Vocab.from_list(side["vocab"]))


# -------------------------------------------------------------------- config

@dataclass
class TuneConfig:
    alpha: float = 0.1
    eps_mask: float = 1e-5
    lr: float = 1e-4
    batch_size: int = 1
    steps: int = 200
    optimizer: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    div_loss: bool = True
    alpha_in_mask_only: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise TuningError("alpha must be >= 0")
        if self.eps_mask <= 0:
            raise TuningError("eps_mask must be > 0")
        if self.batch_size != 1:
            raise TuningError("only batch_size=1 is supported")
        if self.optimizer not in ("sgd", "adam"):
            raise TuningError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0:
            raise TuningError("steps must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "TuneConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise TuningError(f"unknown tuning keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


# -------------------------------------------------------------------- losses

def loss_div(slices: Sequence[nx.Node]) -> nx.Node:
    """Mean squared cosine over ordered pairs of distinct tokens; 0 for a single token."""
    n = len(slices)
    if n < 2:
        return nx.leaf(0.0)
    x = nx.l2_normalize(nx.stack(slices, axis=2), axis=-1)  # T x L x N x D
    T, L = x.shape[:2]
    gram = nx.matmul(x, nx.transpose(x, (0, 1, 3, 2)))
    off_diag = 1.0 - np.eye(n)
    return nx.scale(nx.sum_(nx.mul(nx.mul(gram, gram), off_diag)), 1.0 / (T * L * n * (n - 1)))


def build_target(a_sp, g_grid: np.ndarray, cfg: TuneConfig, frozen: Optional[np.ndarray] = None) -> nx.Node:
    """``mask * sg(a_sp) + alpha * G``; the result carries no gradient.

    ``frozen`` replaces ``sg(a_sp)`` with a fixed array, which is what a
    finite-difference check must hold constant.
    """
    a_sp = nx.as_node(a_sp)
    g_grid = np.asarray(g_grid, dtype=np.float64)
    if a_sp.shape[-2:] != g_grid.shape:
        raise TuningError(f"target grid {g_grid.shape} does not match spatial map {a_sp.shape[-2:]}")
    mask = gaussian_mask(g_grid, cfg.eps_mask)
    prior = cfg.alpha * g_grid * (mask if cfg.alpha_in_mask_only else 1.0)
    held = nx.stop_gradient(a_sp) if frozen is None else nx.leaf(np.asarray(frozen, dtype=np.float64))
    if held.shape != a_sp.shape:
        raise TuningError(f"frozen map {held.shape} does not match {a_sp.shape}")
    return nx.add(nx.mul(held, mask), prior)


def loss_loc(a_sp, trg) -> nx.Node:
    """Mean over leading (timestep, layer) axes of 1 - cosine of the flattened maps."""
    a_sp, trg = nx.as_node(a_sp), nx.as_node(trg)
    if a_sp.shape != trg.shape:
        raise TuningError(f"shape mismatch {a_sp.shape} vs {trg.shape}")
    lead = a_sp.shape[:-2]
    flat = lead + (a_sp.shape[-2] * a_sp.shape[-1],)
    cos = nx.cosine(nx.reshape(a_sp, flat), nx.reshape(trg, flat), axis=-1)
    return nx.mean(nx.add(nx.scale(cos, -1.0), 1.0))


def total_loss(stack: AttentionStack, g_grid: np.ndarray, cfg: TuneConfig,
               frozen: Optional[np.ndarray] = None):
    """Return ``(loss_node, {"L_div": float, "L_loc": float})``."""
    a_sp = spatialize(stack)
    l_loc = loss_loc(a_sp, build_target(a_sp, g_grid, cfg, frozen))
    if cfg.div_loss:
        l_div = loss_div(token_slices(stack))
        loss = nx.add(l_div, l_loc)
    else:
        l_div = None
        loss = l_loc
    parts = {"L_div": 0.0 if l_div is None else l_div.item(), "L_loc": l_loc.item()}
    return loss, parts


# ------------------------------------------------------------------- samples

@dataclass
class TuningSample:
    image_id: str
    prompt: str
    token_ids: List[int]
    special_mask: np.ndarray
    grid: np.ndarray


def target_grid(locations: Sequence[str], atlas: Atlas, side: int) -> np.ndarray:
    """Elementwise max of the locations' Gaussians on a side x side grid."""
    grids = [render_gaussian(atlas[loc], (side, side)) for loc in locations]
    return np.maximum.reduce(grids)


def prepare_samples(samples: Sequence[CuratedSample], atlas: Atlas, vocab: Vocab, side: int,
                    seq_len: int, diagnostics: Optional[list] = None) -> List[TuningSample]:
    """Tokenize prompts and render targets; samples that fail to resolve are skipped."""
    out = []
    for s in samples:
        locations = list(s.locations) or parse_prompt(s.prompt, s.pathology)
        try:
            grid = target_grid(locations, atlas, side)
            ids, mask = tokenize(locations, s.pathology, vocab, seq_len)
        except (AtlasError, TuningError) as exc:
            logger.warning("skipping %s: %s", s.image_id, exc)
            if diagnostics is not None:
                diagnostics.append(f"{s.image_id}: {exc}")
            continue
        out.append(TuningSample(s.image_id, s.prompt, ids, mask, grid))
    return out


def sample_loss(backend: ToyBackend, codebook: Codebook, sample: TuningSample, cfg: TuneConfig,
                leaf: Optional[nx.Node] = None, per_image: bool = True,
                frozen: Optional[np.ndarray] = None):
    be = backend.for_image(sample.image_id) if per_image else backend
    stack = forward(be, codebook, sample.token_ids, sample.special_mask, leaf=leaf)
    loss, parts = total_loss(stack, sample.grid, cfg, frozen)
    return loss, parts, stack


# ----------------------------------------------------------------- optimizer

def optimize(samples: Sequence[TuningSample], codebook: Codebook, backend: ToyBackend,
             cfg: TuneConfig, per_image: bool = True):
    """Batch-1 updates of the trainable codebook rows.

    Returns ``(tuned_codebook, trace)``. ``trace`` holds one record per step,
    measured before that step's update, plus a final record at
    ``step == cfg.steps`` measured after the last update on the first
    sample visited.
    """
    master = codebook.embeddings.astype(np.float64)
    rows = np.flatnonzero(codebook.trainable)
    trace = []
    if not samples or cfg.steps == 0:
        return codebook.copy(), trace

    rng = np.random.default_rng(derive_seed(cfg.seed, "sample-order"))
    order: List[int] = []
    m = np.zeros((rows.size, master.shape[1]))
    v = np.zeros_like(m)

    def loss_at(sample, with_grad):
        # the leaf carries the current values; codebook only supplies shape and flags
        leaf = nx.leaf(master, requires_grad=with_grad)
        loss, parts, _ = sample_loss(backend, codebook, sample, cfg, leaf=leaf, per_image=per_image)
        if with_grad:
            nx.backward(loss)
        return loss, parts, leaf

    first = None
    for step in range(cfg.steps):
        if not order:
            order = list(rng.permutation(len(samples)))
        sample = samples[order.pop(0)]
        first = first or sample
        loss, parts, leaf = loss_at(sample, True)
        trace.append({"step": step, "image_id": sample.image_id, "L_div": parts["L_div"],
                      "L_loc": parts["L_loc"], "L": loss.item()})
        if leaf.grad is None:
            continue
        g = leaf.grad[rows]
        if cfg.optimizer == "sgd":
            master[rows] -= cfg.lr * g
        else:
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1 ** (step + 1))
            vhat = v / (1 - cfg.beta2 ** (step + 1))
            master[rows] -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)

    loss, parts, _ = loss_at(first, False)
    trace.append({"step": cfg.steps, "image_id": first.image_id, "L_div": parts["L_div"],
                  "L_loc": parts["L_loc"], "L": loss.item()})

    tuned = codebook.embeddings.copy()
    tuned[rows] = master[rows].astype(np.float32)
    return Codebook(tuned, codebook.trainable.copy(), codebook.vocab), trace


def dumps_trace(trace) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in trace)
