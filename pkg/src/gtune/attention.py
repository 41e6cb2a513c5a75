"""
Cross-attention stacks.

A stack holds activations of shape (T timesteps, L layers, D spatial
positions, S tokens). They come either from :class:`ToyBackend`, a frozen
stand-in for the denoiser's cross-attention layers, or from files dumped by
an external model.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import numerics as nx
from .tensorio import atomic_write_text, derive_seed, read_tensor, write_tensor

SOFTMAX_AXES = ("tokens", "spatial")


class AttentionError(ValueError):
    pass


@dataclass
class AttentionStack:
    """Activations ``a`` (a graph node, shape T x L x D x S) plus token metadata."""

    a: nx.Node
    special_mask: np.ndarray
    token_ids: Sequence[int] = ()
    softmax_axis: str = "tokens"
    leaf: Optional[nx.Node] = None

    @property
    def values(self) -> np.ndarray:
        return self.a.value

    @property
    def dims(self):
        return self.a.shape

    def non_special(self) -> np.ndarray:
        return np.flatnonzero(~np.asarray(self.special_mask, dtype=bool))


def toy_latents(seed: int, d: int = 256, channels: int = 16) -> np.ndarray:
    """Deterministic image features with spatial structure, shape (D, channels).

    Random Fourier features of the pixel-center coordinates on a sqrt(D) grid,
    so linear read-outs of them can form localized bumps.
    """
    side = math.isqrt(d)
    if side * side != d:
        raise AttentionError(f"D={d} is not a perfect square")
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid((np.arange(side) + 0.5) / side, (np.arange(side) + 0.5) / side, indexing="ij")
    coords = np.stack([xs.ravel(), ys.ravel()], axis=1)
    freqs = rng.normal(0.0, 2.0 * np.pi, size=(2, channels))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=channels)
    return np.sqrt(2.0) * np.cos(coords @ freqs + phases)


@dataclass(frozen=True)
class ToyBackend:
    """Frozen cross-attention stand-in.

    Queries ``Q[t, l] = latents @ P_l + noise * N_t`` are fixed; keys are
    ``embeddings[token_ids] @ W_l``. Only the embeddings carry gradient.
    """

    seed: int = 0
    T: int = 2
    L: int = 2
    D: int = 256
    S: int = 16
    emb_dim: int = 1024
    d_head: int = 32
    channels: int = 16
    noise: float = 0.1
    key_gain: float = 1.0
    image_jitter: float = 0.0
    softmax_axis: str = "tokens"
    latents: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.softmax_axis not in SOFTMAX_AXES:
            raise AttentionError(f"softmax_axis must be one of {SOFTMAX_AXES}")
        side = math.isqrt(self.D)
        if side * side != self.D:
            raise AttentionError(f"D={self.D} is not a perfect square")
        if self.latents is None:
            object.__setattr__(self, "latents", toy_latents(derive_seed(self.seed, "latents"), self.D, self.channels))
        rng = np.random.default_rng(derive_seed(self.seed, "projections"))
        p = rng.normal(0.0, 1.0 / math.sqrt(self.channels), size=(self.L, self.channels, self.d_head))
        w = rng.normal(0.0, self.key_gain / math.sqrt(self.emb_dim), size=(self.L, self.emb_dim, self.d_head))
        noise = np.stack([np.random.default_rng(derive_seed(self.seed, f"timestep:{t}"))
                          .normal(0.0, 1.0, size=(self.D, self.d_head)) for t in range(self.T)])
        q = np.einsum("dc,lch->ldh", self.latents, p)
        q = q[None, :, :, :] + self.noise * noise[:, None, :, :]
        for arr in (p, w, q):
            arr.setflags(write=False)
        object.__setattr__(self, "_key_proj", w)
        object.__setattr__(self, "_queries", q)

    @property
    def side(self) -> int:
        return math.isqrt(self.D)

    @property
    def queries(self) -> np.ndarray:
        """Fixed queries, shape (T, L, D, d_head)."""
        return self._queries

    @property
    def key_projections(self) -> np.ndarray:
        return self._key_proj

    def with_latents(self, latents: np.ndarray) -> "ToyBackend":
        latents = np.asarray(latents, dtype=np.float64)
        if latents.shape != (self.D, self.channels):
            raise AttentionError(f"latents must have shape {(self.D, self.channels)}")
        return replace(self, latents=latents)

    def for_image(self, image_id: str) -> "ToyBackend":
        """Shared layout plus ``image_jitter`` times image-specific features."""
        if self.image_jitter == 0:
            return self
        own = toy_latents(derive_seed(self.seed, f"latents:{image_id}"), self.D, self.channels)
        return self.with_latents(self.latents + self.image_jitter * own)


def forward(backend: ToyBackend, codebook, token_ids: Sequence[int], special_mask=None,
            leaf: Optional[nx.Node] = None) -> AttentionStack:
    """Run the frozen backend on a token sequence.

    ``codebook`` needs ``embeddings`` (rows x emb_dim) and ``trainable``
    (bool per row). Pass ``leaf`` to reuse an existing embedding node;
    otherwise a fresh one is created with gradient enabled.
    """
    token_ids = [int(i) for i in token_ids]
    n_rows = codebook.embeddings.shape[0]
    if len(token_ids) > backend.S:
        raise AttentionError(f"{len(token_ids)} tokens exceed sequence length {backend.S}")
    bad = [i for i in token_ids if not 0 <= i < n_rows]
    if bad:
        raise AttentionError(f"unknown token ids {bad}")
    if leaf is None:
        leaf = nx.leaf(codebook.embeddings, requires_grad=True)
    if special_mask is None:
        special_mask = np.zeros(len(token_ids), dtype=bool)
    x = nx.take(leaf, token_ids, axis=0, grad_mask=codebook.trainable)
    scale = 1.0 / math.sqrt(backend.d_head)
    keys_t = [nx.transpose(nx.matmul(x, backend.key_projections[l])) for l in range(backend.L)]
    per_t = []
    for t in range(backend.T):
        per_l = []
        for l in range(backend.L):
            logits = nx.scale(nx.matmul(backend.queries[t, l], keys_t[l]), scale)
            if backend.softmax_axis == "tokens":
                per_l.append(nx.softmax_rows(logits))
            else:
                per_l.append(nx.transpose(nx.softmax_rows(nx.transpose(logits))))
        per_t.append(nx.stack(per_l))
    a = nx.stack(per_t)
    return AttentionStack(a, np.asarray(special_mask, dtype=bool), tuple(token_ids),
                          backend.softmax_axis, leaf)


def _non_special_or_raise(stack: AttentionStack) -> np.ndarray:
    idx = stack.non_special()
    if idx.size == 0:
        raise AttentionError("every token is special; nothing to attend with")
    return idx


def spatialize(stack: AttentionStack) -> nx.Node:
    """Mean over non-special tokens, reshaped row-major to T x L x sqrt(D) x sqrt(D)."""
    idx = _non_special_or_raise(stack)
    T, L, D, _ = stack.dims
    side = math.isqrt(D)
    if side * side != D:
        raise AttentionError(f"D={D} is not a perfect square")
    avg = nx.mean(nx.take(stack.a, idx, axis=3), axis=3)
    return nx.reshape(avg, (T, L, side, side))


def token_slices(stack: AttentionStack) -> List[nx.Node]:
    """One T x L x D node per non-special token."""
    idx = _non_special_or_raise(stack)
    return [nx.reshape(nx.take(stack.a, [i], axis=3), stack.dims[:3]) for i in idx]


def heatmap(stack: AttentionStack) -> np.ndarray:
    """Spatial map averaged over timesteps and layers, shape sqrt(D) x sqrt(D)."""
    return spatialize(stack).value.mean(axis=(0, 1))


def check_normalization(values: np.ndarray, softmax_axis: str = "tokens", tol: float = 1e-5) -> None:
    axis = 3 if softmax_axis == "tokens" else 2
    sums = np.asarray(values, dtype=np.float64).sum(axis=axis)
    worst = float(np.abs(sums - 1.0).max(initial=0.0))
    if not worst <= tol:
        raise AttentionError(f"activations do not sum to 1 over {softmax_axis} (max deviation {worst:.3g})")


def save_stack(path, stack: AttentionStack) -> None:
    """Write the tensor plus a ``.json`` sidecar header next to it."""
    path = Path(path)
    write_tensor(path, stack.values)
    T, L, D, S = stack.dims
    header = {
        "dims": {"T": T, "L": L, "D": D, "S": S},
        "token_ids": [int(i) for i in stack.token_ids],
        "special_mask": [bool(m) for m in stack.special_mask],
        "softmax_axis": stack.softmax_axis,
    }
    atomic_write_text(path.with_suffix(path.suffix + ".json"), json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_stack(path, tol: float = 1e-5) -> AttentionStack:
    """Ingest an externally dumped stack; rejects stacks that break the softmax invariant."""
    path = Path(path)
    values = read_tensor(path)
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    dims = header["dims"]
    expected = (dims["T"], dims["L"], dims["D"], dims["S"])
    if values.shape != expected:
        raise AttentionError(f"tensor shape {values.shape} does not match header dims {expected}")
    mask = np.asarray(header["special_mask"], dtype=bool)
    if mask.shape != (dims["S"],):
        raise AttentionError("special_mask length must equal S")
    side = math.isqrt(dims["D"])
    if side * side != dims["D"]:
        raise AttentionError(f"D={dims['D']} is not a perfect square")
    axis = header.get("softmax_axis", "tokens")
    check_normalization(values, axis, tol)
    return AttentionStack(nx.leaf(values), mask, tuple(header.get("token_ids", ())), axis)
