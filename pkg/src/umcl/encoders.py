"""Two-layer tanh encoders for images and token sequences, with manual backprop.

Both towers end in per-vector L2 normalization so every embedding is a unit
vector. Forward passes return an explicit cache; the matching backward pass
accumulates exact gradients into the ParameterStore's gradient slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prompt import PAD_ID, ContinuousPromptBank, EmbeddingSequence

BANK = ContinuousPromptBank.name
TOKEN_TABLE = "text.token_embedding"


class StaleCacheError(RuntimeError):
    """Backward pass requested without a matching forward."""


class ParameterStore:
    """Named float64 tensors, each paired with a same-shape gradient slot."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.version = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def bump(self):
        """Mark parameters as changed; outstanding caches become stale."""
        self.version += 1

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for k, v in self.params.items():
            out.add(k, v)
        return out

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass(frozen=True)
class EncoderDims:
    vocab_size: int = 4096
    token_dim: int = 32
    hidden_dim: int = 128
    embed_dim: int = 128
    image_dim: int = 64
    context_length: int = 32


def _dense_init(rng, fan_out, fan_in):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))


def init_parameters(dims: EncoderDims, rng: np.random.Generator) -> ParameterStore:
    store = ParameterStore()
    store.add(TOKEN_TABLE, rng.normal(0.0, 0.02, size=(dims.vocab_size, dims.token_dim)))
    store.add("text.W1", _dense_init(rng, dims.hidden_dim, dims.token_dim))
    store.add("text.b1", np.zeros(dims.hidden_dim))
    store.add("text.W2", _dense_init(rng, dims.embed_dim, dims.hidden_dim))
    store.add("text.b2", np.zeros(dims.embed_dim))
    store.add("image.W1", _dense_init(rng, dims.hidden_dim, dims.image_dim))
    store.add("image.b1", np.zeros(dims.hidden_dim))
    store.add("image.W2", _dense_init(rng, dims.embed_dim, dims.hidden_dim))
    store.add("image.b2", np.zeros(dims.embed_dim))
    store.add(BANK, ContinuousPromptBank.init(dims.context_length, dims.token_dim, rng))
    return store


def l2_normalize(z: np.ndarray):
    norms = np.sqrt((z * z).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise FloatingPointError("cannot normalize a zero vector")
    return z / norms, norms


def l2_normalize_backward(d_unit, unit, norms):
    return (d_unit - (d_unit * unit).sum(axis=-1, keepdims=True) * unit) / norms


@dataclass
class _HeadCache:
    x: np.ndarray
    h: np.ndarray
    unit: np.ndarray
    norms: np.ndarray


def _head_forward(params: ParameterStore, prefix: str, x: np.ndarray):
    h = np.tanh(x @ params[f"{prefix}.W1"].T + params[f"{prefix}.b1"])
    z = h @ params[f"{prefix}.W2"].T + params[f"{prefix}.b2"]
    unit, norms = l2_normalize(z)
    return unit, _HeadCache(x, h, unit, norms)


def _head_backward(params: ParameterStore, prefix: str, c: _HeadCache, d_unit):
    g = params.grads
    dz = l2_normalize_backward(d_unit, c.unit, c.norms)
    g[f"{prefix}.W2"] += dz.T @ c.h
    g[f"{prefix}.b2"] += dz.sum(axis=0)
    da = (dz @ params[f"{prefix}.W2"]) * (1.0 - c.h * c.h)
    g[f"{prefix}.W1"] += da.T @ c.x
    g[f"{prefix}.b1"] += da.sum(axis=0)
    return da @ params[f"{prefix}.W1"]


@dataclass(frozen=True)
class TextBatch:
    """Padded token ids plus the number of leading bank positions per row.

    ``ids`` holds only vocabulary tokens (pad id 0 is skipped); row ``i``
    is read as ``n_context[i]`` bank vectors followed by its non-pad ids.
    """

    ids: np.ndarray
    n_context: np.ndarray

    @classmethod
    def captions(cls, ids: np.ndarray) -> "TextBatch":
        return cls(ids, np.zeros(len(ids), dtype=np.int64))

    @classmethod
    def prompts(cls, ids: np.ndarray, context_length: int) -> "TextBatch":
        return cls(ids, np.full(len(ids), context_length, dtype=np.int64))

    def __len__(self):
        return len(self.ids)


@dataclass
class TextCache:
    version: int
    batch: TextBatch
    mask: np.ndarray
    counts: np.ndarray
    head: _HeadCache
    consumed: bool = False


@dataclass
class ImageCache:
    version: int
    head: _HeadCache
    consumed: bool = False


class DualEncoder:
    """Image tower and text tower over one ParameterStore."""

    def __init__(self, params: ParameterStore):
        self.params = params

    @property
    def context_length(self) -> int:
        return self.params[BANK].shape[0] if BANK in self.params else 0

    # images ---------------------------------------------------------------
    def encode_images(self, feats) -> tuple[np.ndarray, ImageCache]:
        x = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        expected = self.params["image.W1"].shape[1]
        if x.shape[1] != expected:
            raise ValueError(f"image feature length {x.shape[1]} != {expected}")
        unit, head = _head_forward(self.params, "image", x)
        return unit, ImageCache(self.params.version, head)

    def backward_images(self, cache: ImageCache, d_emb) -> None:
        self._check(cache)
        _head_backward(self.params, "image", cache.head, d_emb)

    # text -----------------------------------------------------------------
    def pool(self, batch: TextBatch):
        table = self.params[TOKEN_TABLE]
        ids = batch.ids
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ValueError("token id outside the vocabulary")
        mask = ids != PAD_ID
        counts = batch.n_context + mask.sum(axis=1)
        if np.any(counts == 0):
            raise ValueError("empty text sequence")
        if np.any(batch.n_context > self.context_length):
            raise ValueError("row requests more bank positions than the bank holds")
        summed = (table[ids] * mask[..., None]).sum(axis=1)
        if self.context_length:
            csum = np.cumsum(self.params[BANK], axis=0)
            has = batch.n_context > 0
            summed[has] += csum[batch.n_context[has] - 1]
        return summed / counts[:, None], mask, counts

    def encode_texts(self, batch: TextBatch) -> tuple[np.ndarray, TextCache]:
        pooled, mask, counts = self.pool(batch)
        unit, head = _head_forward(self.params, "text", pooled)
        return unit, TextCache(self.params.version, batch, mask, counts, head)

    def backward_texts(self, cache: TextCache, d_emb) -> None:
        self._check(cache)
        d_pooled = _head_backward(self.params, "text", cache.head, d_emb)
        d_each = d_pooled / cache.counts[:, None]
        g = self.params.grads
        rows, cols = np.nonzero(cache.mask)
        np.add.at(g[TOKEN_TABLE], cache.batch.ids[rows, cols], d_each[rows])
        for m in np.unique(cache.batch.n_context):
            if m:
                g[BANK][:m] += d_each[cache.batch.n_context == m].sum(axis=0)

    def encode_sequence(self, seq: EmbeddingSequence) -> np.ndarray:
        """Embed one assembled prompt given as explicit vectors (no cache)."""
        if len(seq) == 0:
            raise ValueError("empty sequence")
        width = self.params["text.W1"].shape[1]
        if seq.vectors.shape[1] != width:
            raise ValueError(f"sequence width {seq.vectors.shape[1]} != {width}")
        unit, _ = _head_forward(self.params, "text", seq.vectors.mean(axis=0, keepdims=True))
        return unit[0]

    def _check(self, cache):
        if cache is None:
            raise StaleCacheError("backward called without a forward cache")
        if cache.version != self.params.version:
            raise StaleCacheError("forward cache predates the latest parameter update")
        if cache.consumed:
            raise StaleCacheError("forward cache already consumed by a backward pass")
        cache.consumed = True


def encode_text(seq: EmbeddingSequence, params: ParameterStore) -> np.ndarray:
    return DualEncoder(params).encode_sequence(seq)


def encode_image(feat, params: ParameterStore) -> np.ndarray:
    return DualEncoder(params).encode_images(feat)[0][0]
