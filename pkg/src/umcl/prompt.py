"""Text side of the model: hashed tokenizer, disease templates and prompt assembly.

A label prompt is the shared bank of learnable context vectors followed by
the class-name tokens and the tokens of one hand-written template::

    [V]_1 ... [V]_M  [class name]  [template(class name)]

Only the token ids are kept for the tail of the prompt; the bank occupies
the leading ``M`` positions and never appears in the id arrays.
"""

from __future__ import annotations

import hashlib
import re
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

PAD_ID = 0
UNK_ID = 1
MAX_LENGTH = 77

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class PromptConfigError(ValueError):
    """Raised when the context length leaves no room for the class tokens."""


@dataclass(frozen=True)
class Vocabulary:
    size: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.size < 3:
            raise ValueError("vocabulary needs room for pad, unknown and one token")

    def token_id(self, token: str) -> int:
        digest = hashlib.blake2b(
            token.encode("utf-8"), digest_size=8, key=str(self.seed).encode("ascii")
        ).digest()
        return 2 + int.from_bytes(digest, "little") % (self.size - 2)


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def token_ids(text: str, vocab: Vocabulary) -> list[int]:
    """Unpadded, untruncated ids for ``text``."""
    return [vocab.token_id(w) for w in split_words(text)]


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    pad_mask: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int((~self.pad_mask).sum())


def tokenize(text: str, vocab: Vocabulary, max_length: int = MAX_LENGTH) -> TokenSequence:
    """Lowercase, split on non-alphanumerics, hash, truncate then pad to ``max_length``.

    ``pad_mask`` is True at pad positions.
    """
    ids = token_ids(text, vocab)[:max_length]
    out = np.full(max_length, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return TokenSequence(ids=out, pad_mask=out == PAD_ID)


def tokenize_many(texts, vocab: Vocabulary, max_length: int = MAX_LENGTH) -> np.ndarray:
    return np.stack([tokenize(t, vocab, max_length).ids for t in texts]) if len(texts) else (
        np.zeros((0, max_length), dtype=np.int64)
    )


@dataclass(frozen=True)
class TemplateRegistry:
    """Per-class disease description sentences with the class name filled in."""

    class_names: tuple[str, ...]
    templates: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if len(self.class_names) != len(self.templates):
            raise ValueError("one template list per class is required")
        for k, ts in enumerate(self.templates):
            if not ts:
                raise ValueError(f"class {k} ({self.class_names[k]!r}) has no template")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, num_classes: int) -> "TemplateRegistry":
        if num_classes > self.num_classes:
            raise ValueError(
                f"registry has {self.num_classes} classes, {num_classes} requested"
            )
        return TemplateRegistry(self.class_names[:num_classes], self.templates[:num_classes])

    @classmethod
    def parse(cls, text: str, class_names) -> "TemplateRegistry":
        class_names = tuple(class_names)
        per_class: list[list[str]] = [[] for _ in class_names]
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                cid, sentence = line.split("\t", 1)
                cid = int(cid)
            except ValueError:
                raise ValueError(f"template line {lineno}: expected 'class_id<TAB>sentence'")
            if not 0 <= cid < len(class_names):
                raise ValueError(f"template line {lineno}: class id {cid} out of range")
            per_class[cid].append(sentence.strip().replace("{class}", class_names[cid]))
        return cls(class_names, tuple(tuple(ts) for ts in per_class))

    @classmethod
    def from_file(cls, path, class_names) -> "TemplateRegistry":
        return cls.parse(Path(path).read_text(), class_names)

    def to_text(self) -> str:
        lines = []
        for k, ts in enumerate(self.templates):
            lines.extend(f"{k}\t{t}" for t in ts)
        return "\n".join(lines) + "\n"


def builtin_registry(num_classes: int | None = None) -> TemplateRegistry:
    pkg = resources.files("umcl") / "data"
    names = [n for n in (pkg / "class_names.txt").read_text().splitlines() if n]
    reg = TemplateRegistry.parse((pkg / "templates.tsv").read_text(), names)
    return reg if num_classes is None else reg.subset(num_classes)


class ContinuousPromptBank:
    """View over the learnable ``(M, d)`` context vectors stored in a ParameterStore."""

    name = "prompt.bank"

    @staticmethod
    def init(context_length: int, token_dim: int, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, 0.02, size=(context_length, token_dim))


@dataclass
class EmbeddingSequence:
    """Assembled prompt: embedded vectors plus the ids that produced them.

    ``token_ids`` is -1 at bank positions, which are always ``[0, n_context)``.
    """

    vectors: np.ndarray
    token_ids: np.ndarray
    n_context: int

    @property
    def bank_positions(self) -> np.ndarray:
        return np.arange(self.n_context)

    def __len__(self):
        return len(self.token_ids)


@dataclass
class PromptBuilder:
    """Turns class ids and multi-hot labels into prompt token ids.

    Class-name and template ids are hashed once up front.
    """

    registry: TemplateRegistry
    vocab: Vocabulary
    context_length: int
    max_length: int = MAX_LENGTH
    _class_ids: list = field(init=False, repr=False)
    _template_ids: list = field(init=False, repr=False)

    def __post_init__(self):
        if self.context_length < 0:
            raise PromptConfigError("context length must be non-negative")
        if self.context_length >= self.max_length:
            raise PromptConfigError(
                f"context length {self.context_length} leaves no room for class tokens "
                f"within {self.max_length} positions"
            )
        self._class_ids = [token_ids(n, self.vocab) for n in self.registry.class_names]
        self._template_ids = [
            [token_ids(t, self.vocab) for t in ts] for ts in self.registry.templates
        ]
        room = self.max_length - self.context_length
        for k, ids in enumerate(self._class_ids):
            if len(ids) >= room:
                warnings.warn(
                    f"context length {self.context_length} leaves no template slots for "
                    f"class {k} ({self.registry.class_names[k]!r})",
                    stacklevel=2,
                )

    @property
    def num_classes(self) -> int:
        return self.registry.num_classes

    def n_templates(self, class_id: int) -> int:
        return len(self._template_ids[class_id])

    @property
    def room(self) -> int:
        return self.max_length - self.context_length

    def class_tail(self, class_id: int, template_index: int) -> list[int]:
        """Ids following the bank for one class: name tokens then template tokens."""
        if not 0 <= class_id < self.num_classes:
            raise IndexError(f"class id {class_id} out of range [0, {self.num_classes})")
        templates = self._template_ids[class_id]
        if not 0 <= template_index < len(templates):
            raise IndexError(
                f"template index {template_index} out of range for class {class_id}"
            )
        return (self._class_ids[class_id] + templates[template_index])[: self.room]

    def label_tail(self, label: np.ndarray, rng: np.random.Generator | None = None) -> list[int]:
        """Ids following the bank for a multi-hot label.

        Each positive class contributes its name and one template, in class
        order. Templates are drawn with ``rng``; without one the first
        template of each class is used.
        """
        ids: list[int] = []
        for k in np.flatnonzero(label):
            t = 0 if rng is None else int(rng.integers(self.n_templates(k)))
            ids += self._class_ids[k] + self._template_ids[k][t]
        return ids[: self.room]

    def pad(self, tails) -> np.ndarray:
        out = np.full((len(tails), self.room), PAD_ID, dtype=np.int64)
        for i, t in enumerate(tails):
            out[i, : len(t)] = t
        return out


def assemble_prompt(
    class_id: int,
    bank: np.ndarray,
    builder: PromptBuilder,
    template_index: int,
    embedder: np.ndarray,
) -> EmbeddingSequence:
    """Bank vectors, then embedded class name, then embedded template, truncated."""
    if bank.shape[0] != builder.context_length:
        raise PromptConfigError(
            f"bank has {bank.shape[0]} vectors, builder expects {builder.context_length}"
        )
    if bank.shape[0] and bank.shape[1] != embedder.shape[1]:
        raise ValueError("bank width differs from token embedding width")
    tail = np.asarray(builder.class_tail(class_id, template_index), dtype=np.int64)
    vectors = np.concatenate([bank, embedder[tail]], axis=0)
    ids = np.concatenate([np.full(bank.shape[0], -1, dtype=np.int64), tail])
    return EmbeddingSequence(vectors=vectors, token_ids=ids, n_context=bank.shape[0])


def class_prompt_set(class_id, bank, builder, embedder) -> list[EmbeddingSequence]:
    return [
        assemble_prompt(class_id, bank, builder, t, embedder)
        for t in range(builder.n_templates(class_id))
    ]
