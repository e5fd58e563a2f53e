"""Samples, datasets and batching for the image-text and image-label sources."""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .prompt import builtin_registry


class Source(str, enum.Enum):
    IMAGE_TEXT = "ImageText"
    IMAGE_LABEL = "ImageLabel"


class SamplingPolicy(str, enum.Enum):
    PROPORTIONAL = "proportional"
    ONLY_IMAGE_TEXT = "only_image_text"
    ONLY_IMAGE_LABEL = "only_image_label"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    source: Source
    text: str | None = None
    label: np.ndarray | None = None

    def __post_init__(self):
        if self.source is Source.IMAGE_TEXT and self.text is None:
            raise DatasetError("ImageText sample without text")
        if self.source is Source.IMAGE_LABEL and self.label is None:
            raise DatasetError("ImageLabel sample without label")


def check_label(label, num_classes: int) -> np.ndarray:
    arr = np.asarray(label)
    if arr.ndim != 1 or len(arr) != num_classes:
        raise DatasetError(f"label length {arr.size} != {num_classes} classes")
    if not np.isin(arr, (0, 1)).all():
        raise DatasetError("label entries must be 0 or 1")
    if not arr.any():
        raise DatasetError("all-zero label; encode 'no finding' as its own class bit")
    return arr.astype(np.int8)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable, column-stored collection of single-source samples."""

    source: Source
    images: np.ndarray
    texts: tuple[str, ...] | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.images.setflags(write=False)
        if self.labels is not None:
            self.labels.setflags(write=False)
        n = len(self.images)
        if self.source is Source.IMAGE_TEXT and (self.texts is None or len(self.texts) != n):
            raise DatasetError("ImageText dataset needs one text per image")
        if self.source is Source.IMAGE_LABEL and (self.labels is None or len(self.labels) != n):
            raise DatasetError("ImageLabel dataset needs one label per image")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> Sample:
        return Sample(
            image=self.images[i],
            source=self.source,
            text=None if self.texts is None else self.texts[i],
            label=None if self.labels is None else self.labels[i],
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def image_dim(self) -> int:
        return self.images.shape[1]

    @property
    def num_classes(self) -> int | None:
        return None if self.labels is None else self.labels.shape[1]

    @classmethod
    def from_samples(cls, samples, source: Source) -> "Dataset":
        samples = list(samples)
        if any(s.source is not source for s in samples):
            raise DatasetError("mixed sources in one dataset")
        images = np.array([s.image for s in samples], dtype=np.float64)
        texts = tuple(s.text for s in samples) if source is Source.IMAGE_TEXT else None
        labels = (
            np.array([s.label for s in samples], dtype=np.int8)
            if source is Source.IMAGE_LABEL
            else None
        )
        return cls(source, images, texts, labels)


@dataclass(frozen=True, eq=False)
class EvalSet:
    """Held-out single-class images with one caption each.

    Serves zero-shot classification, linear probing (``classes``) and
    retrieval (``texts``).
    """

    images: np.ndarray
    classes: np.ndarray
    texts: tuple[str, ...] | None = None

    def __len__(self):
        return len(self.images)

    def split(self, test_fraction: float, seed: int) -> tuple["EvalSet", "EvalSet"]:
        """Stratified split into (train, test)."""
        rng = np.random.default_rng(seed)
        train, test = [], []
        for c in np.unique(self.classes):
            idx = rng.permutation(np.flatnonzero(self.classes == c))
            n_test = max(1, int(round(test_fraction * len(idx))))
            test.extend(idx[:n_test])
            train.extend(idx[n_test:])
        return self.take(np.sort(train)), self.take(np.sort(test))

    def take(self, idx) -> "EvalSet":
        idx = np.asarray(idx, dtype=np.int64)
        texts = None if self.texts is None else tuple(self.texts[i] for i in idx)
        return EvalSet(self.images[idx], self.classes[idx], texts)


def _parse_image(rec, lineno, image_dim):
    img = rec.get("image")
    if not isinstance(img, list) or not img:
        raise DatasetError(f"line {lineno}: 'image' must be a non-empty list of floats")
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 1 or not np.isfinite(arr).all():
        raise DatasetError(f"line {lineno}: image features must be finite floats")
    if image_dim is not None and len(arr) != image_dim:
        raise DatasetError(f"line {lineno}: image length {len(arr)} != {image_dim}")
    return arr


def _read_jsonl(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}: line {lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetError(f"{path}: line {lineno}: record must be an object")
            yield lineno, rec


def load_dataset(path, schema: Source | str, num_classes: int | None = None,
                 image_dim: int | None = None) -> Dataset:
    """Read a JSONL dataset, validating every record against ``schema``.

    ``num_classes`` and ``image_dim`` default to the first record's values.
    """
    schema = Source(schema)
    expected = {"image", "text"} if schema is Source.IMAGE_TEXT else {"image", "label"}
    images, texts, labels = [], [], []
    for lineno, rec in _read_jsonl(path):
        if set(rec) != expected:
            raise DatasetError(
                f"{path}: line {lineno}: keys {sorted(rec)} do not match {schema.value} "
                f"record {sorted(expected)}"
            )
        try:
            img = _parse_image(rec, lineno, image_dim)
            image_dim = len(img)
            if schema is Source.IMAGE_TEXT:
                if not isinstance(rec["text"], str):
                    raise DatasetError(f"line {lineno}: 'text' must be a string")
                texts.append(rec["text"])
            else:
                if num_classes is None:
                    num_classes = len(rec["label"])
                try:
                    labels.append(check_label(rec["label"], num_classes))
                except DatasetError as e:
                    raise DatasetError(f"line {lineno}: {e}") from None
        except DatasetError as e:
            msg = str(e)
            raise DatasetError(msg if msg.startswith(str(path)) else f"{path}: {msg}") from None
        images.append(img)
    if not images:
        raise DatasetError(f"{path}: no records")
    return Dataset(
        schema,
        np.array(images),
        tuple(texts) if schema is Source.IMAGE_TEXT else None,
        np.array(labels, dtype=np.int8) if schema is Source.IMAGE_LABEL else None,
    )


def write_dataset(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        for s in dataset:
            rec = {"image": s.image.tolist()}
            if dataset.source is Source.IMAGE_TEXT:
                rec["text"] = s.text
            else:
                rec["label"] = s.label.tolist()
            fh.write(json.dumps(rec) + "\n")


def load_eval_set(path, num_classes: int | None = None, image_dim: int | None = None) -> EvalSet:
    """Read labeled eval records: ``image``, one-hot ``label`` and optional ``text``.

    Texts are kept only when every record carries one.
    """
    images, classes, texts = [], [], []
    for lineno, rec in _read_jsonl(path):
        extra = set(rec) - {"image", "label", "text"}
        if extra or "label" not in rec:
            raise DatasetError(f"{path}: line {lineno}: eval records need image, label[, text]")
        try:
            img = _parse_image(rec, lineno, image_dim)
            if num_classes is None:
                num_classes = len(rec["label"])
            lab = check_label(rec["label"], num_classes)
        except DatasetError as e:
            raise DatasetError(f"{path}: line {lineno}: {e}") from None
        if lab.sum() != 1:
            raise DatasetError(f"{path}: line {lineno}: eval labels must be single-class")
        image_dim = len(img)
        images.append(img)
        classes.append(int(np.argmax(lab)))
        texts.append(rec.get("text"))
    if not images:
        raise DatasetError(f"{path}: no records")
    has_text = all(t is not None for t in texts)
    return EvalSet(np.array(images), np.array(classes), tuple(texts) if has_text else None)


def write_eval_set(eval_set: EvalSet, path, num_classes: int) -> None:
    with open(path, "w") as fh:
        for i in range(len(eval_set)):
            label = [0] * num_classes
            label[int(eval_set.classes[i])] = 1
            rec = {"image": eval_set.images[i].tolist(), "label": label}
            if eval_set.texts is not None:
                rec["text"] = eval_set.texts[i]
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_FILLER = (
    "the left right lower upper lobe lung base zone chest film portable view "
    "stable compared with prior study seen there is noted mild small moderate"
).split()


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 4
    samples_per_class: int = 100
    eval_per_class: int = 50
    image_dim: int = 64
    sigma_between: float = 1.0
    sigma_within: float = 0.35
    p_overlap: float = 0.0
    secondary_weight: float = 0.6
    pattern_words: int = 3
    caption_length: int = 12
    name_prob: float = 0.5

    def validate(self):
        if self.num_classes <= 0:
            raise ValueError("num_classes must be positive")
        if self.samples_per_class <= 0 or self.eval_per_class < 0:
            raise ValueError("sample counts must be positive")
        if self.image_dim <= 0:
            raise ValueError("image_dim must be positive")
        if not self.sigma_between > self.sigma_within >= 0:
            raise ValueError("need sigma_between > sigma_within >= 0")
        if not 0.0 <= self.p_overlap <= 1.0:
            raise ValueError("p_overlap must lie in [0, 1]")
        if self.p_overlap > 0 and self.num_classes < 2:
            raise ValueError("label overlap needs at least two classes")
        if not 0.0 <= self.name_prob <= 1.0:
            raise ValueError("name_prob must lie in [0, 1]")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass(frozen=True, eq=False)
class SyntheticCorpus:
    image_text: Dataset
    image_label: Dataset
    ground_truth: dict
    held_out: EvalSet
    class_names: tuple[str, ...]

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "image_text": out / "image_text.jsonl",
            "image_label": out / "image_label.jsonl",
            "eval": out / "eval.jsonl",
            "ground_truth": out / "ground_truth.csv",
        }
        write_dataset(self.image_text, paths["image_text"])
        write_dataset(self.image_label, paths["image_label"])
        write_eval_set(self.held_out, paths["eval"], len(self.class_names))
        with open(paths["ground_truth"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "index", "primary_class", "classes"])
            for split, rows in self.ground_truth.items():
                for i, cls in enumerate(rows):
                    w.writerow([split, i, cls[0], ";".join(map(str, cls))])
        return paths


def generate_synthetic(config: SynthConfig, seed: int) -> SyntheticCorpus:
    """Gaussian class clusters with captions and multi-hot labels.

    Every sample has a primary class; with probability ``p_overlap`` it also
    carries a second, distinct class. The image is then the primary
    centroid plus ``secondary_weight`` times the second centroid, the
    caption describes both findings and the label has both bits set.
    Held-out samples are always single-class.
    """
    config.validate()
    K, D = config.num_classes, config.image_dim
    rng = np.random.default_rng(seed)
    try:
        names = builtin_registry(K).class_names
    except ValueError:
        names = builtin_registry().class_names + tuple(
            f"finding {k}" for k in range(14, K)
        )
    centroids = rng.normal(0.0, config.sigma_between, size=(K, D))
    patterns = [
        [f"w{k}x{j}" for j in range(config.pattern_words)] for k in range(K)
    ]

    def describe(k):
        words = list(rng.choice(patterns[k], size=2))
        if rng.random() < config.name_prob:
            words.insert(int(rng.integers(len(words) + 1)), names[k])
        return words

    def draw(n_per_class, overlap):
        classes, images, texts = [], [], []
        for k in range(K):
            for _ in range(n_per_class):
                cls = [k]
                if overlap > 0 and rng.random() < overlap:
                    other = int(rng.integers(K - 1))
                    cls.append(other + (other >= k))
                img = centroids[k] + rng.normal(0.0, config.sigma_within, size=D)
                if len(cls) == 2:
                    img = img + config.secondary_weight * centroids[cls[1]]
                words = [w for c in cls for w in describe(c)]
                n_fill = max(0, config.caption_length - len(words))
                fill = list(rng.choice(_FILLER, size=n_fill))
                cap = fill[: n_fill // 2] + words + fill[n_fill // 2:]
                classes.append(cls)
                images.append(img)
                texts.append(" ".join(cap))
        return classes, np.array(images), tuple(texts)

    it_cls, it_img, it_txt = draw(config.samples_per_class, config.p_overlap)
    il_cls, il_img, _ = draw(config.samples_per_class, config.p_overlap)
    ev_cls, ev_img, ev_txt = draw(config.eval_per_class, 0.0)
    labels = np.zeros((len(il_cls), K), dtype=np.int8)
    for i, cls in enumerate(il_cls):
        labels[i, cls] = 1
    return SyntheticCorpus(
        image_text=Dataset(Source.IMAGE_TEXT, it_img, it_txt),
        image_label=Dataset(Source.IMAGE_LABEL, il_img, labels=labels),
        ground_truth={"image_text": it_cls, "image_label": il_cls, "eval": ev_cls},
        held_out=EvalSet(ev_img, np.array([c[0] for c in ev_cls]), ev_txt),
        class_names=tuple(names),
    )


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Batch:
    source: Source
    indices: np.ndarray
    images: np.ndarray
    texts: tuple[str, ...] | None = None
    labels: np.ndarray | None = None
    new_epoch: bool = False

    def __len__(self):
        return len(self.indices)

    @property
    def samples(self) -> list[Sample]:
        return [
            Sample(
                self.images[i], self.source,
                None if self.texts is None else self.texts[i],
                None if self.labels is None else self.labels[i],
            )
            for i in range(len(self))
        ]


@dataclass
class _EpochCursor:
    size: int
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pos: int = 0
    epoch: int = 0


class BatchSampler:
    """Draws source-homogeneous batches without replacement within an epoch.

    The source of each batch is chosen with probability proportional to
    dataset size unless ``policy`` pins it. Holds private RNG state: use one
    sampler per training thread.
    """

    def __init__(self, image_text: Dataset | None, image_label: Dataset | None,
                 batch_size: int, policy=SamplingPolicy.PROPORTIONAL,
                 rng: np.random.Generator | None = None):
        policy = SamplingPolicy(policy)
        if batch_size < 2:
            raise ValueError("batch size must be at least 2")
        self.datasets = {}
        if image_text is not None and len(image_text) and policy is not SamplingPolicy.ONLY_IMAGE_LABEL:
            self.datasets[Source.IMAGE_TEXT] = image_text
        if image_label is not None and len(image_label) and policy is not SamplingPolicy.ONLY_IMAGE_TEXT:
            self.datasets[Source.IMAGE_LABEL] = image_label
        if not self.datasets:
            raise ValueError(f"no data available under policy {policy.value}")
        for src, ds in self.datasets.items():
            if len(ds) < batch_size:
                raise ValueError(f"{src.value} dataset smaller than batch size {batch_size}")
        self.batch_size = batch_size
        self.policy = policy
        self.rng = rng if rng is not None else np.random.default_rng()
        self._sources = list(self.datasets)
        sizes = np.array([len(self.datasets[s]) for s in self._sources], dtype=np.float64)
        self._probs = sizes / sizes.sum()
        self._cursors = {s: _EpochCursor(len(ds)) for s, ds in self.datasets.items()}

    def _choose_source(self) -> Source:
        if len(self._sources) == 1:
            return self._sources[0]
        return self._sources[int(self.rng.random() >= self._probs[0])]

    def next_batch(self) -> Batch:
        src = self._choose_source()
        cur = self._cursors[src]
        new_epoch = False
        if cur.pos + self.batch_size > len(cur.order):
            cur.order = self.rng.permutation(cur.size)
            cur.pos = 0
            cur.epoch += 1
            new_epoch = True
        idx = cur.order[cur.pos: cur.pos + self.batch_size]
        cur.pos += self.batch_size
        ds = self.datasets[src]
        return Batch(
            source=src,
            indices=idx,
            images=ds.images[idx],
            texts=None if ds.texts is None else tuple(ds.texts[i] for i in idx),
            labels=None if ds.labels is None else ds.labels[idx],
            new_epoch=new_epoch,
        )

    def __iter__(self):
        while True:
            yield self.next_batch()
