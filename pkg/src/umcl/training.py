"""Training loop, Adam, warmup/linear-decay schedule and checkpoint files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import Batch, BatchSampler, Dataset, SamplingPolicy, Source
from .encoders import BANK, DualEncoder, EncoderDims, ParameterStore, TextBatch, init_parameters
from .objective import BatchInputs, label_targets, loss_gradient, forward_loss, pair_targets
from .prompt import MAX_LENGTH, PromptBuilder, TemplateRegistry, Vocabulary, builtin_registry, \
    tokenize_many

log = logging.getLogger(__name__)

LOSSES = ("umcl", "hard_infonce")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    lr: float = 1e-5
    warmup_fraction: float = 0.10
    batch_size: int = 16
    context_length: int = 32
    num_classes: int = 14
    embed_dim: int = 128
    image_dim: int = 64
    token_dim: int = 32
    hidden_dim: int = 128
    vocab_size: int = 4096
    max_length: int = MAX_LENGTH
    vocab_seed: int = 0
    seed: int = 0
    loss: str = "umcl"
    symmetric_loss: bool = False
    temperature: float = 0.07
    policy: str = SamplingPolicy.PROPORTIONAL.value
    log_every: int = 50

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        for name in ("steps", "batch_size", "num_classes", "embed_dim", "image_dim",
                     "token_dim", "hidden_dim", "vocab_size", "max_length", "log_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0 <= self.context_length < self.max_length:
            raise ValueError("context_length must lie in [0, max_length)")
        if self.lr <= 0 or self.temperature <= 0:
            raise ValueError("lr and temperature must be positive")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        SamplingPolicy(self.policy)

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.steps))

    @property
    def dims(self) -> EncoderDims:
        return EncoderDims(self.vocab_size, self.token_dim, self.hidden_dim, self.embed_dim,
                           self.image_dim, self.context_length)

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: type(f.default) for f in fields(cls)}

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear ramp to ``config.lr`` over the warmup steps, then linear decay to 0."""
    if not 1 <= step <= config.steps:
        raise ValueError(f"step {step} outside [1, {config.steps}]")
    warm = config.warmup_steps
    if step <= warm:
        return config.lr * step / warm
    return config.lr * (config.steps - step) / (config.steps - warm)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParameterStore) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.params.items()},
                   {k: np.zeros_like(p) for k, p in params.params.items()})


class NonFiniteGradient(FloatingPointError):
    pass


def adam_step(params: dict, grads: dict, state: AdamState, step: int, lr: float) -> None:
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    if step < 1:
        raise ValueError("Adam steps are counted from 1")
    bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient in {', '.join(bad)}")
    b1, b2 = state.beta1, state.beta2
    step_size = lr / (1.0 - b1 ** step)
    root_c2 = np.sqrt(1.0 - b2 ** step)
    for k, p in params.items():
        g = grads[k]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        m, v = state.m[k], state.v[k]
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp /= root_c2
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step_size
        p -= tmp


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"UMCLCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ParameterStore
    config: TrainConfig
    registry: TemplateRegistry
    step: int = 0
    adam: AdamState | None = None

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.config.vocab_size, self.config.vocab_seed)

    def model(self) -> DualEncoder:
        return DualEncoder(self.params)

    def prompt_builder(self) -> PromptBuilder:
        return PromptBuilder(self.registry, self.vocab, self.config.context_length,
                             self.config.max_length)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k], dtype="<f8").tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        save_checkpoint(self, path)


def _tensor_items(ckpt: Checkpoint):
    for k, v in ckpt.params.params.items():
        yield f"param/{k}", v
    if ckpt.adam is not None:
        for k in ckpt.params.params:
            yield f"adam.m/{k}", ckpt.adam.m[k]
            yield f"adam.v/{k}", ckpt.adam.v[k]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``MAGIC | u32 version | u64 header length | JSON header | payload | sha256``.

    Tensors are little-endian float64 in header order.
    """
    payload = io.BytesIO()
    entries = []
    for name, arr in _tensor_items(ckpt):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": payload.tell(),
                        "nbytes": len(raw)})
        payload.write(raw)
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "vocab_seed": ckpt.config.vocab_seed,
        "step": ckpt.step,
        "class_names": list(ckpt.registry.class_names),
        "templates": [list(t) for t in ckpt.registry.templates],
        "adam": None if ckpt.adam is None else {
            "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
        "tensors": entries,
    }, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + payload.getvalue()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path, expect: TrainConfig | None = None) -> Checkpoint:
    """Read a checkpoint, verifying checksum and format version.

    With ``expect``, refuses checkpoints whose model shape (classes,
    dimensions, context length, vocabulary) differs from it.
    """
    blob = Path(path).read_bytes()
    fixed = len(MAGIC) + 12
    if len(blob) < fixed + 32 or not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file or truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack("<IQ", body[len(MAGIC):fixed])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    header = json.loads(body[fixed: fixed + hlen])
    payload = body[fixed + hlen:]
    config = TrainConfig(**header["config"])
    if expect is not None:
        shape_keys = ("num_classes", "embed_dim", "image_dim", "token_dim", "hidden_dim",
                      "vocab_size", "context_length", "max_length", "vocab_seed")
        diff = [k for k in shape_keys if getattr(config, k) != getattr(expect, k)]
        if diff:
            raise CheckpointError(f"{path}: checkpoint differs from config in {', '.join(diff)}")
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]: e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    params = ParameterStore()
    for name, arr in tensors.items():
        if name.startswith("param/"):
            params.add(name[len("param/"):], arr)
    adam = None
    if header["adam"] is not None:
        adam = AdamState({k: tensors[f"adam.m/{k}"] for k in params},
                         {k: tensors[f"adam.v/{k}"] for k in params}, **header["adam"])
    registry = TemplateRegistry(tuple(header["class_names"]),
                                tuple(tuple(t) for t in header["templates"]))
    return Checkpoint(params, config, registry, header["step"], adam)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, checkpoint: Checkpoint):
        super().__init__(msg)
        self.checkpoint = checkpoint


class BatchEncoder:
    """Turns sampled batches into token ids and target matrices."""

    def __init__(self, builder: PromptBuilder, image_text: Dataset | None):
        self.builder = builder
        self.caption_ids = None
        if image_text is not None:
            self.caption_ids = tokenize_many(image_text.texts, builder.vocab, builder.max_length)

    def __call__(self, batch: Batch, rng: np.random.Generator) -> BatchInputs:
        if batch.source is Source.IMAGE_TEXT:
            texts = TextBatch.captions(self.caption_ids[batch.indices])
            y = pair_targets(len(batch))
        else:
            tails = [self.builder.label_tail(l, rng) for l in batch.labels]
            texts = TextBatch.prompts(self.builder.pad(tails), self.builder.context_length)
            y = label_targets(batch.labels)
        return BatchInputs(batch.images, texts, y)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: np.ndarray
    sources: list[str]
    metrics: list[dict] = field(default_factory=list)


METRIC_COLUMNS = ("step", "lr", "loss", "source")


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["step"], repr(float(r["lr"])), repr(float(r["loss"])), r["source"]])


def train(config: TrainConfig, image_text: Dataset | None, image_label: Dataset | None,
          registry: TemplateRegistry | None = None, metrics_path=None,
          checkpoint_path=None) -> TrainResult:
    """Run the full optimization loop; deterministic for a fixed ``config.seed``.

    Raises TrainingDiverged (carrying the last finite parameters) when the
    loss or a gradient stops being finite.
    """
    registry = registry or builtin_registry(config.num_classes)
    if registry.num_classes != config.num_classes:
        raise ValueError(f"registry has {registry.num_classes} classes, config {config.num_classes}")
    for ds in (image_text, image_label):
        if ds is not None and ds.image_dim != config.image_dim:
            raise ValueError(f"dataset image_dim {ds.image_dim} != config {config.image_dim}")
    if image_label is not None and image_label.num_classes != config.num_classes:
        raise ValueError("label width differs from num_classes")

    init_rng, sample_rng, prompt_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3))
    params = init_parameters(config.dims, init_rng)
    model = DualEncoder(params)
    adam = AdamState.zeros_like(params)
    builder = PromptBuilder(registry, Vocabulary(config.vocab_size, config.vocab_seed),
                            config.context_length, config.max_length)
    encode = BatchEncoder(builder, image_text)
    sampler = BatchSampler(image_text, image_label, config.batch_size, config.policy, sample_rng)

    losses = np.empty(config.steps)
    sources, rows = [], []
    for step in range(1, config.steps + 1):
        lr = lr_at(step, config)
        batch = sampler.next_batch()
        inputs = encode(batch, prompt_rng)
        params.zero_grad()
        value, cache = forward_loss(model, inputs, config.loss, config.symmetric_loss,
                                    config.temperature)
        ckpt = Checkpoint(params, config, registry, step - 1, adam)
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss is {value} at step {step}", ckpt)
        loss_gradient(model, cache)
        try:
            adam_step(params.params, params.grads, adam, step, lr)
        except NonFiniteGradient as e:
            raise TrainingDiverged(f"step {step}: {e}", ckpt) from None
        params.bump()
        losses[step - 1] = value
        sources.append(batch.source.value)
        if step % config.log_every == 0 or step == config.steps:
            rows.append({"step": step, "lr": lr, "loss": value, "source": batch.source.value})
            log.debug("step %d lr %.3g loss %.6f (%s)", step, lr, value, batch.source.value)

    ckpt = Checkpoint(params, config, registry, config.steps, adam)
    if metrics_path is not None:
        write_metrics(rows, metrics_path)
    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
    return TrainResult(ckpt, losses, sources, rows)


def with_overrides(config: TrainConfig, **delta) -> TrainConfig:
    unknown = set(delta) - set(TrainConfig.field_types())
    if unknown:
        raise KeyError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return replace(config, **delta)
