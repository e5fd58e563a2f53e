"""Soft-target contrastive objective over a globally normalized similarity matrix.

For a batch of N image embeddings ``v`` and N text embeddings ``t``::

    raw[i, j]  = v_i . t_j
    s          = raw / ||raw||_F
    loss       = -(1/N) * sum_{ij, y_ij > 0} y_ij * log(clip(s_ij, eps, 1))

There is no softmax: unpaired entries with zero target only matter through
the Frobenius norm, which rewards shrinking them. Targets come from cosine
similarity of multi-hot labels (image-label batches) or the identity
(image-text batches).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .encoders import BANK, TOKEN_TABLE, DualEncoder, EncoderDims, ImageCache, TextBatch, \
    TextCache, init_parameters

CLAMP_EPS = 1e-8
UNIT_TOL = 1e-4


class DegenerateBatchError(FloatingPointError):
    """Similarity matrix is all zeros; embeddings have collapsed."""


def label_targets(labels, prompt_labels=None) -> np.ndarray:
    """Cosine similarity between multi-hot label rows."""
    a = np.asarray(labels)
    b = a if prompt_labels is None else np.asarray(prompt_labels)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"label shapes {a.shape} and {b.shape} are incompatible")
    a = a.astype(np.int64)
    b = b.astype(np.int64)
    na = (a * a).sum(axis=1)
    nb = (b * b).sum(axis=1)
    if not (na.all() and nb.all()):
        raise ValueError("all-zero label vector")
    # integer products are exact, so identical labels give exactly 1
    return (a @ b.T) / np.sqrt(np.outer(na, nb).astype(np.float64))


def pair_targets(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be at least 1")
    return np.eye(n)


def raw_similarity(image_embs, text_embs) -> np.ndarray:
    v = np.asarray(image_embs, dtype=np.float64)
    t = np.asarray(text_embs, dtype=np.float64)
    if v.shape != t.shape:
        raise ValueError(f"embedding batches differ in shape: {v.shape} vs {t.shape}")
    for name, e in (("image", v), ("text", t)):
        if np.any(np.abs(np.linalg.norm(e, axis=1) - 1.0) > UNIT_TOL):
            raise ValueError(f"{name} embeddings are not unit norm")
    return v @ t.T


def normalize_similarity(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    fro = np.sqrt((raw * raw).sum())
    if fro == 0.0:
        raise DegenerateBatchError("similarity matrix is all zeros")
    return raw / fro


def umcl_loss(y, s_norm, eps: float = CLAMP_EPS) -> float:
    y = np.asarray(y, dtype=np.float64)
    s = np.asarray(s_norm, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 2:
        raise ValueError(f"target shape {y.shape} != similarity shape {s.shape}")
    if np.isnan(y).any() or np.isnan(s).any():
        raise ValueError("NaN in loss inputs")
    pos = y != 0
    return float(-(y[pos] * np.log(np.clip(s[pos], eps, 1.0))).sum() / y.shape[0])


def umcl_loss_grad(y, s_norm, eps: float = CLAMP_EPS) -> np.ndarray:
    """d loss / d s_norm. Clamped entries get zero gradient."""
    active = (y != 0) & (s_norm > eps)
    g = np.zeros_like(s_norm)
    g[active] = -y[active] / s_norm[active] / y.shape[0]
    return g


def normalize_similarity_backward(d_s, s_norm, fro) -> np.ndarray:
    """Pull a gradient on ``raw / ||raw||_F`` back to ``raw``."""
    return (d_s - (d_s * s_norm).sum() * s_norm) / fro


def umcl_objective(v, t, y, symmetric: bool = False, eps: float = CLAMP_EPS):
    """Loss and gradients with respect to the unit image and text embeddings.

    ``symmetric`` adds the transposed term, i.e. the same loss with text as
    the query side.
    """
    raw = v @ t.T
    fro = np.sqrt((raw * raw).sum())
    if fro == 0.0:
        raise DegenerateBatchError("similarity matrix is all zeros")
    s = raw / fro
    y_eff = y + y.T if symmetric else y
    loss = umcl_loss(y_eff, s, eps)
    d_raw = normalize_similarity_backward(umcl_loss_grad(y_eff, s, eps), s, fro)
    return loss, d_raw @ t, d_raw.T @ v


def _log_softmax_rows(x):
    x = x - x.max(axis=1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


def hard_infonce_objective(v, t, temperature: float = 0.07, symmetric: bool = False):
    """Identity-target softmax cross-entropy over ``v t^T / temperature``.

    Every off-diagonal pair is a negative, including pairs that share a label.
    """
    n = len(v)
    logits = (v @ t.T) / temperature
    idx = np.arange(n)
    lp = _log_softmax_rows(logits)
    loss = -lp[idx, idx].mean()
    d_logits = np.exp(lp)
    d_logits[idx, idx] -= 1.0
    d_logits /= n
    if symmetric:
        lpt = _log_softmax_rows(logits.T)
        d_t = np.exp(lpt)
        d_t[idx, idx] -= 1.0
        d_logits = 0.5 * (d_logits + d_t.T / n)
        loss = 0.5 * (loss - lpt[idx, idx].mean())
    d_raw = d_logits / temperature
    return float(loss), d_raw @ t, d_raw.T @ v


@dataclass
class BatchInputs:
    """Everything one optimization step needs, already tokenized."""

    images: np.ndarray
    texts: TextBatch
    targets: np.ndarray


@dataclass
class ForwardCache:
    image: ImageCache
    text: TextCache
    d_image: np.ndarray
    d_text: np.ndarray


def forward_loss(model: DualEncoder, inputs: BatchInputs, loss: str = "umcl",
                 symmetric: bool = False, temperature: float = 0.07):
    """Run both towers and the objective; returns (loss, cache for backward).

    Non-finite embeddings give a NaN loss and no cache.
    """
    v, ic = model.encode_images(inputs.images)
    t, tc = model.encode_texts(inputs.texts)
    if not (np.isfinite(v).all() and np.isfinite(t).all()):
        return float("nan"), None
    if loss == "umcl":
        value, dv, dt = umcl_objective(v, t, inputs.targets, symmetric)
    elif loss == "hard_infonce":
        value, dv, dt = hard_infonce_objective(v, t, temperature, symmetric)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return value, ForwardCache(ic, tc, dv, dt)


def loss_gradient(model: DualEncoder, cache: ForwardCache | None, scale: float = 1.0) -> None:
    """Accumulate parameter gradients for a completed forward pass."""
    if cache is None:
        raise RuntimeError("loss_gradient needs the forward cache of the current batch")
    model.backward_images(cache.image, scale * cache.d_image)
    model.backward_texts(cache.text, scale * cache.d_text)


def loss_and_grad(model: DualEncoder, inputs: BatchInputs, **kw) -> float:
    model.params.zero_grad()
    value, cache = forward_loss(model, inputs, **kw)
    loss_gradient(model, cache)
    return value


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

GRADCHECK_TOL = 1e-4
GRADCHECK_STEP = 1e-5


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


@dataclass
class TensorCheck:
    suite: str
    tensor: str
    max_rel_err: float
    n_checked: int
    tol: float = GRADCHECK_TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


@dataclass
class GradcheckReport:
    rows: list[TensorCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def failures(self):
        return [r for r in self.rows if not r.passed]

    def table(self) -> str:
        head = f"{'suite':<28} {'tensor':<22} {'max rel err':>12} {'n':>4}  status"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.suite:<28} {r.tensor:<22} {r.max_rel_err:>12.3e} {r.n_checked:>4}  "
                f"{'pass' if r.passed else 'FAIL'}"
            )
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({
            "passed": bool(self.passed),
            "rows": [
                {"suite": r.suite, "tensor": r.tensor, "max_rel_err": float(r.max_rel_err),
                 "n_checked": r.n_checked, "passed": bool(r.passed)}
                for r in self.rows
            ],
        }, indent=2)


def check_gradients(suite, params, loss_fn, grad_fn, rng, n_per_tensor=20,
                    step=GRADCHECK_STEP, tensors=None, candidates=None) -> list[TensorCheck]:
    """Compare ``grad_fn()`` with central differences of ``loss_fn()``.

    ``grad_fn`` must fill ``params.grads``. ``candidates`` optionally maps a
    tensor name to the flat indices worth probing (e.g. token rows in use).
    """
    grad_fn()
    analytic = {k: g.copy() for k, g in params.grads.items()}
    rows = []
    for name in (tensors or params.names()):
        p = params[name]
        flat = p.reshape(-1)
        pool = np.arange(flat.size) if candidates is None or name not in candidates \
            else np.asarray(candidates[name])
        if pool.size == 0:
            continue
        picks = rng.choice(pool, size=min(n_per_tensor, pool.size), replace=False)
        worst = 0.0
        for idx in picks:
            old = flat[idx]
            flat[idx] = old + step
            up = loss_fn()
            flat[idx] = old - step
            down = loss_fn()
            flat[idx] = old
            numeric = (up - down) / (2 * step)
            worst = max(worst, relative_error(analytic[name].reshape(-1)[idx], numeric))
        rows.append(TensorCheck(suite, name, worst, len(picks)))
    return rows


@dataclass(frozen=True)
class GradcheckSizes:
    batch: int = 4
    embed_dim: int = 8
    token_dim: int = 6
    hidden_dim: int = 10
    image_dim: int = 5
    vocab_size: int = 97
    context_length: int = 3
    num_classes: int = 4


def _check_instance(seed, sizes: GradcheckSizes, source, step):
    """Random model and batch whose active log terms stay clear of the clamp."""
    from .prompt import PromptBuilder, Vocabulary, builtin_registry, tokenize_many

    dims = EncoderDims(sizes.vocab_size, sizes.token_dim, sizes.hidden_dim,
                       sizes.embed_dim, sizes.image_dim, sizes.context_length)
    for attempt in range(1000):
        rng = np.random.default_rng([seed, attempt])
        params = init_parameters(dims, rng)
        # larger embeddings than the training init so text gradients are not tiny
        params[TOKEN_TABLE][...] = rng.normal(0, 0.5, params[TOKEN_TABLE].shape)
        params[BANK][...] = rng.normal(0, 0.5, params[BANK].shape)
        for k in ("text.b1", "text.b2", "image.b1", "image.b2"):
            params[k][...] = rng.normal(0, 0.3, params[k].shape)
        model = DualEncoder(params)
        images = rng.normal(size=(sizes.batch, sizes.image_dim))
        vocab = Vocabulary(sizes.vocab_size, seed=seed)
        builder = PromptBuilder(builtin_registry(sizes.num_classes), vocab, sizes.context_length)
        if source == "ImageLabel":
            labels = (rng.random((sizes.batch, sizes.num_classes)) < 0.4).astype(np.int8)
            labels[np.arange(sizes.batch), rng.integers(sizes.num_classes, size=sizes.batch)] = 1
            texts = TextBatch.prompts(
                builder.pad([builder.label_tail(l, rng) for l in labels]), sizes.context_length)
            y = label_targets(labels)
        else:
            caps = [" ".join(rng.choice(["mild", "edema", "left", "base", "effusion", "lung",
                                         "opacity", "clear"], size=5)) for _ in range(sizes.batch)]
            texts = TextBatch.captions(tokenize_many(caps, vocab))
            y = pair_targets(sizes.batch)
        inputs = BatchInputs(images, texts, y)
        v, _ = model.encode_images(images)
        t, _ = model.encode_texts(texts)
        s = normalize_similarity(v @ t.T)
        # every positive-target entry must be comfortably active
        if np.all(s[y != 0] > 1e-3):
            return model, inputs
    raise RuntimeError("could not draw a clamp-free gradcheck instance")


def gradcheck(seed: int = 0, sizes: GradcheckSizes = GradcheckSizes(),
              n_per_tensor: int = 20, step: float = GRADCHECK_STEP,
              grad_hook=None) -> GradcheckReport:
    """Finite-difference check of every trainable tensor.

    Suites: ``encoders`` (a fixed random linear functional of both towers'
    embeddings), ``objective`` (full loss, both sources, including the
    symmetric variant and the baseline), and ``prompt_bank`` (bank path on
    image-label batches). ``grad_hook(params)`` may edit analytic gradients
    before comparison; used to test that the harness catches errors.
    """
    report = GradcheckReport()
    rng = np.random.default_rng(seed)

    def token_rows(params, inputs):
        ids = np.unique(inputs.texts.ids[inputs.texts.ids != 0])
        width = params[TOKEN_TABLE].shape[1]
        return (ids[:, None] * width + np.arange(width)).reshape(-1)

    def run(suite, model, inputs, loss_fn, grad_fn, tensors=None):
        def g():
            grad_fn()
            if grad_hook is not None:
                grad_hook(model.params)
        cands = {TOKEN_TABLE: token_rows(model.params, inputs)}
        report.rows.extend(check_gradients(suite, model.params, loss_fn, g, rng,
                                           n_per_tensor, step, tensors, cands))

    # encoders alone, under a random linear readout of the embeddings
    model, inputs = _check_instance(seed, sizes, "ImageLabel", step)
    wv = rng.normal(size=(sizes.batch, sizes.embed_dim))
    wt = rng.normal(size=(sizes.batch, sizes.embed_dim))

    def enc_loss():
        return float((model.encode_images(inputs.images)[0] * wv).sum()
                      + (model.encode_texts(inputs.texts)[0] * wt).sum())

    def enc_grad():
        model.params.zero_grad()
        _, ic = model.encode_images(inputs.images)
        _, tc = model.encode_texts(inputs.texts)
        model.backward_images(ic, wv)
        model.backward_texts(tc, wt)

    run("encoders", model, inputs, enc_loss, enc_grad)

    variants = [
        ("ImageLabel", "umcl", False),
        ("ImageText", "umcl", False),
        ("ImageLabel", "umcl", True),
        ("ImageText", "hard_infonce", False),
        ("ImageLabel", "hard_infonce", True),
    ]
    for source, kind, sym in variants:
        model, inputs = _check_instance(seed, sizes, source, step)
        kw = dict(loss=kind, symmetric=sym)
        suite = f"{kind}/{source}" + ("/sym" if sym else "")
        run(suite, model, inputs,
            lambda: forward_loss(model, inputs, **kw)[0],
            lambda: loss_and_grad(model, inputs, **kw))

    model, inputs = _check_instance(seed + 1, sizes, "ImageLabel", step)
    if BANK in model.params and model.params[BANK].size:
        run("prompt_bank", model, inputs,
            lambda: forward_loss(model, inputs)[0],
            lambda: loss_and_grad(model, inputs),
            tensors=[BANK])
    return report
