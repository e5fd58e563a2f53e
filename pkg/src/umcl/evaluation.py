"""Zero-shot classification, linear probing, retrieval Precision@K and embedding export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .data import EvalSet
from .encoders import TextBatch
from .prompt import tokenize_many
from .training import AdamState, Checkpoint, adam_step

DEFAULT_K = (1, 2, 5, 10)


class DegenerateEnsembleError(FloatingPointError):
    pass


def encode_images(checkpoint: Checkpoint, images) -> np.ndarray:
    return checkpoint.model().encode_images(images)[0]


def encode_captions(checkpoint: Checkpoint, texts) -> np.ndarray:
    ids = tokenize_many(list(texts), checkpoint.vocab, checkpoint.config.max_length)
    return checkpoint.model().encode_texts(TextBatch.captions(ids))[0]


def class_prompt_embeddings(checkpoint: Checkpoint, class_id: int) -> np.ndarray:
    """Unit embeddings of every template prompt for one class, shape (T, E)."""
    builder = checkpoint.prompt_builder()
    tails = [builder.class_tail(class_id, t) for t in range(builder.n_templates(class_id))]
    texts = TextBatch.prompts(builder.pad(tails), builder.context_length)
    return checkpoint.model().encode_texts(texts)[0]


def class_anchors(checkpoint: Checkpoint, template_index: int = 0) -> np.ndarray:
    """Single-prompt anchor per class, shape (K, E).

    Encoded through the same per-class batches as the ensemble so that a
    one-template registry gives bit-identical anchors on both paths.
    """
    return np.stack([class_prompt_embeddings(checkpoint, k)[template_index]
                     for k in range(checkpoint.registry.num_classes)])


def mean_direction(embs: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    mean = embs.mean(axis=0)
    norm = np.sqrt(mean @ mean)
    if norm < tol:
        raise DegenerateEnsembleError("prompt embeddings cancel out; ensemble mean is ~0")
    return mean / norm


def build_ensemble_anchor(class_id: int, checkpoint: Checkpoint) -> np.ndarray:
    """Mean of the class's template embeddings, renormalized."""
    embs = class_prompt_embeddings(checkpoint, class_id)
    if len(embs) == 1:
        return embs[0]
    return mean_direction(embs)


def ensemble_anchors(checkpoint: Checkpoint) -> np.ndarray:
    return np.stack([build_ensemble_anchor(k, checkpoint)
                     for k in range(checkpoint.registry.num_classes)])


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; np.argmax already returns the first maximal index."""
    return np.argmax(scores, axis=-1)


def zero_shot_predict(image_embs, anchors) -> np.ndarray:
    anchors = np.asarray(anchors)
    if anchors.size == 0:
        raise ValueError("empty anchor set")
    return argmax_lowest(np.atleast_2d(image_embs) @ anchors.T)


def zero_shot_classify(image, anchors, checkpoint: Checkpoint):
    """Class id (or ids, for a 2-D input) with the highest cosine to its anchor."""
    image = np.asarray(image, dtype=np.float64)
    preds = zero_shot_predict(encode_images(checkpoint, image), anchors)
    return int(preds[0]) if image.ndim == 1 else preds


def zero_shot_accuracy(checkpoint: Checkpoint, eval_set: EvalSet, ensemble: bool = False) -> float:
    anchors = ensemble_anchors(checkpoint) if ensemble else class_anchors(checkpoint)
    preds = zero_shot_classify(eval_set.images, anchors, checkpoint)
    return float((preds == eval_set.classes).mean())


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0


@dataclass
class ProbeResult:
    weights: np.ndarray
    bias: np.ndarray
    train_accuracy: float
    test_accuracy: float


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_probe(train_x, train_y, num_classes: int, config: ProbeConfig = ProbeConfig()):
    """Softmax regression trained with Adam on fixed features."""
    train_y = np.asarray(train_y)
    if len(np.unique(train_y)) < 2:
        raise ValueError("linear probe needs at least two classes in the training split")
    rng = np.random.default_rng(config.seed)
    n, dim = train_x.shape
    params = {"W": np.zeros((num_classes, dim)), "b": np.zeros(num_classes)}
    state = AdamState({k: np.zeros_like(v) for k, v in params.items()},
                      {k: np.zeros_like(v) for k, v in params.items()})
    onehot = np.eye(num_classes)[train_y]
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start: start + config.batch_size]
            x = train_x[idx]
            d = (_softmax(x @ params["W"].T + params["b"]) - onehot[idx]) / len(idx)
            step += 1
            adam_step(params, {"W": d.T @ x, "b": d.sum(axis=0)}, state, step, config.lr)
    return params["W"], params["b"]


def linear_probe(train: EvalSet, test: EvalSet, checkpoint: Checkpoint,
                 config: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Fit an affine classifier on frozen image embeddings; report test accuracy."""
    xtr = encode_images(checkpoint, train.images)
    xte = encode_images(checkpoint, test.images)
    W, b = fit_probe(xtr, train.classes, checkpoint.registry.num_classes, config)
    acc = lambda x, y: float((argmax_lowest(x @ W.T + b) == y).mean())
    return ProbeResult(W, b, acc(xtr, train.classes), acc(xte, test.classes))


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

def retrieval_precision(query_embs, query_classes, cand_embs, cand_classes,
                        k_list=DEFAULT_K) -> dict[int, float]:
    """Mean fraction of same-class candidates among each query's top K.

    Ranking is by descending cosine; equal scores keep candidate order.
    """
    query_classes = np.asarray(query_classes)
    cand_classes = np.asarray(cand_classes)
    k_list = [int(k) for k in k_list]
    if max(k_list) > len(cand_classes):
        raise ValueError(f"k={max(k_list)} exceeds {len(cand_classes)} candidates")
    scores = np.asarray(query_embs) @ np.asarray(cand_embs).T
    order = np.argsort(-scores, axis=1, kind="stable")
    hits = cand_classes[order[:, : max(k_list)]] == query_classes[:, None]
    return {k: float(hits[:, :k].mean()) for k in k_list}


def precision_at_k(query_images, query_classes, candidate_texts, candidate_classes,
                   checkpoint: Checkpoint, k_list=DEFAULT_K) -> dict[int, float]:
    """Image-to-text retrieval over captions, scored by class agreement."""
    if max(k_list) > len(candidate_texts):
        raise ValueError(f"k={max(k_list)} exceeds {len(candidate_texts)} candidates")
    return retrieval_precision(encode_images(checkpoint, query_images), query_classes,
                               encode_captions(checkpoint, candidate_texts), candidate_classes,
                               k_list)


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------

def pca_project(x, n_components: int = 2):
    """Principal-component scores via covariance eigendecomposition.

    Components are ordered by decreasing eigenvalue; each is signed so that
    its largest-magnitude loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("PCA needs at least two samples")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1][:n_components]
    comps = vecs[:, order]
    pivot = np.argmax(np.abs(comps), axis=0)
    comps = comps * np.sign(comps[pivot, np.arange(comps.shape[1])])
    return centered @ comps, comps, vals[order]


def export_embeddings(images, classes, checkpoint: Checkpoint, out_path):
    """Write ``class, pc1, pc2, e0..e{E-1}`` rows; returns (embeddings, projection)."""
    embs = encode_images(checkpoint, images)
    proj, _, _ = pca_project(embs, 2)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "pc1", "pc2"] + [f"e{i}" for i in range(embs.shape[1])])
        for c, p, e in zip(classes, proj, embs):
            w.writerow([int(c), repr(float(p[0])), repr(float(p[1]))] + [repr(float(v)) for v in e])
    return embs, proj


# ---------------------------------------------------------------------------
# combined report
# ---------------------------------------------------------------------------

TASKS = ("zero_shot", "probe", "retrieval")


def evaluate(checkpoint: Checkpoint, eval_set: EvalSet, tasks=("zero_shot",),
             ensemble: bool = True, probe: ProbeConfig = ProbeConfig(),
             k_list=DEFAULT_K, probe_test_fraction: float = 0.5) -> dict:
    """Run the requested protocols on one labeled evaluation set.

    Checks task requirements before computing anything.
    """
    unknown = set(tasks) - set(TASKS)
    if unknown:
        raise ValueError(f"unknown tasks: {', '.join(sorted(unknown))}")
    if "retrieval" in tasks:
        if eval_set.texts is None:
            raise ValueError("retrieval needs eval records with text")
        if max(k_list) > len(eval_set):
            raise ValueError(f"retrieval with k={max(k_list)} needs more than {len(eval_set)} texts")
    if "probe" in tasks and len(np.unique(eval_set.classes)) < 2:
        raise ValueError("probe needs at least two classes")
    out = {}
    if "zero_shot" in tasks:
        out["zero_shot_acc"] = zero_shot_accuracy(checkpoint, eval_set)
        if ensemble:
            out["zero_shot_acc_ens"] = zero_shot_accuracy(checkpoint, eval_set, ensemble=True)
    if "probe" in tasks:
        train, test = eval_set.split(probe_test_fraction, probe.seed)
        out["probe_acc"] = linear_probe(train, test, checkpoint, probe).test_accuracy
    if "retrieval" in tasks:
        p = precision_at_k(eval_set.images, eval_set.classes, eval_set.texts,
                           eval_set.classes, checkpoint, k_list)
        out["p_at_k"] = {str(k): v for k, v in p.items()}
    return out


def format_metrics(metrics: dict) -> str:
    lines = []
    for key in ("zero_shot_acc", "zero_shot_acc_ens", "probe_acc"):
        if key in metrics:
            lines.append(f"{key:<20} {metrics[key]:.4f}")
    for k, v in metrics.get("p_at_k", {}).items():
        lines.append(f"{'P@' + k:<20} {v:.4f}")
    return "\n".join(lines)


def write_metrics_json(metrics: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
