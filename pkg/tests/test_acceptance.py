"""End-to-end acceptance checks, one test per criterion.

Run ``pytest tests/test_acceptance.py`` to get a PASS/FAIL line per
criterion in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from umcl.ablation import (
    default_grid_path,
    false_negative_study,
    format_false_negative,
    load_grid,
    run_grid,
)
from umcl.data import SynthConfig, generate_synthetic
from umcl.evaluation import evaluate, retrieval_precision
from umcl.objective import (
    GRADCHECK_STEP,
    gradcheck,
    label_targets,
    normalize_similarity,
    pair_targets,
    umcl_loss,
    umcl_objective,
)
from umcl.training import TrainConfig, load_checkpoint, train

criterion = pytest.mark.criterion


def note(request, text):
    request.node.criterion_detail = text


def unit(z):
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


@criterion(1, "gradient check over every tensor, both sources")
def test_gradient_correctness(request):
    t0 = time.perf_counter()
    report = gradcheck(seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_err for r in report.rows)
    note(request, f"max rel err {worst:.2e}, {elapsed:.1f}s")
    print(report.table())
    assert GRADCHECK_STEP == 1e-5
    assert report.passed and worst < 1e-4
    suites = {r.suite for r in report.rows}
    assert {"umcl/ImageText", "umcl/ImageLabel", "prompt_bank"} <= suites
    assert any(r.tensor == "prompt.bank" and r.n_checked > 0 for r in report.rows)
    assert elapsed < 30


@criterion(2, "label targets equal a direct cosine oracle bit for bit")
def test_label_target_oracle(request):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(1, 20))
        a = (rng.random(k) < rng.random()).astype(int)
        b = (rng.random(k) < rng.random()).astype(int)
        a[rng.integers(k)] = 1
        b[rng.integers(k)] = 1
        dot = sum(int(x) * int(y) for x, y in zip(a, b))
        oracle = dot / math.sqrt(int(a.sum()) * int(b.sum()))
        mismatches += label_targets([a], [b])[0, 0] != oracle
    note(request, f"{mismatches} mismatches in 1000 pairs")
    assert mismatches == 0


@criterion(3, "global normalization gives unit Frobenius norm")
def test_frobenius_normalization(request):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 33))
        a = rng.normal(size=(n, n)) * 10.0 ** rng.uniform(-3, 3)
        worst = max(worst, abs(np.linalg.norm(normalize_similarity(a)) - 1.0))
    note(request, f"max |norm - 1| = {worst:.1e}")
    assert worst <= 1e-6
    np.testing.assert_allclose(normalize_similarity([[3.0, 4.0], [0.0, 0.0]]),
                               [[0.6, 0.8], [0.0, 0.0]], atol=1e-15)


@criterion(4, "hand value ln2/2 at N=2")
def test_hand_value(request):
    loss = umcl_loss(pair_targets(2), normalize_similarity(np.eye(2)))
    note(request, f"loss {loss:.12f}")
    assert abs(loss - math.log(2) / 2) <= 1e-10


@criterion(5, "permutation and scale invariance, non-negativity")
def test_loss_symmetry_and_purity(request):
    rng = np.random.default_rng(5)
    perm_drift = scale_drift = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 12))
        labels = (rng.random((n, 6)) < 0.4).astype(int)
        labels[np.arange(n), rng.integers(6, size=n)] = 1
        y = label_targets(labels)
        zv, zt = rng.normal(size=(n, 8)), rng.normal(size=(n, 8))
        p = rng.permutation(n)
        base = umcl_objective(unit(zv), unit(zt), y)[0]
        perm = umcl_objective(unit(zv[p]), unit(zt[p]), y[np.ix_(p, p)])[0]
        c = 10.0 ** rng.uniform(-3, 3)
        scaled = umcl_objective(unit(c * zv), unit(c * zt), y)[0]
        perm_drift = max(perm_drift, abs(base - perm))
        scale_drift = max(scale_drift, abs(base - scaled))
    negatives = 0
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        labels = (rng.random((n, 5)) < 0.5).astype(int)
        labels[np.arange(n), rng.integers(5, size=n)] = 1
        v, t = unit(rng.normal(size=(n, 4))), unit(rng.normal(size=(n, 4)))
        negatives += umcl_objective(v, t, label_targets(labels))[0] < 0
    note(request, f"perm drift {perm_drift:.1e}, scale drift {scale_drift:.1e}, "
                  f"{negatives} negative losses")
    assert perm_drift <= 1e-12 and scale_drift <= 1e-12 and negatives == 0


@criterion(6, "synthetic zero-shot >= 0.90, ensemble within 0.02")
def test_end_to_end_zero_shot(request):
    t0 = time.perf_counter()
    corpus = generate_synthetic(SynthConfig(num_classes=4, p_overlap=0.0), seed=0)
    cfg = TrainConfig(steps=5000, lr=1e-3, num_classes=4, image_dim=64, seed=0)
    ckpt = train(cfg, corpus.image_text, corpus.image_label).checkpoint
    m = evaluate(ckpt, corpus.held_out, ("zero_shot",), ensemble=True)
    elapsed = time.perf_counter() - t0
    note(request, f"acc {m['zero_shot_acc']:.3f}, ens {m['zero_shot_acc_ens']:.3f}, "
                  f"{elapsed:.0f}s")
    assert m["zero_shot_acc"] >= 0.90
    assert m["zero_shot_acc_ens"] >= m["zero_shot_acc"] - 0.02
    assert elapsed < 300


@pytest.fixture(scope="module")
def false_negative_rows():
    t0 = time.perf_counter()
    rows = false_negative_study([0.0, 0.5], load_grid(default_grid_path()).base)
    return rows, time.perf_counter() - t0


@criterion(7, "soft targets >= hard baseline at p_overlap 0.5 (3-seed median)")
def test_false_negative_direction(request, false_negative_rows):
    rows, elapsed = false_negative_rows
    print(format_false_negative(rows))
    row = next(r for r in rows if r.p_overlap == 0.5)
    note(request, f"UMCL {row.umcl_acc:.3f} vs hard {row.baseline_acc:.3f}, {elapsed:.0f}s")
    assert row.umcl_acc >= row.baseline_acc
    assert elapsed < 1200


def test_false_negative_separable_precondition(false_negative_rows):
    rows, _ = false_negative_rows
    row = next(r for r in rows if r.p_overlap == 0.0)
    assert row.umcl_acc >= 0.9 and row.baseline_acc >= 0.9


@criterion(8, "shipped ablation grid: five cells, w/o label-data below full model")
def test_ablation_structure(request, tmp_path):
    grid = load_grid(default_grid_path())
    res = run_grid(grid, tmp_path / "grid")
    print(res.format())
    full = res.value("context-32")
    without = res.value("w/o label-data")
    note(request, f"context-32 {full:.3f} vs w/o label-data {without:.3f}")
    assert [r["cell"] for r in res.table] == [
        "context-16", "context-32", "context-64", "w/o context", "w/o label-data"]
    assert all(r["n_ok"] == len(grid.seeds) and not r["errors"] for r in res.table)
    assert len((tmp_path / "grid" / "results.txt").read_text().strip().splitlines()) == 7
    assert grid.base.synth.p_overlap > 0
    assert without < full


@criterion(9, "Precision@K oracle: chance level and perfect anchors")
def test_retrieval_oracle(request):
    rng = np.random.default_rng(9)
    queries = unit(rng.normal(size=(1000, 32)))
    q_cls = np.repeat(np.arange(5), 200)
    cands = unit(rng.normal(size=(500, 32)))
    c_cls = np.repeat(np.arange(5), 100)
    p = retrieval_precision(queries, q_cls, cands, c_cls, (1, 2, 5, 10))
    anchors = unit(rng.normal(size=(5, 32)))
    perfect = retrieval_precision(anchors[q_cls], q_cls, np.repeat(anchors, 10, axis=0),
                                  np.repeat(np.arange(5), 10), (1,))
    note(request, ", ".join(f"P@{k}={v:.3f}" for k, v in p.items()) + f", anchors P@1={perfect[1]}")
    assert all(0.17 <= v <= 0.23 for v in p.values())
    assert perfect[1] == 1.0


@criterion(10, "byte-identical metrics logs, bit-identical reload")
def test_determinism_and_persistence(request, tmp_path):
    corpus = generate_synthetic(SynthConfig(num_classes=4, p_overlap=0.3), seed=1)
    cfg = TrainConfig(steps=300, lr=1e-3, num_classes=4, image_dim=64, seed=7, log_every=10)
    results = []
    for i in range(2):
        results.append(train(cfg, corpus.image_text, corpus.image_label,
                             metrics_path=tmp_path / f"metrics{i}.csv",
                             checkpoint_path=tmp_path / f"ckpt{i}.ckpt"))
    same_log = (tmp_path / "metrics0.csv").read_bytes() == (tmp_path / "metrics1.csv").read_bytes()
    tasks = ("zero_shot", "probe", "retrieval")
    in_memory = evaluate(results[0].checkpoint, corpus.held_out, tasks)
    reloaded = evaluate(load_checkpoint(tmp_path / "ckpt0.ckpt", expect=cfg), corpus.held_out, tasks)
    note(request, f"logs identical: {same_log}; reload identical: {in_memory == reloaded}")
    assert same_log
    assert in_memory == reloaded
