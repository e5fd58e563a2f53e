import numpy as np
import pytest

from umcl.data import SynthConfig, generate_synthetic
from umcl.prompt import builtin_registry
from umcl.training import TrainConfig, train

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        ok = rep.outcome == "passed"
        detail = getattr(item, "criterion_detail", "")
        _criteria[n] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok, detail = _criteria[n]
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


TINY_SYNTH = SynthConfig(num_classes=4, samples_per_class=24, eval_per_class=10, image_dim=8)


def tiny_train_config(**kw) -> TrainConfig:
    base = dict(steps=60, lr=1e-3, batch_size=8, context_length=4, num_classes=4,
                image_dim=8, embed_dim=16, token_dim=8, hidden_dim=16, vocab_size=257,
                log_every=10)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic(TINY_SYNTH, seed=0)


@pytest.fixture(scope="session")
def tiny_run(tiny_corpus):
    cfg = tiny_train_config()
    return train(cfg, tiny_corpus.image_text, tiny_corpus.image_label, builtin_registry(4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
