import numpy as np
import pytest

from ssvae.data import (
    SynthSpec,
    build_vocab,
    disjoint_dominant_probs,
    encode_corpus,
    synth_generate,
)
from ssvae.training import PreparedData


def make_prepared(classes=3, vocab=30, purity=1.0, n_train=60, n_dev=30, n_unl=120, n_test=90,
                  mean_length=6.0, seed=0, noise_unlabeled=False) -> PreparedData:
    """Small synthetic train/dev/test/unlabeled sets, encoded and ready to train on."""
    spec = SynthSpec(disjoint_dominant_probs(classes, vocab, purity), mean_length=mean_length, std_length=1.5,
                     max_length=20, n_labeled=n_train + n_dev, n_unlabeled=n_unl, n_test=n_test)
    lab, unl, test = synth_generate(spec, seed)
    if noise_unlabeled:
        rng = np.random.default_rng(seed + 99)
        unl.rows = [[f"w{i}" for i in rng.integers(0, vocab, size=len(r))] for r in unl.rows]
    train, dev = lab.subset(range(n_train), "train"), lab.subset(range(n_train, n_train + n_dev), "dev")
    vocab_ = build_vocab([train, dev, unl])
    enc = lambda c: encode_corpus(c, vocab_)  # noqa: E731
    return PreparedData(vocab_, lab.classes, enc(train), enc(dev), enc(test), enc(unl), dataset="synth")


@pytest.fixture
def prepared():
    return make_prepared


_CRITERIA: dict[str, str] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    key = lambda n: int(n.split("_")[2])  # noqa: E731
    for name in sorted(_CRITERIA, key=key):
        num, title = name.split("_", 3)[2:]
        terminalreporter.write_line(f"{_CRITERIA[name]}  criterion {num:>2}  {title.replace('_', ' ')}")
