import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from usmkit import FeatureSequence, PosteriorSequence  # noqa: E402
from usmkit import _kernels  # noqa: E402

BACKENDS = ["numpy"] + (["numba"] if _kernels.njit is not None else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_posteriors(rng, T, K, sparsity=0.0):
    g = rng.random((T, K))
    if sparsity:
        g[rng.random((T, K)) < sparsity] = 0.0
        g[np.arange(T), rng.integers(K, size=T)] += 0.1
    return g / g.sum(axis=1, keepdims=True)


def random_corpus(rng, n_utts, max_T, K, d, speakers=("s0",), sparsity=0.0):
    corpus = []
    for u in range(n_utts):
        T = int(rng.integers(0, max_T + 1))
        x = rng.normal(size=(T, d))
        g = random_posteriors(rng, T, K, sparsity)
        spk = speakers[u % len(speakers)]
        corpus.append((FeatureSequence(x, f"u{u}", spk), PosteriorSequence(K, dense=g, utterance_id=f"u{u}")))
    return corpus


def as_lists(corpus):
    return [(f.frames.tolist(), p.dense.tolist()) for f, p in corpus]


_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE.append((marker.args[0], report.outcome, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome, duration in _ACCEPTANCE:
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{status}] {label} ({duration:.2f}s)")
