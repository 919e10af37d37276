import os

# small matrices: threading only adds overhead and run-to-run jitter
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from filterxl import corpus  # noqa: E402
from filterxl.encoder import EncoderConfig  # noqa: E402
from filterxl.model import FilterConfig, FilterModel, TaskKind  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_config(task=None, m=1, k=1, n_layers=2, d=8, heads=2, d_ff=16, vocab=None):
    task = task or TaskKind.classification(3)
    enc = EncoderConfig(vocab or corpus.vocab_size(), d, heads, d_ff, 64, n_layers)
    return FilterConfig(enc, m, k, task)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return FilterModel.init(tiny_config(), seed=7)
