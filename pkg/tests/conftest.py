"""Shared fixtures: a tiny encoder layout and small synthetic corpora."""

import numpy as np
import pytest
import torch

from vcmr.synthetic import make_synthetic_corpus
from vcmr.train import TrackStore

# k=1 and thin channels: 19683-sample (1.23 s) inputs, fast on one CPU core
TINY = dict(
    first_kernel=1,
    stem_channels=8,
    channel_schedule=(8, 8, 8, 16, 16, 16, 32, 32, 512),
    proj_dim=32,
    video_hidden_dim=32,
    tag_hidden_dim=32,
)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    return make_synthetic_corpus(root, n_tracks=16, duration_s=3.0, seed=3, valid_frac=0.25, test_frac=0.25)


@pytest.fixture(scope="session")
def tiny_store(tiny_corpus):
    return TrackStore(tiny_corpus.manifest, tiny_corpus.cache_dir)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
