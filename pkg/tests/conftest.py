import glob
import sysconfig

import numpy as np
import pytest

ACCEPTANCE_LINES = []


def stdlib_corpus(min_bytes):
    """Concatenate stdlib sources in sorted order until ``min_bytes`` is reached."""
    stdlib = sysconfig.get_paths()["stdlib"]
    chunks, total = [], 0
    for path in sorted(glob.glob(f"{stdlib}/*.py")):
        with open(path, "rb") as f:
            data = f.read()
        chunks.append(data)
        total += len(data)
        if total >= min_bytes:
            break
    corpus = b"".join(chunks)
    assert len(corpus) >= min_bytes, "standard library too small for the corpus"
    return corpus


@pytest.fixture(scope="session")
def small_corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "small.txt"
    path.write_bytes(stdlib_corpus(60_000)[:60_000])
    return path


@pytest.fixture(scope="session")
def big_corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "corpus.txt"
    path.write_bytes(stdlib_corpus(1_100_000))
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
