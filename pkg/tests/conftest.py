import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from relp.model import ModelConfig, Transformer  # noqa: E402
from relp.reference import load_reference  # noqa: E402
from relp.tasks import gen_ioi, vocabulary  # noqa: E402


@pytest.fixture(scope="session")
def tok():
    return vocabulary()


@pytest.fixture(scope="session")
def reference():
    return load_reference()


@pytest.fixture(scope="session")
def ref_model(reference):
    return reference[0]


@pytest.fixture(scope="session")
def random_model(tok):
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_head=8, d_mlp=32, vocab_size=len(tok), max_seq=16)
    return Transformer.build(cfg, 3)


@pytest.fixture(scope="session")
def ioi_pairs(tok):
    return gen_ioi(100, 0, tok)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def criterion(record_property):
    """Record one acceptance line; the summary hook prints them in order."""

    def report(number, ok, detail):
        record_property("acceptance", (number, "PASS" if ok else "FAIL", detail))
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    lines = []
    for rep in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", []):
        if rep.when != "call":
            continue
        lines += [v for k, v in rep.user_properties if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for number, status, detail in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(f"criterion {number:>2}: {status}  {detail}")
