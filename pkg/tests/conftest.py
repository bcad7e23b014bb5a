import numpy as np
import pytest

from rcunet.data import CorpusManifest, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_manifest():
    return CorpusManifest(seed=3, train_count=3, test_count=2, min_duration=1.0, max_duration=1.5)


@pytest.fixture(scope="session")
def tiny_train(tiny_manifest):
    return generate(tiny_manifest, "train")


def pytest_terminal_summary(terminalreporter):
    # surface the one-line verdicts printed by the acceptance tests
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", "") == "call" and "test_acceptance" in rep.nodeid:
                lines += [l for l in rep.capstdout.splitlines() if l.startswith("AC")]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
