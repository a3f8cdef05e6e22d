import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from shelfid.encoder_core import EncoderConfig, build_encoder  # noqa: E402

_criteria: dict[str, list[str]] = {}


@pytest.fixture
def small_config():
    return EncoderConfig(num_blocks=4, embed_dim=64, patch_size=8, heads=4, seed=7, image_size=32)


@pytest.fixture
def encoder(small_config):
    return build_encoder(small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        _criteria.setdefault(report.nodeid, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, outcomes in _criteria.items():
        status = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"[{status}] {nodeid.split('::')[-1]}")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Five synthetic products: 12 train and 6 test images each."""
    from shelfid.synthetic import write_dataset

    return write_dataset(tmp_path_factory.mktemp("tiny"), [12] * 5, n_test=6, seed=3)
