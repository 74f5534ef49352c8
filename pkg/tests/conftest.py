import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Three rendered desk-profile clips on disk."""
    from perceptflow.datagen.io import ClipDataset, generate_dataset

    root = tmp_path_factory.mktemp("clips")
    generate_dataset(root, [0, 1, 2])
    return ClipDataset(root)


ACCEPTANCE = {}


@pytest.fixture
def record_criterion():
    """Store a one-line verdict for an acceptance criterion; printed at session end."""
    def record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
