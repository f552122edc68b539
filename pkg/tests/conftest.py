import sys
from pathlib import Path

import numpy as np
import pytest

from mergekin import TensorMap, save_tensor_map

REPO = Path(__file__).resolve().parent.parent
FIXTURES = REPO / "fixtures"
SCHEMAS = REPO / "schemas"
ESCAPE_POOL = FIXTURES / "escape_pool"
PYTHON = sys.executable


def tmap(arrays: dict, dtypes="F32") -> TensorMap:
    return TensorMap.from_arrays(
        {k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()}, dtypes)


@pytest.fixture
def save(tmp_path):
    """Write a TensorMap to a temp file and return the path."""
    counter = [0]

    def _save(tensor_map, name=None):
        counter[0] += 1
        path = tmp_path / (name or f"model-{counter[0]}.safetensors")
        save_tensor_map(tensor_map, path)
        return path

    return _save


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if not test_acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(test_acceptance.RESULTS):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {criterion:2d}: {status} - {detail}")
