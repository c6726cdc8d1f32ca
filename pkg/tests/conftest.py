import numpy as np
import pytest
import torch
from torch import nn

from uaplab.data import LabeledDataset
from uaplab.models import ClassifierModel


def affine_model(W, b=None, dtype=torch.float64, input_shape=None) -> ClassifierModel:
    """f(x) = W x + b on inputs of length W.shape[1] (flattened from ``input_shape``)."""
    W = np.asarray(W, dtype=np.float64)
    K, d = W.shape
    head = nn.Linear(d, K, dtype=dtype)
    with torch.no_grad():
        head.weight.copy_(torch.from_numpy(W))
        head.bias.copy_(torch.zeros(K) if b is None else torch.as_tensor(np.asarray(b, dtype=np.float64)))
    if input_shape is None:
        return ClassifierModel(nn.Identity(), head, "affine", K, (d,))
    return ClassifierModel(nn.Flatten(), head, "affine", K, input_shape)


def toy_dataset(images, grades, prefix="t") -> LabeledDataset:
    images = np.asarray(images, dtype=np.float32)
    return LabeledDataset(images, list(grades), [f"{prefix}{i:04d}" for i in range(len(images))])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    def record(criterion: str, ok: bool, detail: str) -> None:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
