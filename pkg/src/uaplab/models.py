"""Classifier abstraction and the registry of small reference architectures.

Every model is a ``body`` feature extractor followed by a single linear
``head``.  Activations are smooth and downsampling uses strided convolutions
or average pooling so input gradients agree with finite differences.
"""

from __future__ import annotations

import copy
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import InvalidClass, InvalidInput, ShapeMismatch, UnknownArchitecture

EVAL_BATCH = 256


class ClassifierModel:
    """A K-class differentiable classifier with a body/head partition.

    Any ``nn.Module`` pair can be wrapped, which is how externally supplied
    architectures plug into the attacks and the robustness pipeline.
    """

    def __init__(self, body: nn.Module, head: nn.Module, arch_id: str,
                 num_classes: int, input_shape):
        self.net = nn.Sequential()
        self.net.add_module("body", body)
        self.net.add_module("head", head)
        self.net.eval()
        self.arch_id = arch_id
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(d) for d in input_shape)

    @property
    def body(self) -> nn.Module:
        return self.net.body

    @property
    def head(self) -> nn.Module:
        return self.net.head

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def named_parameters(self):
        return list(self.net.named_parameters())

    def head_parameter_names(self) -> list[str]:
        return [f"head.{n}" for n, _ in self.head.named_parameters()]

    def body_parameter_names(self) -> list[str]:
        return [f"body.{n}" for n, _ in self.body.named_parameters()]

    def flat_parameters(self) -> np.ndarray:
        with torch.no_grad():
            vec = nn.utils.parameters_to_vector(self.net.parameters())
        return vec.detach().cpu().numpy().copy()

    def load_flat_parameters(self, flat) -> None:
        vec = torch.as_tensor(np.asarray(flat), dtype=self.dtype)
        expected = sum(p.numel() for p in self.net.parameters())
        if vec.numel() != expected:
            raise ShapeMismatch(f"expected {expected} parameters, got {vec.numel()}")
        with torch.no_grad():
            nn.utils.vector_to_parameters(vec, self.net.parameters())

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def copy(self) -> "ClassifierModel":
        return copy.deepcopy(self)

    def to(self, dtype: torch.dtype) -> "ClassifierModel":
        """Return a copy whose parameters use ``dtype`` (e.g. float64 for gradient checks)."""
        out = self.copy()
        out.net.to(dtype)
        return out

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def __repr__(self):
        return (f"ClassifierModel(arch_id={self.arch_id!r}, num_classes={self.num_classes}, "
                f"input_shape={self.input_shape}, params={self.num_parameters()})")


class Standardize(nn.Module):
    """Fixed (x - mean) / std input scaling; buffers, not trainable parameters."""

    def __init__(self, mean: float = 0.5, std: float = 0.25):
        super().__init__()
        self.register_buffer("mean", torch.tensor(float(mean)))
        self.register_buffer("std", torch.tensor(float(std)))

    def forward(self, x):
        return (x - self.mean) / self.std


class _Flatten(nn.Module):
    def forward(self, x):
        return x.flatten(1)


def _gap_cnn(layers) -> nn.Module:
    return nn.Sequential(Standardize(), *layers, nn.AdaptiveAvgPool2d(1), _Flatten())


def _small_cnn_a(c, h, w):
    body = _gap_cnn([
        nn.Conv2d(c, 16, 3, padding=1), nn.SiLU(),
        nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
    ])
    return body, 32


def _small_cnn_b(c, h, w):
    body = _gap_cnn([
        nn.Conv2d(c, 12, 3, padding=1), nn.GELU(),
        nn.Conv2d(12, 24, 3, stride=2, padding=1), nn.GELU(),
        nn.Conv2d(24, 32, 3, stride=2, padding=1), nn.GELU(),
    ])
    return body, 32


def _small_cnn_c(c, h, w):
    body = _gap_cnn([
        nn.Conv2d(c, 24, 5, padding=2), nn.Tanh(),
        nn.AvgPool2d(2),
        nn.Conv2d(24, 48, 3, padding=1), nn.Softplus(),
    ])
    return body, 48


def _mlp(c, h, w):
    body = nn.Sequential(Standardize(), _Flatten(), nn.Linear(c * h * w, 128), nn.Tanh(),
                         nn.Linear(128, 64), nn.Tanh())
    return body, 64


ARCHITECTURES: dict[str, Callable] = {
    "small-cnn-a": _small_cnn_a,
    "small-cnn-b": _small_cnn_b,
    "small-cnn-c": _small_cnn_c,
    "mlp": _mlp,
}


def build_model(arch_id: str, num_classes: int = 5, input_shape=(3, 32, 32),
                seed: int = 0) -> ClassifierModel:
    """Build a deterministically initialized reference model."""
    if arch_id not in ARCHITECTURES:
        raise UnknownArchitecture(
            f"unknown architecture {arch_id!r}; choose from {sorted(ARCHITECTURES)}")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    c, h, w = (int(d) for d in input_shape)
    # fork_rng keeps the caller's global torch RNG untouched
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        body, width = ARCHITECTURES[arch_id](c, h, w)
        head = nn.Linear(width, num_classes)
    return ClassifierModel(body, head, arch_id, num_classes, (c, h, w))


def _check_batch(model: ClassifierModel, batch) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(batch) if not torch.is_tensor(batch) else batch)
    if x.dim() == len(model.input_shape):
        raise ShapeMismatch("expected a batch; wrap single images with x[None]")
    if tuple(x.shape[1:]) != model.input_shape:
        raise ShapeMismatch(
            f"batch items have shape {tuple(x.shape[1:])}, model expects {model.input_shape}")
    x = x.to(model.dtype)
    if not torch.isfinite(x).all():
        raise InvalidInput("input contains NaN or infinite values")
    return x


def forward_logits(model: ClassifierModel, batch) -> np.ndarray:
    """Logits (N x K) for a batch of images."""
    x = _check_batch(model, batch)
    out = []
    with torch.no_grad():
        for start in range(0, x.shape[0], EVAL_BATCH):
            out.append(model(x[start:start + EVAL_BATCH]))
    if not out:
        return np.zeros((0, model.num_classes), dtype=np.float64)
    return torch.cat(out).cpu().numpy()


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model: ClassifierModel, batch) -> np.ndarray:
    return softmax(forward_logits(model, batch))


def argmax_lowest(logits) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. the lower class on ties
    logits = np.asarray(logits)
    if logits.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(logits, axis=-1).astype(np.int64)


def predict(model: ClassifierModel, batch) -> np.ndarray:
    return argmax_lowest(forward_logits(model, batch))


def input_gradient(model: ClassifierModel, x, mode: str = "class", k: int | None = None,
                   y: int | None = None) -> np.ndarray:
    """Gradient of a class logit (``mode="class"``) or of the cross-entropy
    loss against label ``y`` (``mode="loss"``) with respect to the input image."""
    x = np.asarray(x)
    if x.shape != model.input_shape:
        raise ShapeMismatch(f"image has shape {x.shape}, model expects {model.input_shape}")
    xt = _check_batch(model, x[None]).clone().requires_grad_(True)
    if mode == "class":
        if k is None or not 0 <= k < model.num_classes:
            raise InvalidClass(f"class index {k} outside 0..{model.num_classes - 1}")
        target = model(xt)[0, k]
    elif mode == "loss":
        if y is None or not 0 <= y < model.num_classes:
            raise InvalidClass(f"label {y} outside 0..{model.num_classes - 1}")
        target = F.cross_entropy(model(xt), torch.tensor([y]))
    else:
        raise ValueError(f"unknown gradient mode {mode!r}")
    (grad,) = torch.autograd.grad(target, xt)
    return grad[0].detach().cpu().numpy()


def class_jacobian(model: ClassifierModel, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Logits and all K class-logit input gradients for one image, in one backward pass.

    The image is replicated K times so row k's gradient only sees logit k.
    """
    K = model.num_classes
    xs = x.detach().to(model.dtype).unsqueeze(0).repeat(K, *([1] * x.dim())).requires_grad_(True)
    logits = model(xs)
    (grads,) = torch.autograd.grad(logits.diagonal().sum(), xs)
    return logits[0].detach(), grads
