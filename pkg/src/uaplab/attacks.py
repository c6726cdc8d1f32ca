"""Universal adversarial perturbations built from DeepFool steps, plus FGSM."""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .data import LabeledDataset
from .errors import (
    CorruptCheckpoint,
    EmptyDataset,
    InvalidBudget,
    MaxIterExceeded,
    ShapeMismatch,
    TargetNotReached,
    VersionMismatch,
)
from .models import ClassifierModel, class_jacobian, predict
from .provenance import atomic_write_bytes, atomic_write_text

log = logging.getLogger(__name__)

UAPV_MAGIC = b"UAPV"
UAPV_VERSION = 1


def parse_norm(p) -> float:
    """Accept 2, inf, "2", "inf" and return 2.0 or math.inf."""
    if isinstance(p, str):
        p = p.strip().lower()
        if p in ("inf", "linf", "infinity"):
            return math.inf
        p = float(p)
    p = float(p)
    if p == 2.0 or math.isinf(p):
        return p
    raise ValueError(f"norm must be 2 or inf, got {p}")


def norm_label(p) -> str:
    return "inf" if math.isinf(parse_norm(p)) else "2"


def lp_norm(v, p) -> float:
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if math.isinf(parse_norm(p)):
        return float(np.max(np.abs(a))) if a.size else 0.0
    return float(np.sqrt(np.dot(a, a)))


def _dtype_floor(x: float, dtype) -> float:
    """Largest value representable in ``dtype`` that does not exceed ``x``."""
    if np.dtype(dtype).kind != "f":
        return x
    y = np.asarray(x, dtype=dtype)
    if float(y) > x:
        y = np.nextafter(y, np.asarray(0, dtype=dtype))
    return float(y)


def project_lp_ball(v, p, xi: float) -> np.ndarray:
    """Map ``v`` into {u : ||u||_p <= xi}; points already inside are returned unchanged."""
    if not xi > 0:
        raise InvalidBudget(f"budget must be positive, got {xi}")
    p = parse_norm(p)
    v = np.asarray(v)
    if math.isinf(p):
        bound = _dtype_floor(xi, v.dtype)
        return np.clip(v, -bound, bound).astype(v.dtype, copy=False)
    norm = lp_norm(v, 2)
    if norm <= xi:
        return v.copy()
    scale = xi / norm
    out = (v * scale).astype(v.dtype, copy=False)
    # shave the scale by one ulp of the output dtype until rounding cannot leave
    # the result outside the ball, so a second projection is the identity
    eps = np.finfo(out.dtype).eps if out.dtype.kind == "f" else np.finfo(np.float64).eps
    while lp_norm(out, 2) > xi:
        scale *= 1.0 - eps
        out = (v * scale).astype(v.dtype, copy=False)
    return out


@dataclass(frozen=True)
class AttackConfig:
    xi: float = 0.04
    p: float = math.inf
    target_fooling: float = 0.9
    max_passes: int = 50
    deepfool_max_iter: int = 50
    overshoot: float = 0.02
    shuffle_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "p", parse_norm(self.p))
        if not self.xi > 0:
            raise InvalidBudget(f"xi must be positive, got {self.xi}")
        # values below zero are accepted as "already satisfied" targets
        if not -1.0 <= self.target_fooling <= 1.0:
            raise ValueError("target_fooling must lie in [-1, 1]")
        if self.max_passes < 0 or self.deepfool_max_iter < 1:
            raise ValueError("max_passes must be >= 0 and deepfool_max_iter >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["p"] = norm_label(self.p)
        return d


@dataclass
class PerturbationVector:
    v: np.ndarray
    p: float = math.inf
    xi: float = 0.04
    source_model: str = ""
    history: list = field(default_factory=list)
    seed: int = 0
    passes: int = 0
    final_fooling_ratio: float | None = None

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float32)
        self.p = parse_norm(self.p)

    @property
    def shape(self):
        return self.v.shape

    def sidecar(self) -> dict:
        return {"source_model": self.source_model, "seed": self.seed, "passes": self.passes,
                "final_fooling_ratio": self.final_fooling_ratio,
                "history": [float(h) for h in self.history],
                "p": norm_label(self.p), "xi": self.xi}


@dataclass
class DeepFoolResult:
    r: np.ndarray
    iterations: int
    label_orig: int
    label_adv: int
    boundary_class: int


def _first_argmax(t: torch.Tensor) -> int:
    # torch.argmax does not promise the first maximal index; be explicit
    m = t.max()
    return int(torch.nonzero(t == m)[0, 0])


def deepfool(model: ClassifierModel, x, max_iter: int = 50, overshoot: float = 0.02) -> DeepFoolResult:
    """Minimal perturbation that changes the model's current prediction on ``x``.

    Each step moves to the nearest linearized boundary between the original
    class and any other class; the accumulated step is scaled by ``1 + overshoot``.
    """
    x0 = torch.as_tensor(np.asarray(x)).to(model.dtype)
    if tuple(x0.shape) != model.input_shape:
        raise ShapeMismatch(f"image has shape {tuple(x0.shape)}, model expects {model.input_shape}")
    r_tot = torch.zeros_like(x0)
    k0 = None
    boundary = -1
    for it in range(max_iter + 1):
        logits, grads = class_jacobian(model, x0 + (1 + overshoot) * r_tot)
        k = _first_argmax(logits)
        if k0 is None:
            k0 = k
        elif k != k0:
            r = ((1 + overshoot) * r_tot).detach().cpu().numpy()
            return DeepFoolResult(r, it, k0, k, boundary)
        if it == max_iter:
            break
        w = (grads - grads[k0]).reshape(len(logits), -1)
        f = logits - logits[k0]
        norms = w.norm(dim=1)
        dist = torch.full_like(norms, math.inf)
        valid = norms > 0
        valid[k0] = False
        if not bool(valid.any()):
            raise MaxIterExceeded("gradient differences vanish; no boundary reachable")
        dist[valid] = f[valid].abs() / norms[valid]
        boundary = _first_argmax(-dist)
        step = f[boundary].abs() / norms[boundary] ** 2 * w[boundary]
        r_tot = r_tot + step.reshape(x0.shape)
    raise MaxIterExceeded(f"prediction unchanged after {max_iter} DeepFool iterations")


def _images(data) -> np.ndarray:
    return data.images if isinstance(data, LabeledDataset) else np.asarray(data, dtype=np.float32)


def _vector(v) -> np.ndarray:
    return v.v if isinstance(v, PerturbationVector) else np.asarray(v, dtype=np.float32)


def apply_perturbation(images, v) -> np.ndarray:
    vec = _vector(v)
    images = np.asarray(images, dtype=np.float32)
    if images.shape[1:] != vec.shape:
        raise ShapeMismatch(f"perturbation shape {vec.shape} does not match images {images.shape[1:]}")
    return np.clip(images + vec[None], 0.0, 1.0)


def fooling_ratio(model: ClassifierModel, dataset, v, clean_pred=None) -> float:
    """Share of points whose predicted label changes once ``v`` is added (and clipped)."""
    images = _images(dataset)
    if len(images) == 0:
        raise EmptyDataset("fooling ratio of an empty dataset is undefined")
    if clean_pred is None:
        clean_pred = predict(model, images)
    adv_pred = predict(model, apply_perturbation(images, v))
    return float(np.mean(adv_pred != clean_pred))


def generate_uap(model: ClassifierModel, dp: LabeledDataset, config: AttackConfig = AttackConfig(),
                 source_model: str | None = None) -> PerturbationVector:
    """Accumulate DeepFool steps over shuffled passes of ``dp`` until the fooling
    ratio strictly exceeds ``config.target_fooling``."""
    images = _images(dp)
    if len(images) == 0:
        raise EmptyDataset("cannot build a perturbation from an empty dataset")
    v = np.zeros(images.shape[1:], dtype=np.float32)
    clean = predict(model, images)
    rng = np.random.default_rng(config.shuffle_seed)
    ratio = fooling_ratio(model, images, v, clean)
    history = []
    best_ratio, best_v = ratio, v.copy()
    passes = 0
    while not ratio > config.target_fooling and passes < config.max_passes:
        for i in rng.permutation(len(images)):
            xv = np.clip(images[i] + v, 0.0, 1.0)
            if predict(model, xv[None])[0] != clean[i]:
                continue
            try:
                step = deepfool(model, xv, config.deepfool_max_iter, config.overshoot)
            except MaxIterExceeded:
                continue
            v = project_lp_ball(v + step.r.astype(np.float32), config.p, config.xi)
        passes += 1
        ratio = fooling_ratio(model, images, v, clean)
        history.append(ratio)
        log.info("uap pass %d: fooling ratio %.4f", passes, ratio)
        if ratio > best_ratio or passes == 1:
            best_ratio, best_v = ratio, v.copy()

    pv = PerturbationVector(v, config.p, config.xi, source_model or model.arch_id,
                            history, config.shuffle_seed, passes, ratio)
    if ratio > config.target_fooling:
        return pv
    best = PerturbationVector(best_v, config.p, config.xi, pv.source_model, history,
                              config.shuffle_seed, passes, best_ratio)
    raise TargetNotReached(
        f"fooling ratio {best_ratio:.4f} did not exceed {config.target_fooling} "
        f"after {passes} passes", perturbation=best, best_ratio=best_ratio)


def fgsm(model: ClassifierModel, x, y, eps: float) -> np.ndarray:
    """clip(x + eps * sign(grad_x CE(f(x), y)), 0, 1) for one image or a batch."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    x = np.asarray(x, dtype=np.float32)
    single = x.shape == model.input_shape
    batch = x[None] if single else x
    if batch.shape[1:] != model.input_shape:
        raise ShapeMismatch(f"input shape {x.shape} does not match model {model.input_shape}")
    labels = torch.as_tensor(np.atleast_1d(np.asarray(y, dtype=np.int64)))
    xt = torch.from_numpy(batch).to(model.dtype).requires_grad_(True)
    loss = F.cross_entropy(model(xt), labels, reduction="sum")
    (grad,) = torch.autograd.grad(loss, xt)
    adv = torch.clamp(xt.detach() + eps * grad.sign(), 0.0, 1.0).to(torch.float32).numpy()
    return adv[0] if single else adv


def fgsm_dataset(model: ClassifierModel, dataset: LabeledDataset, eps: float,
                 batch_size: int = 256) -> LabeledDataset:
    out = [fgsm(model, dataset.images[s:s + batch_size], dataset.grades[s:s + batch_size], eps)
           for s in range(0, len(dataset), batch_size)]
    return dataset.with_images(np.concatenate(out) if out else dataset.images.copy())


def perturb_dataset(dataset: LabeledDataset, v) -> LabeledDataset:
    """Every image becomes clip(x + v, 0, 1); grades and ids are untouched."""
    return dataset.with_images(apply_perturbation(dataset.images, v))


# ---------------------------------------------------------------- file format

def perturbation_bytes(pv: PerturbationVector) -> bytes:
    v = np.ascontiguousarray(pv.v, dtype="<f4")
    head = UAPV_MAGIC + struct.pack("<HBfB", UAPV_VERSION, 0 if math.isinf(pv.p) else 1,
                                    pv.xi, v.ndim)
    head += struct.pack(f"<{v.ndim}I", *v.shape)
    body = head + v.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_perturbation(pv: PerturbationVector, path) -> Path:
    path = Path(path)
    atomic_write_bytes(path, perturbation_bytes(pv))
    atomic_write_text(sidecar_path(path), json.dumps(pv.sidecar(), indent=2, sort_keys=True) + "\n")
    return path


def parse_perturbation(blob: bytes) -> tuple[float, float, np.ndarray]:
    if len(blob) < 4 + 8 + 4 or blob[:4] != UAPV_MAGIC:
        raise CorruptCheckpoint("not a perturbation file (bad magic or truncated)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint("perturbation checksum mismatch")
    version, norm_byte, xi, ndim = struct.unpack_from("<HBfB", body, 4)
    if version != UAPV_VERSION:
        raise VersionMismatch(f"perturbation version {version}, expected {UAPV_VERSION}")
    off = 4 + struct.calcsize("<HBfB")
    dims = struct.unpack_from(f"<{ndim}I", body, off)
    off += 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    if len(body) - off != 4 * count:
        raise CorruptCheckpoint("perturbation payload length does not match header")
    v = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(dims)
    p = math.inf if norm_byte == 0 else 2.0
    return p, xi, v.astype(np.float32)


def load_perturbation(path) -> PerturbationVector:
    path = Path(path)
    p, xi, v = parse_perturbation(path.read_bytes())
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    # the header stores xi as float32; prefer the sidecar's full-precision copy
    if "xi" in meta and np.float32(meta["xi"]) == np.float32(xi):
        xi = meta["xi"]
    return PerturbationVector(v, p, float(xi), meta.get("source_model", ""),
                              meta.get("history", []), meta.get("seed", 0),
                              meta.get("passes", 0), meta.get("final_fooling_ratio"))
