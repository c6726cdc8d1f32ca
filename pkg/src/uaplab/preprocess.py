"""Fundus preprocessing: trim black borders, resize, circular crop, smoothing."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy import ndimage
from torch.nn import functional as F

from .errors import EmptyResult, InvalidSigma, ShapeMismatch
from .provenance import config_hash

LUMA = np.array([0.299, 0.587, 0.114])
GAUSS_TRUNCATE = 4.0


@dataclass(frozen=True)
class PreprocessConfig:
    threshold: float = 7 / 255
    target_size: int = 224
    fill: float = 0.0
    sigma: float | None = None  # None -> target_size / 30
    alpha: float = 4.0
    beta: float = -4.0
    gamma: float = 0.5

    @property
    def effective_sigma(self) -> float:
        return self.sigma if self.sigma is not None else self.target_size / 30.0

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _as_chw(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] not in (1, 3) or img.shape[1] == 0 or img.shape[2] == 0:
        raise ShapeMismatch(f"expected a nonempty C x H x W image with C in {{1, 3}}, got {img.shape}")
    return img


def greyscale(image) -> np.ndarray:
    img = _as_chw(image)
    if img.shape[0] == 1:
        return img[0].astype(np.float64)
    return np.tensordot(LUMA, img.astype(np.float64), axes=1)


def trim_black_borders(image, intensity_threshold: float = 7 / 255) -> np.ndarray:
    """Drop leading/trailing rows and columns whose grey level never exceeds the threshold."""
    if not 0.0 <= intensity_threshold < 1.0:
        raise ValueError("threshold must lie in [0, 1)")
    img = _as_chw(image)
    bright = greyscale(img) > intensity_threshold
    rows = np.flatnonzero(bright.any(axis=1))
    cols = np.flatnonzero(bright.any(axis=0))
    if rows.size == 0:
        raise EmptyResult("every pixel is at or below the black threshold")
    return img[:, rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1].copy()


def circular_mask(height: int, width: int) -> np.ndarray:
    """True for pixels whose centre lies within radius min(H, W)/2 of the image centre."""
    yy = np.arange(height) + 0.5 - height / 2.0
    xx = np.arange(width) + 0.5 - width / 2.0
    radius = min(height, width) / 2.0
    return yy[:, None] ** 2 + xx[None, :] ** 2 <= radius ** 2


def circular_crop(image, fill: float = 0.0) -> np.ndarray:
    img = _as_chw(image)
    mask = circular_mask(img.shape[1], img.shape[2])
    out = img.copy()
    out[:, ~mask] = fill
    return out


def gaussian_blur(image, sigma: float) -> np.ndarray:
    """Per-channel Gaussian blur, kernel cut at 4 sigma, half-sample reflective edges."""
    if not sigma > 0:
        raise InvalidSigma(f"sigma must be positive, got {sigma}")
    img = _as_chw(image).astype(np.float64)
    return ndimage.gaussian_filter(img, sigma=(0, sigma, sigma), mode="reflect",
                                   truncate=GAUSS_TRUNCATE)


def smooth_normalize(image, sigma: float, alpha: float = 4.0, beta: float = -4.0,
                     gamma: float = 0.5) -> np.ndarray:
    """clip(alpha * image + beta * blur(image) + gamma, 0, 1)."""
    img = _as_chw(image)
    out = alpha * img.astype(np.float64) + beta * gaussian_blur(img, sigma) + gamma
    return np.clip(out, 0.0, 1.0).astype(img.dtype if img.dtype.kind == "f" else np.float32)


def resize_bilinear(image, size: int) -> np.ndarray:
    img = _as_chw(image)
    if img.shape[1:] == (size, size):
        return img.copy()
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0].numpy()


def preprocess_image(image, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """trim -> resize -> circular crop -> smooth; returns float32 C x S x S in [0, 1]."""
    img = trim_black_borders(image, config.threshold)
    img = resize_bilinear(img, config.target_size)
    img = circular_crop(img, config.fill)
    img = smooth_normalize(img, config.effective_sigma, config.alpha, config.beta, config.gamma)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def preprocess_batch(images, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    return np.stack([preprocess_image(img, config) for img in images])
