"""Distortion battery for robustness evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from PIL import Image
from scipy.ndimage import convolve1d

from ..forge.rng import Xoshiro256
from .jpeg import jpeg_roundtrip


class DistortionKind(str, Enum):
    NONE = "NONE"
    RESIZE = "RESIZE"
    GAUSS_BLUR = "GAUSS_BLUR"
    GAUSS_NOISE = "GAUSS_NOISE"
    JPEG = "JPEG"


class DistortionError(ValueError):
    pass


@dataclass(frozen=True)
class DistortionSpec:
    kind: DistortionKind = DistortionKind.NONE
    param: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", DistortionKind(self.kind))
        k, p = self.kind, self.param
        if k is DistortionKind.RESIZE and not 0 < p <= 1:
            raise DistortionError(f"resize scale must be in (0, 1], got {p}")
        if k is DistortionKind.GAUSS_BLUR and (p != int(p) or p < 3 or int(p) % 2 == 0):
            raise DistortionError(f"blur kernel must be an odd integer >= 3, got {p}")
        if k is DistortionKind.GAUSS_NOISE and p < 0:
            raise DistortionError(f"noise sigma must be >= 0, got {p}")
        if k is DistortionKind.JPEG and (p != int(p) or not 1 <= p <= 100):
            raise DistortionError(f"JPEG quality must be an integer in [1, 100], got {p}")

    @property
    def label(self) -> str:
        k, p = self.kind, self.param
        if k is DistortionKind.NONE:
            return "None"
        if k is DistortionKind.RESIZE:
            return f"Resize ({p:g}x)"
        if k is DistortionKind.GAUSS_BLUR:
            return f"GSBr (k={int(p)})"
        if k is DistortionKind.GAUSS_NOISE:
            return f"GSN (sigma={p:g})"
        return f"JPEG (q={int(p)})"

    @classmethod
    def parse(cls, text: str) -> "DistortionSpec":
        """'NONE', 'RESIZE:0.78', 'GAUSS_BLUR:3', 'GAUSS_NOISE:15', 'JPEG:50'."""
        name, _, val = text.strip().partition(":")
        try:
            kind = DistortionKind(name.strip().upper())
        except ValueError:
            raise DistortionError(f"unknown distortion {name!r}") from None
        if kind is not DistortionKind.NONE and not val:
            raise DistortionError(f"{kind.value} needs a parameter, e.g. {kind.value}:3")
        return cls(kind, float(val) if val else 0.0)


TABLE_ROWS = (
    DistortionSpec(DistortionKind.NONE),
    DistortionSpec(DistortionKind.RESIZE, 0.78),
    DistortionSpec(DistortionKind.RESIZE, 0.25),
    DistortionSpec(DistortionKind.GAUSS_BLUR, 3),
    DistortionSpec(DistortionKind.GAUSS_BLUR, 15),
    DistortionSpec(DistortionKind.GAUSS_NOISE, 3),
    DistortionSpec(DistortionKind.GAUSS_NOISE, 15),
    DistortionSpec(DistortionKind.JPEG, 100),
    DistortionSpec(DistortionKind.JPEG, 50),
)


def blur_sigma(k: int) -> float:
    return 0.3 * ((k - 1) / 2 - 1) + 0.8


def gaussian_kernel(k: int) -> np.ndarray:
    x = np.arange(k) - (k - 1) / 2
    w = np.exp(-0.5 * (x / blur_sigma(k)) ** 2)
    return w / w.sum()


def resized_shape(h: int, w: int, scale: float) -> tuple[int, int]:
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of [c, h, w] float channels to ``size`` = (h, w)."""
    h, w = size
    out = [np.asarray(Image.fromarray(ch.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))
           for ch in np.asarray(image)]
    return np.stack(out).astype(np.float64)


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    img = Image.fromarray(np.asarray(mask).astype(np.uint8))
    return np.asarray(img.resize((w, h), Image.NEAREST))


def distort(image: np.ndarray, spec: DistortionSpec, seed: int = 0) -> np.ndarray:
    """Apply ``spec`` to a [3, h, w] image in [0, 1]."""
    img = np.asarray(image)
    k, p = spec.kind, spec.param
    if k is DistortionKind.NONE:
        return img.copy()
    if k is DistortionKind.RESIZE:
        out = resize_image(img, resized_shape(img.shape[1], img.shape[2], p))
        return np.clip(out, 0.0, 1.0)
    if k is DistortionKind.GAUSS_BLUR:
        g = gaussian_kernel(int(p))
        out = convolve1d(img.astype(np.float64), g, axis=1, mode="reflect")
        return convolve1d(out, g, axis=2, mode="reflect")
    if k is DistortionKind.GAUSS_NOISE:
        rng = Xoshiro256(seed).derive(0x6A55, int(round(p * 1000)))
        noise = rng.normal(img.shape) * (p / 255.0)
        return np.clip(img + noise, 0.0, 1.0)
    return jpeg_roundtrip(img, int(p))


def distort_pair(image: np.ndarray, mask: np.ndarray, spec: DistortionSpec, seed: int = 0):
    """Distorted image and the matching ground-truth mask."""
    out = distort(image, spec, seed)
    if spec.kind is DistortionKind.RESIZE:
        mask = resize_mask(mask, out.shape[1:])
    return out, np.asarray(mask)
