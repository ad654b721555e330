"""Baseline JPEG round trip (no entropy coding).

The lossy part of baseline JPEG is reproduced exactly enough for robustness
tests: RGB -> YCbCr (JFIF), level shift, 8x8 DCT-II, quantization with the
standard luminance/chrominance tables scaled by quality, and the inverse.
Chroma is not subsampled (4:4:4).  Entropy coding is lossless and omitted.
Quality scaling: ``s = 5000/q`` for q < 50 else ``200 - 2q`` (percent), table
entries ``floor((t*s + 50)/100)`` clamped to [1, 255].
"""

import numpy as np

LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA = np.full((8, 8), 99.0)
CHROMA[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]


def quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    c[0] /= np.sqrt(2.0)
    return c


DCT = _dct_matrix()


def rgb_to_ycbcr(rgb):
    r, g, b = rgb
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, cb, cr])


def ycbcr_to_rgb(ycc):
    y, cb, cr = ycc[0], ycc[1] - 128.0, ycc[2] - 128.0
    return np.stack([y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb])


def _blocks(plane):
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _unblocks(blocks):
    nh, nw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(nh * 8, nw * 8)


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    """image: [3, h, w] in [0, 1]; returns the decoded image in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    _, h, w = img.shape
    ph, pw = -h % 8, -w % 8
    px = np.round(np.clip(img, 0, 1) * 255.0)
    px = np.pad(px, ((0, 0), (0, ph), (0, pw)), mode="edge")
    ycc = rgb_to_ycbcr(px) - 128.0
    tables = (quant_table(LUMA, quality), quant_table(CHROMA, quality), quant_table(CHROMA, quality))
    out = np.empty_like(ycc)
    for c, q in enumerate(tables):
        coef = DCT @ _blocks(ycc[c]) @ DCT.T
        coef = np.round(coef / q) * q
        out[c] = _unblocks(DCT.T @ coef @ DCT)
    rgb = np.clip(np.round(ycbcr_to_rgb(out + 128.0)), 0, 255)
    return (rgb[:, :h, :w] / 255.0).astype(image.dtype if np.issubdtype(np.asarray(image).dtype, np.floating) else np.float64)
