"""Trace encoder: constrained-convolution noise front end plus a small ViT.

The constrained kernels hold their centre tap at 1 and sum to 0, so each one
predicts the centre pixel from its neighbours and outputs the prediction
residual.  Constant regions map to zero; image content is suppressed and
noise statistics remain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import ShapeMismatchError, Tensor
from .nn import AttentionConfig, Module, Parameter, PatchGrid, ViT

KERNEL_SIZE = 5
DEGENERATE_SUM = 1e-8
RECTIFY_EPS = 1e-6
ENERGY_WINDOW = 5


def project_constraints(weights: np.ndarray) -> np.ndarray:
    """Project kernels of shape [..., k, k] onto {centre = 1, total = 0}.

    The centre tap is set to 1 and the off-centre taps are rescaled so they
    sum to -1.  If their sum is (nearly) zero the off-centre taps are filled
    uniformly with -1/(k*k - 1).  Works on a copy.
    """
    w = np.array(weights, dtype=np.float64, copy=True)
    k = w.shape[-1]
    if w.shape[-2] != k or k % 2 == 0:
        raise ShapeMismatchError(f"constrained kernels must be odd and square, got {w.shape}")
    c = k // 2
    flat = w.reshape(-1, k * k)
    centre = c * k + c
    off = np.ones(k * k, dtype=bool)
    off[centre] = False
    s = flat[:, off].sum(axis=1)
    degenerate = np.abs(s) < DEGENERATE_SUM
    scale = np.where(degenerate, 0.0, -1.0 / np.where(degenerate, 1.0, s))
    flat[:, off] *= scale[:, None]
    flat[np.ix_(degenerate, off)] = -1.0 / (k * k - 1)
    flat[:, centre] = 1.0
    return flat.reshape(w.shape).astype(weights.dtype)


def constraint_violation(weights: np.ndarray) -> float:
    """Largest deviation from centre == 1 and sum == 0 over all slices."""
    k = weights.shape[-1]
    c = k // 2
    centre_err = np.abs(weights[..., c, c] - 1.0).max()
    sum_err = np.abs(weights.sum(axis=(-1, -2))).max()
    return float(max(centre_err, sum_err))


class ConstrainedConv(Module):
    """Bias-free 5x5 convolution whose kernels obey the centre/sum constraint.

    Edge-replicate padding keeps constant images mapping to exactly zero at
    the borders too.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, size: int = KERNEL_SIZE):
        init = rng.uniform(0.0, 1.0, size=(c_out, c_in, size, size))
        self.weight = Parameter(project_constraints(init))
        self.size = size

    def project(self) -> None:
        self.weight.data = project_constraints(self.weight.data)

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv2d(ag.pad_edge(x, self.size // 2), self.weight, stride=1, pad=0)


class NoiseEnhance(Module):
    """out = proj(image) + constrained_stack(image).

    ``proj`` is a learned 1x1 channel-lifting convolution (the residual
    branch); the stack is two constrained convolutions with a GELU between.
    With ``rectify`` the stack output enters as its smoothed magnitude
    sqrt(r^2 + eps): the residual is zero-mean noise, and the linear patch
    embedding downstream would otherwise average it away.
    """

    def __init__(self, channels: int, rng: np.random.Generator, in_channels: int = 3, rectify: bool = True):
        self.in_channels = in_channels
        self.channels = channels
        self.rectify = rectify
        self.conv1 = ConstrainedConv(in_channels, channels, rng)
        self.conv2 = ConstrainedConv(channels, channels, rng)
        self.proj = Parameter(rng.normal(0.0, 1.0 / np.sqrt(in_channels), size=(channels, in_channels, 1, 1)))
        self.proj_bias = Parameter(np.zeros((channels, 1, 1)))

    def constrained_layers(self) -> list[ConstrainedConv]:
        return [self.conv1, self.conv2]

    def constrained_response(self, image: Tensor, depth: int = 2) -> Tensor:
        y = self.conv1(image)
        if depth >= 2:
            y = self.conv2(ag.gelu(y))
        return y

    def lift(self, image: Tensor) -> Tensor:
        return ag.conv2d(image, self.proj) + self.proj_bias

    def residual(self, image: Tensor) -> Tensor:
        r = self.constrained_response(image)
        return ag.sqrt(r * r + RECTIFY_EPS) if self.rectify else r

    def forward(self, image: Tensor) -> Tensor:
        if image.shape[-3] != self.in_channels:
            raise ShapeMismatchError(f"noise_enhance expects {self.in_channels} channels, got {image.shape}")
        return self.lift(image) + self.residual(image)


def local_energy(residual: Tensor, window: int = ENERGY_WINDOW) -> Tensor:
    """Log of the per-channel box mean of a non-negative ``residual``,
    centred per image and channel.

    Noise-level differences are multiplicative, so the log turns them into
    offsets of order one; centring leaves only the contrast against the rest
    of the image.
    """
    b, c, h, w = residual.shape
    box = Tensor(np.full((1, 1, window, window), 1.0 / (window * window), dtype=residual.dtype))
    # channels as separate images: a depthwise box filter
    flat = ag.reshape(residual, (b * c, 1, h, w))
    e = ag.log(ag.reshape(ag.conv2d(ag.pad_edge(flat, window // 2), box), (b, c, h, w)))
    return e - ag.reduce(ag.reduce(e, "mean", axis=-1, keepdims=True), "mean", axis=-2, keepdims=True)


@dataclass
class TraceFeatureMap:
    features: Tensor  # [batch, n_patches, d]
    grid: PatchGrid
    energy: Optional[Tensor] = None  # [batch, channels, H, W] full-resolution noise energy

    def __post_init__(self):
        if self.features.shape[-2] != self.grid.n_patches:
            raise ShapeMismatchError(
                f"{self.features.shape[-2]} patches do not match grid {self.grid.grid_h}x{self.grid.grid_w}"
            )


class TraceEncoder(Module):
    def __init__(self, grid: PatchGrid, rng: np.random.Generator, channels: int = 16, depth: int = 4,
                 num_heads: int = 4, mlp_hidden: int = 128, rectify: bool = True, energy: bool = True):
        self.grid = grid
        self.noise = NoiseEnhance(channels, rng, rectify=rectify)
        self.energy = energy
        cfg = AttentionConfig(grid.embed_dim, num_heads)
        self.vit = ViT(grid, channels, depth, cfg, mlp_hidden, rng)

    def project_constraints(self) -> None:
        for layer in self.noise.constrained_layers():
            layer.project()

    def max_constraint_violation(self) -> float:
        return max(constraint_violation(layer.weight.data) for layer in self.noise.constrained_layers())

    def forward(self, image: Tensor) -> TraceFeatureMap:
        squeeze = image.ndim == 3
        if squeeze:
            image = ag.reshape(image, (1,) + image.shape)
        if image.shape[-3] != self.noise.in_channels:
            raise ShapeMismatchError(f"trace encoder expects {self.noise.in_channels} channels, got {image.shape}")
        res = self.noise.residual(image)
        feats = self.vit(self.noise.lift(image) + res)
        energy = local_energy(res) if self.energy and self.noise.rectify else None
        return TraceFeatureMap(feats, self.grid, energy)


def noise_enhance(image: Tensor, module: NoiseEnhance) -> Tensor:
    return module(image)


def encode_traces(image: Tensor, encoder: TraceEncoder) -> TraceFeatureMap:
    return encoder(image)
