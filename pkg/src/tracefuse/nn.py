"""Composite layers: linear, layer norm, multi-head attention, transformer
block, patch embedding and a two-layer MLP."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import autograd as ag
from .autograd import ShapeMismatchError, Tensor


class Parameter(Tensor):
    """Trainable (or frozen) model weight."""

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(np.asarray(data, dtype=ag.default_dtype()), requires_grad=requires_grad)


class Module:
    """Parameter container.  Attributes holding Parameters, Modules or lists
    of Modules are discovered in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeMismatchError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_normal(rng, (d_in, d_out), 1.0 / math.sqrt(d_in)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeMismatchError(f"linear expects {self.weight.shape[0]} features, got {x.shape}")
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias)


class MLP2(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))

    def identity_init(self) -> None:
        """Make the block an exact identity map.

        Uses gelu(x) - gelu(-x) == x, so it needs hidden >= 2 * d_in and
        d_out == d_in.
        """
        d_in, hidden = self.fc1.weight.shape
        d_out = self.fc2.weight.shape[1]
        if d_out != d_in or hidden < 2 * d_in:
            raise ValueError("identity init needs d_out == d_in and hidden >= 2 * d_in")
        eye = np.eye(d_in)
        w1 = np.zeros((d_in, hidden))
        w1[:, :d_in], w1[:, d_in:2 * d_in] = eye, -eye
        w2 = np.zeros((hidden, d_out))
        w2[:d_in], w2[d_in:2 * d_in] = eye, -eye
        dt = self.fc1.weight.dtype
        self.fc1.weight.data = w1.astype(dt)
        self.fc2.weight.data = w2.astype(dt)
        self.fc1.bias.data[:] = 0
        self.fc2.bias.data[:] = 0


def mlp2(x: Tensor, hidden_dim: int, rng: np.random.Generator) -> Tensor:
    return MLP2(x.shape[-1], hidden_dim, x.shape[-1], rng)(x)


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int = 64
    num_heads: int = 4

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int = 8
    grid_h: int = 8
    grid_w: int = 8
    embed_dim: int = 64

    @classmethod
    def for_image(cls, h: int, w: int, patch_size: int = 8, embed_dim: int = 64) -> "PatchGrid":
        if h % patch_size or w % patch_size:
            raise ShapeMismatchError(f"image {h}x{w} not divisible by patch size {patch_size}")
        return cls(patch_size, h // patch_size, w // patch_size, embed_dim)

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head split and output projection.

    ``forward(q_src, kv_src, k_src)`` attends from ``q_src`` rows to
    ``kv_src`` rows; ``k_src`` (defaults to ``kv_src``) lets callers add
    positional signal to keys without touching values.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.model_dim
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)
        self._last_weights: Optional[np.ndarray] = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        h, hd = self.cfg.num_heads, self.cfg.head_dim
        return ag.transpose(ag.reshape(x, (b, n, h, hd)), (0, 2, 1, 3))

    def forward(self, q_src: Tensor, kv_src: Tensor, k_src: Optional[Tensor] = None) -> Tensor:
        d = self.cfg.model_dim
        if q_src.shape[-1] != d or kv_src.shape[-1] != d:
            raise ShapeMismatchError(f"attention expects dim {d}, got {q_src.shape} and {kv_src.shape}")
        squeeze = q_src.ndim == 2
        if squeeze:
            q_src, kv_src = ag.reshape(q_src, (1,) + q_src.shape), ag.reshape(kv_src, (1,) + kv_src.shape)
            if k_src is not None:
                k_src = ag.reshape(k_src, (1,) + k_src.shape)
        k_src = kv_src if k_src is None else k_src
        b, nq, _ = q_src.shape
        q = self._split(self.q_proj(q_src))
        k = self._split(self.k_proj(k_src))
        v = self._split(self.v_proj(kv_src))
        scores = ag.matmul(q, ag.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self.cfg.head_dim))
        weights = ag.softmax(scores, axis=-1)
        self._last_weights = weights.data
        ctx = ag.transpose(ag.matmul(weights, v), (0, 2, 1, 3))
        out = self.out_proj(ag.reshape(ctx, (b, nq, d)))
        return ag.reshape(out, out.shape[1:]) if squeeze else out


def attention(q_src: Tensor, kv_src: Tensor, cfg: AttentionConfig, rng: np.random.Generator) -> Tensor:
    """Functional form with freshly initialised projections."""
    return MultiHeadAttention(cfg, rng)(q_src, kv_src)


class TransformerBlock(Module):
    """Pre-norm residual block: x + attn(LN x), then x + MLP(LN x)."""

    def __init__(self, cfg: AttentionConfig, mlp_hidden: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(cfg.model_dim)
        self.attn = MultiHeadAttention(cfg, rng)
        self.norm2 = LayerNorm(cfg.model_dim)
        self.mlp = MLP2(cfg.model_dim, mlp_hidden, cfg.model_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.norm2(x))


def image_to_patches(image: Tensor, patch: int) -> Tensor:
    """[b, c, H, W] -> [b, n_patches, c*patch*patch] (row-major patch order)."""
    b, c, h, w = image.shape
    if h % patch or w % patch:
        raise ShapeMismatchError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = ag.reshape(image, (b, c, gh, patch, gw, patch))
    x = ag.transpose(x, (0, 2, 4, 1, 3, 5))
    return ag.reshape(x, (b, gh * gw, c * patch * patch))


class PatchEmbed(Module):
    """Non-overlapping patches through a learned linear map plus learned 2-D
    positional embeddings (row and column tables, summed)."""

    def __init__(self, grid: PatchGrid, in_channels: int, rng: np.random.Generator, use_pos: bool = True):
        self.grid = grid
        self.in_channels = in_channels
        self.proj = Linear(in_channels * grid.patch_size ** 2, grid.embed_dim, rng)
        self.use_pos = use_pos
        self.pos_row = Parameter(_normal(rng, (grid.grid_h, 1, grid.embed_dim), 0.02))
        self.pos_col = Parameter(_normal(rng, (1, grid.grid_w, grid.embed_dim), 0.02))

    def positional(self) -> Tensor:
        g = self.grid
        return ag.reshape(self.pos_row + self.pos_col, (g.n_patches, g.embed_dim))

    def forward(self, image: Tensor) -> Tensor:
        squeeze = image.ndim == 3
        if squeeze:
            image = ag.reshape(image, (1,) + image.shape)
        if image.shape[1] != self.in_channels:
            raise ShapeMismatchError(f"expected {self.in_channels} channels, got {image.shape[1]}")
        g = self.grid
        if image.shape[2] != g.grid_h * g.patch_size or image.shape[3] != g.grid_w * g.patch_size:
            raise ShapeMismatchError(
                f"image {image.shape[2]}x{image.shape[3]} does not match patch grid "
                f"{g.grid_h}x{g.grid_w} of size {g.patch_size}"
            )
        x = self.proj(image_to_patches(image, g.patch_size))
        if self.use_pos:
            x = x + self.positional()
        return ag.reshape(x, x.shape[1:]) if squeeze else x


def patch_embed(image: Tensor, grid: PatchGrid, rng: np.random.Generator) -> Tensor:
    return PatchEmbed(grid, image.shape[-3], rng)(image)


def transformer_block(x: Tensor, cfg: AttentionConfig, rng: np.random.Generator, mlp_hidden: int = 128) -> Tensor:
    return TransformerBlock(cfg, mlp_hidden, rng)(x)


class ViT(Module):
    """Patch embedding followed by a stack of transformer blocks and a final norm."""

    def __init__(self, grid: PatchGrid, in_channels: int, depth: int, cfg: AttentionConfig,
                 mlp_hidden: int, rng: np.random.Generator):
        self.embed = PatchEmbed(grid, in_channels, rng)
        self.blocks = [TransformerBlock(cfg, mlp_hidden, rng) for _ in range(depth)]
        self.norm = LayerNorm(cfg.model_dim)

    def forward(self, image: Tensor) -> Tensor:
        x = self.embed(image)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)
