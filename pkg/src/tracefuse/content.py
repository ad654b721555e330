"""Frozen content backbone.

Random weights drawn from a fixed seed stand in for a pretrained vision
encoder.  The parameters never receive gradients and are excluded from the
optimizer; :func:`parameter_checksum` lets callers prove that.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeMismatchError, Tensor
from .nn import AttentionConfig, Module, PatchGrid, ViT

BACKBONE_SEED = 42


@dataclass
class ContentFeatureMap:
    features: Tensor  # [batch, n_patches, d]
    grid: PatchGrid

    def __post_init__(self):
        if self.features.shape[-2] != self.grid.n_patches:
            raise ShapeMismatchError(
                f"{self.features.shape[-2]} patches do not match grid {self.grid.grid_h}x{self.grid.grid_w}"
            )


class ContentBackbone(Module):
    def __init__(self, grid: PatchGrid, depth: int = 4, num_heads: int = 4, mlp_hidden: int = 128,
                 seed: int = BACKBONE_SEED):
        rng = np.random.default_rng(seed)
        self.grid = grid
        self.vit = ViT(grid, 3, depth, AttentionConfig(grid.embed_dim, num_heads), mlp_hidden, rng)
        self.freeze()

    def forward(self, image: Tensor) -> ContentFeatureMap:
        if image.ndim == 3:
            image = ag.reshape(image, (1,) + image.shape)
        # inputs never require grad here, so nothing is taped
        with ag.no_grad():
            feats = self.vit(image.detach())
        return ContentFeatureMap(feats, self.grid)


def encode_content(image: Tensor, backbone: ContentBackbone) -> ContentFeatureMap:
    return backbone(image)


def parameter_checksum(module: Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
