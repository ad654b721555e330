"""Full detector: content backbone, trace encoder, language stub and decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .content import ContentBackbone, ContentFeatureMap
from .decoder import FusionDecoder, MaskLogits, SingleCrossAttentionDecoder
from .nn import Module, PatchGrid
from .stub import MLLMStub, PromptSpec, Vocabulary, decode_text
from .trace_encoder import TraceEncoder, TraceFeatureMap


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    model_dim: int = 64
    num_heads: int = 4
    mlp_hidden: int = 128
    trace_channels: int = 16
    trace_depth: int = 4
    content_depth: int = 4
    d_llm: int = 128
    use_trace: bool = True
    decoder: str = "fusion"  # or "single"
    carry_trace: bool = True
    rectify: bool = True
    energy_skip: bool = True

    def grid(self) -> PatchGrid:
        return PatchGrid.for_image(self.image_size, self.image_size, self.patch_size, self.model_dim)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DetectorOutput:
    text_logits: Tensor  # [batch, 5, vocab]
    mask_logits: Tensor  # [batch, H, W]
    h_seg: Tensor


class Detector(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, vocab: Optional[Vocabulary] = None):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        grid = cfg.grid()
        self.grid = grid
        self.vocab = vocab or Vocabulary()
        self.prompt = PromptSpec.from_words(self.vocab)
        self.backbone = ContentBackbone(grid, depth=cfg.content_depth, num_heads=cfg.num_heads,
                                        mlp_hidden=cfg.mlp_hidden)
        self.trace = TraceEncoder(grid, rng, channels=cfg.trace_channels, depth=cfg.trace_depth,
                                  num_heads=cfg.num_heads, mlp_hidden=cfg.mlp_hidden, rectify=cfg.rectify,
                                  energy=cfg.energy_skip)
        skip = cfg.trace_channels if cfg.energy_skip and cfg.rectify else 0
        self.stub = MLLMStub(self.vocab, rng, d_content=cfg.model_dim, d_llm=cfg.d_llm, d_dec=cfg.model_dim)
        if cfg.decoder == "fusion":
            self.decoder = FusionDecoder(grid, rng, num_heads=cfg.num_heads, mlp_hidden=cfg.mlp_hidden,
                                         carry_trace=cfg.carry_trace, skip_channels=skip)
        elif cfg.decoder == "single":
            self.decoder = SingleCrossAttentionDecoder(grid, rng, num_heads=cfg.num_heads, skip_channels=skip)
        else:
            raise ValueError(f"unknown decoder kind {cfg.decoder!r}")

    def constrained_projection(self) -> None:
        self.trace.project_constraints()

    def encode_content(self, images: Tensor) -> ContentFeatureMap:
        return self.backbone(images)

    def encode_traces(self, images: Tensor) -> TraceFeatureMap:
        if not self.cfg.use_trace:
            b = images.shape[0]
            zeros = np.zeros((b, self.grid.n_patches, self.grid.embed_dim), dtype=images.dtype)
            return TraceFeatureMap(Tensor(zeros), self.grid)
        return self.trace(images)

    def forward(self, images, content: Optional[np.ndarray] = None) -> DetectorOutput:
        """images: [batch, 3, H, W] in [0, 1].  ``content`` may hold cached
        backbone features for the same images (the backbone is frozen)."""
        images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=ag.default_dtype()))
        if images.ndim == 3:
            images = ag.reshape(images, (1,) + images.shape)
        f_c = ContentFeatureMap(Tensor(content), self.grid) if content is not None else self.encode_content(images)
        f_t = self.encode_traces(images)
        hidden, logits = self.stub(f_c, self.prompt)
        h_seg = self.stub.extract_seg_embedding(hidden)
        mask: MaskLogits = self.decoder(f_c, f_t, h_seg)
        return DetectorOutput(logits, mask.logits, h_seg.embedding)

    def predict(self, images) -> tuple[np.ndarray, list[list[str]]]:
        """Probability masks [batch, H, W] and decoded texts."""
        with ag.no_grad():
            out = self.forward(images)
        probs = 1.0 / (1.0 + np.exp(-out.mask_logits.data.astype(np.float64)))
        texts = [decode_text(row, self.vocab) for row in out.text_logits.data]
        return probs, texts
