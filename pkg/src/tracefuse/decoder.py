"""Fusion-attention mask decoder.

Three fusion layers update a small token set (the projected [SEG] embedding
plus learned auxiliary tokens).  Layer 1 attends to the trace embedding,
layers 2 and 3 to the content embedding, which is carried from layer 2 into
layer 3.  With ``carry_trace`` (default) the trace embedding updated by
layer 1 is added to the content embedding that enters layer 2, so per-patch
trace evidence reaches the mask head and not only the token stream.  Each layer runs four steps, each a pre-norm residual update:

1. self-attention over the tokens
2. cross-attention, tokens as queries, embedding as keys/values
3. point-wise MLP on the tokens
4. cross-attention, embedding as queries, tokens as keys/values

Positional embeddings are re-added to the spatial embedding (queries/keys)
at steps 2 and 4.  The final content embedding is upsampled by two
transposed-conv stages to image resolution and dotted with an MLP of the
final [SEG] token to give per-pixel mask logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import ShapeMismatchError, Tensor
from .content import ContentFeatureMap
from .nn import MLP2, AttentionConfig, LayerNorm, Module, MultiHeadAttention, Parameter, PatchGrid
from .stub import SegPromptEmbedding
from .trace_encoder import TraceFeatureMap

FUSION_STEPS = ("self_attn", "token_to_embedding", "mlp", "embedding_to_token")


@dataclass
class FusionState:
    tokens: Tensor  # [batch, n_tok, d]
    embedding: Tensor  # [batch, n_patch, d]

    def __post_init__(self):
        if self.tokens.shape[-2] < 1:
            raise ShapeMismatchError("fusion state needs at least one token")
        if self.tokens.shape[-1] != self.embedding.shape[-1]:
            raise ShapeMismatchError(
                f"token dim {self.tokens.shape[-1]} != embedding dim {self.embedding.shape[-1]}"
            )


@dataclass
class MaskLogits:
    logits: Tensor  # [batch, h, w]


class FusionLayer(Module):
    def __init__(self, cfg: AttentionConfig, mlp_hidden: int, rng: np.random.Generator):
        d = cfg.model_dim
        self.norm_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(cfg, rng)
        self.norm_t2e_tok = LayerNorm(d)
        self.norm_t2e_emb = LayerNorm(d)
        self.token_to_embedding = MultiHeadAttention(cfg, rng)
        self.norm_mlp = LayerNorm(d)
        self.mlp = MLP2(d, mlp_hidden, d, rng)
        self.norm_e2t_emb = LayerNorm(d)
        self.norm_e2t_tok = LayerNorm(d)
        self.embedding_to_token = MultiHeadAttention(cfg, rng)
        self._log: Optional[list] = None

    def _mark(self, step: str) -> None:
        if self._log is not None:
            self._log.append(step)

    def forward(self, state: FusionState, pos: Optional[Tensor]) -> FusionState:
        t, e = state.tokens, state.embedding
        if t.shape[-1] != self.self_attn.cfg.model_dim:
            raise ShapeMismatchError(f"fusion layer expects dim {self.self_attn.cfg.model_dim}, got {t.shape}")

        self._mark("self_attn")
        h = self.norm_self(t)
        t = t + self.self_attn(h, h)

        self._mark("token_to_embedding")
        q = self.norm_t2e_tok(t)
        ev = self.norm_t2e_emb(e)
        ek = ev + pos if pos is not None else ev
        t = t + self.token_to_embedding(q, ev, ek)

        self._mark("mlp")
        t = t + self.mlp(self.norm_mlp(t))

        self._mark("embedding_to_token")
        eq = self.norm_e2t_emb(e)
        if pos is not None:
            eq = eq + pos
        tv = self.norm_e2t_tok(t)
        e = e + self.embedding_to_token(eq, tv)
        return FusionState(t, e)


def fusion_layer(layer: FusionLayer, state: FusionState, pos: Optional[Tensor] = None) -> FusionState:
    return layer(state, pos)


class MaskHead(Module):
    """Upsample the embedding grid by ``patch_size`` and dot with a token MLP."""

    def __init__(self, grid: PatchGrid, rng: np.random.Generator, mid_channels: int = 32, out_channels: int = 16,
                 skip_channels: int = 0):
        d = grid.embed_dim
        self.grid = grid
        p = grid.patch_size
        if p % 2:
            raise ValueError("patch size must be even for the two-stage upsampler")
        self.stride1, self.stride2 = 2, p // 2
        self.up1 = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, mid_channels, 2, 2)))
        self.up1_bias = Parameter(np.zeros((mid_channels, 1, 1)))
        self.up2 = Parameter(rng.normal(0.0, 1.0 / np.sqrt(mid_channels),
                                        size=(mid_channels, out_channels, self.stride2, self.stride2)))
        self.up2_bias = Parameter(np.zeros((out_channels, 1, 1)))
        self.hyper = MLP2(d, d, out_channels, rng)
        self.skip_channels = skip_channels
        if skip_channels:
            self.skip = Parameter(rng.normal(0.0, 1.0 / np.sqrt(skip_channels),
                                             size=(out_channels, skip_channels, 1, 1)))
            self.skip_bias = Parameter(np.zeros((out_channels, 1, 1)))

    def upsample(self, emb: Tensor) -> Tensor:
        b, n, d = emb.shape
        g = self.grid
        x = ag.transpose(ag.reshape(emb, (b, g.grid_h, g.grid_w, d)), (0, 3, 1, 2))
        x = ag.gelu(ag.upsample_transposed_conv(x, self.up1, self.stride1) + self.up1_bias)
        return ag.gelu(ag.upsample_transposed_conv(x, self.up2, self.stride2) + self.up2_bias)

    def forward(self, emb: Tensor, token: Tensor, skip: Optional[Tensor] = None) -> Tensor:
        """``skip``: optional full-resolution map [b, skip_channels, H, W]
        added to the upsampled features through a 1x1 projection and GELU
        (the nonlinearity lets one channel respond to deviations of either
        sign)."""
        feat = self.upsample(emb)  # [b, c, H, W]
        if skip is not None and self.skip_channels:
            feat = feat + ag.gelu(ag.conv2d(skip, self.skip) + self.skip_bias)
        b, c, h, w = feat.shape
        weights = ag.reshape(self.hyper(token), (b, 1, c))
        logits = ag.matmul(weights, ag.reshape(feat, (b, c, h * w)))
        return ag.reshape(logits, (b, h, w))


class FusionDecoder(Module):
    """Three fusion layers on (trace, content, content), then the mask head."""

    EMBEDDING_SCHEDULE = ("trace", "content", "content")

    def __init__(self, grid: PatchGrid, rng: np.random.Generator, num_heads: int = 4, mlp_hidden: int = 128,
                 n_aux_tokens: int = 3, use_pos: bool = True, carry_trace: bool = True, skip_channels: int = 0):
        d = grid.embed_dim
        self.grid = grid
        cfg = AttentionConfig(d, num_heads)
        self.aux_tokens = Parameter(rng.normal(0.0, 1.0, size=(n_aux_tokens, d)))
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(grid.n_patches, d)))
        self.carry_trace = carry_trace
        self.layers = [FusionLayer(cfg, mlp_hidden, rng) for _ in self.EMBEDDING_SCHEDULE]
        self.norm_tokens = LayerNorm(d)
        self.norm_emb = LayerNorm(d)
        self.head = MaskHead(grid, rng, skip_channels=skip_channels)
        self.use_pos = use_pos
        self._schedule_log: Optional[list] = None

    def record_steps(self, log: Optional[list]) -> None:
        """Route the per-step call trace of every layer into ``log`` (None disables)."""
        self._schedule_log = log
        for layer in self.layers:
            layer._log = log

    def initial_tokens(self, h_seg: Tensor) -> Tensor:
        b, d = h_seg.shape
        seg = ag.reshape(h_seg, (b, 1, d))
        aux = ag.reshape(self.aux_tokens, (1,) + self.aux_tokens.shape) * Tensor(np.ones((b, 1, 1), dtype=h_seg.dtype))
        return ag.concat([seg, aux], axis=1)

    def fuse(self, f_c: ContentFeatureMap, f_t: TraceFeatureMap, h_seg: SegPromptEmbedding) -> FusionState:
        if f_c.grid != f_t.grid or f_c.grid != self.grid:
            raise ShapeMismatchError(f"grid mismatch: content {f_c.grid}, trace {f_t.grid}, decoder {self.grid}")
        emb = h_seg.embedding
        if emb.ndim == 1:
            emb = ag.reshape(emb, (1, emb.shape[0]))
        if emb.shape[-1] != self.grid.embed_dim:
            raise ShapeMismatchError(f"h_seg dim {emb.shape[-1]} != decoder dim {self.grid.embed_dim}")
        pos = self.pos if self.use_pos else None
        tokens = self.initial_tokens(emb)
        sources = {"trace": f_t.features, "content": f_c.features}
        content = trace = None
        for layer, kind in zip(self.layers, self.EMBEDDING_SCHEDULE):
            if self._schedule_log is not None:
                self._schedule_log.append(f"layer:{kind}")
            if kind == "content":
                if content is None:
                    content = sources["content"]
                    if self.carry_trace and trace is not None:
                        content = content + trace
                src = content
            else:
                src = sources[kind]
            state = layer(FusionState(tokens, src), pos)
            tokens = state.tokens
            if kind == "content":
                content = state.embedding
            else:
                trace = state.embedding
        return FusionState(self.norm_tokens(tokens), self.norm_emb(content))

    def forward(self, f_c: ContentFeatureMap, f_t: TraceFeatureMap, h_seg: SegPromptEmbedding) -> MaskLogits:
        state = self.fuse(f_c, f_t, h_seg)
        seg_token = state.tokens[:, 0, :]
        return MaskLogits(self.head(state.embedding, seg_token, f_t.energy))


class SingleCrossAttentionDecoder(Module):
    """Ablation decoder without the fusion mechanism.

    One cross-attention from the tokens to the summed content+trace
    embedding, then the same mask head on that (non-updated) embedding.
    """

    def __init__(self, grid: PatchGrid, rng: np.random.Generator, num_heads: int = 4, n_aux_tokens: int = 3,
                 skip_channels: int = 0):
        d = grid.embed_dim
        self.grid = grid
        cfg = AttentionConfig(d, num_heads)
        self.aux_tokens = Parameter(rng.normal(0.0, 1.0, size=(n_aux_tokens, d)))
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(grid.n_patches, d)))
        self.norm_tok = LayerNorm(d)
        self.norm_emb = LayerNorm(d)
        self.cross = MultiHeadAttention(cfg, rng)
        self.head = MaskHead(grid, rng, skip_channels=skip_channels)

    def forward(self, f_c: ContentFeatureMap, f_t: TraceFeatureMap, h_seg: SegPromptEmbedding) -> MaskLogits:
        if f_c.grid != f_t.grid:
            raise ShapeMismatchError(f"grid mismatch: content {f_c.grid}, trace {f_t.grid}")
        emb = h_seg.embedding
        b, d = emb.shape
        aux = ag.reshape(self.aux_tokens, (1,) + self.aux_tokens.shape) * Tensor(np.ones((b, 1, 1), dtype=emb.dtype))
        tokens = ag.concat([ag.reshape(emb, (b, 1, d)), aux], axis=1)
        e = self.norm_emb(f_c.features + f_t.features)
        tokens = tokens + self.cross(self.norm_tok(tokens), e, e + self.pos)
        return MaskLogits(self.head(e, tokens[:, 0, :], f_t.energy))


def decode_mask(decoder: Module, f_c: ContentFeatureMap, f_t: TraceFeatureMap, h_seg: SegPromptEmbedding) -> MaskLogits:
    return decoder(f_c, f_t, h_seg)
