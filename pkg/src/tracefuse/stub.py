"""Small trainable stand-in for the multimodal language model.

The stub reads mean-pooled content features and a prompt, and emits a fixed
five-slot hidden sequence whose input tokens are::

    position: 0      1          2          3       4
    input:    <BOS>  class      type       [SEG]   <EOS>

Logit row ``i`` predicts the token at input position ``i + 1`` (the usual
next-token shift), so the target text is ``[class, type, [SEG], <EOS>,
<PAD>]`` and the hidden state at position 3 is the one sitting on the
[SEG] token.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .content import ContentFeatureMap
from .nn import MLP2, Linear, Module, Parameter

PAD, BOS, EOS = "<PAD>", "<BOS>", "<EOS>"
SEG, NOSEG = "[SEG]", "[NOSEG]"
REAL, FAKE = "<REAL>", "<FAKE>"
TYPE_TOKENS = ("NONE", "SPLICE", "COPY_MOVE", "REMOVE")
SPECIAL_TOKENS = (PAD, BOS, EOS, SEG, NOSEG, REAL, FAKE)
PROMPT_WORDS = ("is", "this", "image", "manipulated", "?", "please", "segment", "the", "tampered", "region")

DEFAULT_TOKENS = SPECIAL_TOKENS + TYPE_TOKENS + PROMPT_WORDS
DEFAULT_PROMPT = ("is", "this", "image", "manipulated", "?", "please", "segment", "the", "tampered", "region")

SEQ_LEN = 5
SEG_POSITION = 3


class VocabularyError(ValueError):
    pass


class Vocabulary:
    """Ordered token list with exact id <-> string mapping."""

    def __init__(self, tokens: Sequence[str] = DEFAULT_TOKENS, special: Sequence[str] = SPECIAL_TOKENS):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        for tok in (SEG, REAL, FAKE, EOS):
            if tokens.count(tok) != 1:
                raise VocabularyError(f"special token {tok} must appear exactly once")
        self.tokens = tokens
        self.special = set(special)
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.special == other.special

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise VocabularyError(f"token id {idx} out of range")
        return self.tokens[idx]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.token(int(i)) for i in ids]

    def dumps(self) -> str:
        lines = [f"{t}\tspecial" if t in self.special else t for t in self.tokens]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        tokens, special = [], []
        for line in text.splitlines():
            if not line:
                continue
            tok, _, flag = line.partition("\t")
            tokens.append(tok)
            if flag == "special":
                special.append(tok)
        return cls(tokens, special)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


@dataclass
class PromptSpec:
    ids: list[int]

    @classmethod
    def from_words(cls, vocab: Vocabulary, words: Sequence[str] = DEFAULT_PROMPT) -> "PromptSpec":
        return cls(vocab.encode(words))

    def validate(self, vocab_size: int) -> None:
        if not self.ids:
            raise ValueError("prompt is empty")
        if max(self.ids) >= vocab_size or min(self.ids) < 0:
            raise ValueError(f"prompt ids must lie in [0, {vocab_size})")


@dataclass
class HiddenStates:
    states: Tensor  # [batch, SEQ_LEN, d_llm]
    seg_position: int = SEG_POSITION

    def __post_init__(self):
        if not 0 <= self.seg_position < self.states.shape[-2]:
            raise ValueError(f"seg_position {self.seg_position} outside sequence of {self.states.shape[-2]}")


@dataclass
class SegPromptEmbedding:
    embedding: Tensor  # [batch, d_dec]


class MLLMStub(Module):
    def __init__(self, vocab: Vocabulary, rng: np.random.Generator, d_content: int = 64, d_llm: int = 128,
                 d_dec: int = 64, d_prompt: int = 32, hidden: int = 256):
        self.vocab = vocab
        self.d_llm = d_llm
        self.d_dec = d_dec
        self.token_embed = Parameter(rng.normal(0.0, 0.02, size=(len(vocab), d_prompt)))
        self.body = MLP2(d_content + d_prompt, hidden, SEQ_LEN * d_llm, rng)
        self.slot_embed = Parameter(rng.normal(0.0, 0.02, size=(SEQ_LEN, d_llm)))
        self.lm_head = Linear(d_llm, len(vocab), rng)
        self.lm_head.weight.data *= 0.1
        # gamma: hidden state at [SEG] -> decoder prompt embedding
        self.seg_proj = MLP2(d_llm, 2 * d_llm, d_dec, rng)

    def prompt_embedding(self, prompt: PromptSpec) -> Tensor:
        prompt.validate(len(self.vocab))
        return ag.take(self.token_embed, prompt.ids, axis=0).mean(axis=0)

    def forward(self, content: ContentFeatureMap, prompt: PromptSpec) -> tuple[HiddenStates, Tensor]:
        feats = content.features
        if feats.ndim == 2:
            feats = ag.reshape(feats, (1,) + feats.shape)
        b = feats.shape[0]
        pooled = feats.mean(axis=1)
        p = self.prompt_embedding(prompt)
        p = ag.reshape(p, (1, p.shape[0])) * Tensor(np.ones((b, 1), dtype=p.dtype))
        z = ag.concat([pooled, p], axis=1)
        h = ag.reshape(self.body(z), (b, SEQ_LEN, self.d_llm)) + self.slot_embed
        h = ag.layer_norm(h)
        logits = self.lm_head(h)
        return HiddenStates(h), logits

    def extract_seg_embedding(self, hidden: HiddenStates) -> SegPromptEmbedding:
        row = hidden.states[:, hidden.seg_position, :]
        return SegPromptEmbedding(self.seg_proj(row))


def stub_forward(stub: MLLMStub, content: ContentFeatureMap, prompt: PromptSpec) -> tuple[HiddenStates, Tensor]:
    return stub(content, prompt)


def extract_seg_embedding(stub: MLLMStub, hidden: HiddenStates) -> SegPromptEmbedding:
    return stub.extract_seg_embedding(hidden)


def decode_text(logits, vocab: Vocabulary) -> list[str]:
    """Greedy argmax per slot; ties go to the lower token id.

    Accepts [SEQ_LEN, vocab] logits (a single sequence).
    """
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if not np.isfinite(arr).all():
        raise ValueError("logits must be finite")
    return vocab.decode(np.argmax(arr, axis=-1))


def encode_text(tokens: Sequence[str], vocab: Vocabulary, margin: float = 10.0) -> np.ndarray:
    """One-hot logits whose greedy decode is ``tokens``."""
    out = np.zeros((len(tokens), len(vocab)))
    out[np.arange(len(tokens)), vocab.encode(tokens)] = margin
    return out
