"""Training loop: AdamW, linear warmup/decay, constraint projection, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor, load_arrays, save_arrays
from .config import TrainConfig
from .forge.dataset import DatasetManifest
from .forge.rng import Xoshiro256
from .losses import mask_loss, text_loss, total_loss
from .model import Detector, ModelConfig
from .stub import Vocabulary

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> peak over ``warmup_iters``, then linear decay to 0
    at ``total_iters``."""
    if not 0 <= it <= cfg.total_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters}]")
    peak = cfg.learning_rate
    if cfg.warmup_iters and it < cfg.warmup_iters:
        return peak * it / cfg.warmup_iters
    span = cfg.total_iters - cfg.warmup_iters
    if span == 0:
        return peak
    return peak * (cfg.total_iters - it) / span


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class StepLog:
    step: int
    lr: float
    loss: float
    text: float
    mask: float
    constraint_violation: float


@dataclass
class TrainResult:
    model: Detector
    cfg: TrainConfig
    history: list = field(default_factory=list)
    seconds: float = 0.0
    rng_state: Optional[np.ndarray] = None


class BatchSampler:
    """Epoch-wise shuffled mini-batches from a xoshiro stream."""

    def __init__(self, n: int, batch_size: int, rng: Xoshiro256):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order: list[int] = []

    def next(self) -> np.ndarray:
        out = []
        while len(out) < self.batch_size:
            if not self._order:
                self._order = list(np.argsort(self.rng.random(self.n), kind="stable"))
            out.append(self._order.pop())
        return np.array(out)


def text_targets(records, vocab: Vocabulary) -> np.ndarray:
    return np.array([vocab.encode(r.text) for r in records], dtype=np.int64)


def content_cache(model: Detector, images: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Backbone features for every image (the backbone is frozen)."""
    feats = []
    with ag.no_grad():
        for i in range(0, len(images), chunk):
            feats.append(model.encode_content(Tensor(images[i:i + chunk])).features.data)
    return np.concatenate(feats)


def compute_losses(model: Detector, images: np.ndarray, masks: np.ndarray, targets: np.ndarray,
                   cfg: TrainConfig, content: Optional[np.ndarray] = None):
    out = model(Tensor(images), content=content)
    lt = text_loss(out.text_logits, targets)
    lm = mask_loss(out.mask_logits, masks, cfg.loss_weights)
    return total_loss(lt, lm, cfg.loss_weights), lt, lm


def train_step(model: Detector, opt: AdamW, batches, cfg: TrainConfig, lr: float) -> tuple[float, float, float]:
    """One optimizer step over ``grad_accum_steps`` micro-batches.

    Each micro-batch loss is scaled by 1/k so the accumulated gradient equals
    that of the mean loss over all k*b samples.
    """
    opt.zero_grad()
    k = len(batches)
    tot = txt = msk = 0.0
    for images, masks, targets, content in batches:
        with ag.Tape() as tape:
            loss, lt, lm = compute_losses(model, images, masks, targets, cfg, content)
            scaled = loss * (1.0 / k)
        tape.backward(scaled)
        tot += loss.item() / k
        txt += lt.item() / k
        msk += lm.item() / k
    opt.step(lr)
    model.constrained_projection()
    return tot, txt, msk


def train(cfg: TrainConfig, manifest: DatasetManifest, *, model: Optional[Detector] = None,
          on_step: Optional[Callable[[StepLog, Detector], None]] = None) -> TrainResult:
    """Train a detector on ``manifest``; returns the model and per-step logs."""
    start = time.perf_counter()
    model = model or Detector(cfg.model_config(), seed=cfg.seed)
    images, masks = manifest.load_arrays()
    if images.shape[-1] != cfg.image_size:
        raise TrainingError(f"dataset images are {images.shape[-1]}px, config expects {cfg.image_size}px")
    targets = text_targets(manifest.records, model.vocab)
    feats = content_cache(model, images)
    params = model.trainable_parameters()
    opt = AdamW(params, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    rng = Xoshiro256(cfg.seed).derive(0x7EA1)
    sampler = BatchSampler(len(images), cfg.batch_size, rng)
    history = []
    for step in range(1, cfg.total_iters + 1):
        batches = []
        for _ in range(cfg.grad_accum_steps):
            idx = sampler.next()
            batches.append((images[idx], masks[idx], targets[idx], feats[idx]))
        lr = lr_at(step, cfg)
        tot, txt, msk = train_step(model, opt, batches, cfg, lr)
        for name, val in (("total", tot), ("text", txt), ("mask", msk)):
            if not math.isfinite(val):
                raise TrainingError(f"non-finite {name} loss {val} at step {step}")
        entry = StepLog(step, lr, tot, txt, msk, model.trace.max_constraint_violation())
        history.append(entry)
        if on_step is not None:
            on_step(entry, model)
        if step % cfg.log_every == 0 or step == 1:
            log.info("step %d lr %.2e loss %.4f (text %.4f mask %.4f)", step, lr, tot, txt, msk)
    return TrainResult(model, cfg, history, time.perf_counter() - start, rng.get_state())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _text_array(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).copy()


def _array_text(a: np.ndarray) -> str:
    return a.astype(np.uint8).tobytes().decode("utf-8")


def save_checkpoint(path, model: Detector, cfg: TrainConfig, iteration: int,
                    rng_state: Optional[np.ndarray] = None) -> None:
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays["meta/train_config"] = _text_array(json.dumps(asdict(cfg), sort_keys=True))
    arrays["meta/vocab"] = _text_array(model.vocab.dumps())
    arrays["meta/iteration"] = np.array([iteration], dtype=np.int64)
    arrays["meta/rng_state"] = np.asarray(rng_state if rng_state is not None else np.zeros(4), dtype=np.uint64)
    save_arrays(path, arrays)


@dataclass
class Checkpoint:
    model: Detector
    cfg: TrainConfig
    iteration: int
    rng_state: np.ndarray


def load_checkpoint(path) -> Checkpoint:
    arrays = load_arrays(path)
    try:
        cfg = TrainConfig(**json.loads(_array_text(arrays["meta/train_config"])))
        vocab = Vocabulary.loads(_array_text(arrays["meta/vocab"]))
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint lacks {exc}") from None
    model = Detector(cfg.model_config(), seed=cfg.seed, vocab=vocab)
    state = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    return Checkpoint(model, cfg, int(arrays["meta/iteration"][0]), arrays["meta/rng_state"])


def model_config_of(cfg: TrainConfig) -> ModelConfig:
    return cfg.model_config()
