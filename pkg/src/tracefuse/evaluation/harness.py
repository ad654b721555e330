"""Evaluation over a manifest and a list of distortions.

The model is anything with ``predict(images[b,3,H,W]) -> (probs[b,H,W], texts)``.
Images whose size changed under RESIZE are resized back to the model input
size, and the predicted probabilities are resized down to the distorted size,
so metrics always compare against the nearest-resized ground truth.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..forge.dataset import DatasetManifest
from ..stub import FAKE
from .distort import DistortionKind, DistortionSpec, distort_pair, resize_image
from .metrics import f1_at, f1_optimal, pixel_auc

FIXED_THRESHOLD = 0.5
METRIC_KEYS = ("f1_fixed", "f1_optimal", "auc", "recall_fake")


@dataclass
class DistortionResult:
    distortion: str
    f1_fixed: float
    f1_optimal: float
    auc: float
    recall_fake: float
    n_images: int
    n_localized: int
    n_excluded: int

    def scores(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_KEYS}


@dataclass
class MetricsReport:
    dataset: str
    results: list = field(default_factory=list)

    def by_label(self, label: str) -> DistortionResult:
        for r in self.results:
            if r.distortion == label:
                return r
        raise KeyError(label)

    def to_text(self) -> str:
        """One ``key = value`` record per line, grouped by distortion."""
        lines = [f"dataset = {self.dataset}"]
        for r in self.results:
            for k, v in asdict(r).items():
                if k == "distortion":
                    continue
                val = f"{v:.6f}" if isinstance(v, float) else str(v)
                lines.append(f"{r.distortion}.{k} = {val}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["distortion", *METRIC_KEYS, "n_images"])
        for r in self.results:
            w.writerow([r.distortion, *(f"{getattr(r, k):.4f}" for k in METRIC_KEYS), r.n_images])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"dataset": self.dataset, "results": [asdict(r) for r in self.results]}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(d["dataset"], [DistortionResult(**r) for r in d["results"]])

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(self.to_text(), encoding="utf-8")
        (out / "metrics.csv").write_text(self.to_csv(), encoding="utf-8")
        (out / "metrics.json").write_text(self.to_json(), encoding="utf-8")


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


def score_images(probs: Sequence[np.ndarray], gts: Sequence[np.ndarray], texts, labels, name: str) -> DistortionResult:
    f1s, f1o, aucs = [], [], []
    excluded = 0
    for p, g in zip(probs, gts):
        auc = pixel_auc(p, g)
        if auc is None:
            excluded += 1
            continue
        aucs.append(auc)
        f1s.append(f1_at(p, g, FIXED_THRESHOLD))
        f1o.append(f1_optimal(p, g))
    fake = [FAKE in t for t, lab in zip(texts, labels) if lab == "FAKE"]
    return DistortionResult(name, _mean(f1s), _mean(f1o), _mean(aucs), _mean(fake),
                            len(probs), len(aucs), excluded)


def _predict(model, images: list, size: tuple[int, int], batch: int):
    probs, texts = [], []
    for i in range(0, len(images), batch):
        chunk = images[i:i + batch]
        shapes = [im.shape[1:] for im in chunk]
        x = np.stack([im if im.shape[1:] == size else resize_image(im, size) for im in chunk]).astype(np.float32)
        p, t = model.predict(x)
        for pi, s in zip(p, shapes):
            probs.append(pi if tuple(s) == size else np.clip(resize_image(pi[None], s)[0], 0.0, 1.0))
        texts.extend(t)
    return probs, texts


def evaluate(model, manifest: DatasetManifest, distortions: Iterable[DistortionSpec] = (DistortionSpec(),),
             batch: int = 32, seed: int = 0) -> MetricsReport:
    images, masks = manifest.load_arrays()
    labels = [r.label for r in manifest.records]
    size = tuple(images.shape[2:])
    report = MetricsReport(str(manifest.root))
    for spec in distortions:
        pairs = [distort_pair(images[i], masks[i], spec, seed=seed + i) for i in range(len(images))]
        probs, texts = _predict(model, [p[0] for p in pairs], size, batch)
        report.results.append(score_images(probs, [p[1] for p in pairs], texts, labels, spec.label))
    return report


class OracleModel:
    """Returns stored probability maps for known images (test plumbing)."""

    def __init__(self, images: np.ndarray, maps: np.ndarray, fake_text: bool = True):
        self._maps = {np.asarray(im, np.float32).tobytes(): m for im, m in zip(images, maps)}
        self.fake_text = fake_text

    def predict(self, x):
        probs = np.stack([self._maps[np.asarray(im, np.float32).tobytes()] for im in x]).astype(np.float64)
        texts = [[FAKE if (m.any() and self.fake_text) else "<REAL>"] for m in probs]
        return probs, texts


def write_mask_png(path, probs: np.ndarray) -> None:
    """Lossless 8-bit mask image: round(255 * p)."""
    from ..forge.dataset import write_png
    write_png(Path(path), np.round(np.clip(probs, 0, 1) * 255).astype(np.uint8))


__all__ = ["MetricsReport", "DistortionResult", "evaluate", "score_images", "OracleModel", "write_mask_png",
           "DistortionKind"]
