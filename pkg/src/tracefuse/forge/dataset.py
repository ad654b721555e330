"""Dataset assembly: sample mixes, PNG output and the JSON-lines manifest."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image

from .rng import Xoshiro256
from .scenes import ForgeConfig, ImageSample, ManipulationType, config_hash, generate

MANIFEST = "manifest.jsonl"
CONFIG = "config.json"
MIX_TOLERANCE = 1e-9


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRecord:
    image: str
    mask: str
    label: str
    manip: str
    text: list
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {"image": self.image, "mask": self.mask, "label": self.label, "manip": self.manip,
             "text": self.text, "seed": self.seed},
            separators=(",", ":"),
        )


@dataclass
class DatasetManifest:
    root: Path
    records: list = field(default_factory=list)
    config: ForgeConfig = field(default_factory=ForgeConfig)
    config_hash: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def load_sample(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        rec = self.records[i]
        img = read_png(self.root / rec.image)
        mask = (read_png(self.root / rec.mask) > 0).astype(np.uint8)
        return img, mask[0]

    def load_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All images [n, 3, h, w] float32 and masks [n, h, w] uint8."""
        pairs = [self.load_sample(i) for i in range(len(self.records))]
        return np.stack([p[0] for p in pairs]).astype(np.float32), np.stack([p[1] for p in pairs])

    def validate(self) -> None:
        if self.config_hash != config_hash(self.config):
            raise ManifestError(f"config hash {self.config_hash} does not match generator settings")
        for rec in self.records:
            for rel in (rec.image, rec.mask):
                if not (self.root / rel).is_file():
                    raise ManifestError(f"missing file {self.root / rel}")


def write_png(path: Path, arr: np.ndarray) -> None:
    """arr: [3, h, w] or [h, w] float in [0, 1] or uint8."""
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        a = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    if a.ndim == 3:
        a = a.transpose(1, 2, 0)
    Image.fromarray(a).save(path, format="PNG", optimize=False, compress_level=6)


def read_png(path: Path) -> np.ndarray:
    a = np.asarray(Image.open(path))
    if a.ndim == 2:
        return a[None].astype(np.float64) / 255.0
    return a.transpose(2, 0, 1)[:3].astype(np.float64) / 255.0


def mix_counts(n: int, mix: Mapping) -> dict[ManipulationType, int]:
    """Exact per-type counts (largest remainder, ties by type order)."""
    mix = {ManipulationType(k): float(v) for k, v in mix.items()}
    if any(v < 0 for v in mix.values()):
        raise ValueError("mix fractions must be non-negative")
    total = sum(mix.values())
    if abs(total - 1.0) > MIX_TOLERANCE:
        raise ValueError(f"mix fractions must sum to 1, got {total:g}")
    order = [m for m in ManipulationType if m in mix]
    raw = {m: n * mix[m] for m in order}
    counts = {m: math.floor(raw[m]) for m in order}
    left = n - sum(counts.values())
    for m in sorted(order, key=lambda m: -(raw[m] - counts[m]))[:left]:
        counts[m] += 1
    return counts


def parse_mix(text: str) -> dict[ManipulationType, float]:
    """'splice=0.25,copy_move=0.25,...' or four comma-separated numbers in type order."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if all("=" in p for p in parts):
        return {ManipulationType(k.strip().upper()): float(v) for k, v in (p.split("=", 1) for p in parts)}
    values = [float(p) for p in parts]
    if len(values) != len(ManipulationType):
        raise ValueError(f"expected {len(ManipulationType)} mix fractions, got {len(values)}")
    return dict(zip(ManipulationType, values))


def plan(n: int, mix: Mapping, seed: int) -> list[tuple[ManipulationType, int]]:
    """Shuffled (type, sample_seed) list, a pure function of its arguments."""
    counts = mix_counts(n, mix)
    kinds = [m for m in ManipulationType for _ in range(counts.get(m, 0))]
    rng = Xoshiro256(seed)
    # Fisher-Yates
    for i in range(len(kinds) - 1, 0, -1):
        j = rng.integers(0, i + 1)
        kinds[i], kinds[j] = kinds[j], kinds[i]
    seeds = rng.next_u64(len(kinds))
    return [(k, int(s)) for k, s in zip(kinds, seeds)]


def generate_samples(n: int, mix: Mapping, seed: int, cfg: ForgeConfig = ForgeConfig()) -> list[ImageSample]:
    return [generate(kind, s, cfg) for kind, s in plan(n, mix, seed)]


def build_dataset(n: int, mix: Mapping, seed: int, out_dir, cfg: ForgeConfig = ForgeConfig()) -> DatasetManifest:
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (kind, s) in enumerate(plan(n, mix, seed)):
        sample = generate(kind, s, cfg)
        img_rel, mask_rel = f"images/{i:05d}.png", f"masks/{i:05d}.png"
        write_png(root / img_rel, sample.image)
        write_png(root / mask_rel, (sample.mask * 255).astype(np.uint8))
        records.append(ManifestRecord(img_rel, mask_rel, sample.label, sample.manip.value, sample.text, s))
    digest = config_hash(cfg)
    with open(root / MANIFEST, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    meta = {"config": json.loads(cfg.canonical()), "config_hash": digest, "n": n,
            "mix": {k.value: v for k, v in mix_counts(n, mix).items()}, "seed": seed}
    (root / CONFIG).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return DatasetManifest(root, records, cfg, digest)


def _config_from_dict(d: dict) -> ForgeConfig:
    fields = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return ForgeConfig(**fields)


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    if root.is_file():
        root = root.parent
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise ManifestError(f"no {MANIFEST} in {root}")
    records = []
    with open(mpath, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                records.append(ManifestRecord(d["image"], d["mask"], d["label"], d["manip"], d["text"], int(d["seed"])))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ManifestError(f"{mpath}:{ln}: bad record ({exc})") from None
    cfg, digest = ForgeConfig(), ""
    cpath = root / CONFIG
    if cpath.is_file():
        meta = json.loads(cpath.read_text(encoding="utf-8"))
        cfg = _config_from_dict(meta["config"])
        digest = meta["config_hash"]
    manifest = DatasetManifest(root, records, cfg, digest)
    manifest.validate()
    return manifest
