"""Procedural scenes and the three tampering operations.

A scene is a smooth colour gradient with 2-5 ellipses on top.  Every region
carries its own additive Gaussian noise: the background has ``bg_sigma``,
each shape a sigma drawn from ``shape_sigma``.  Tampering leaves a noise
signature that differs from its surroundings:

* splice pastes an elliptical region from a donor scene rendered with a much
  larger camera noise;
* copy-move duplicates a rectangle of the same image at a disjoint location;
* remove erases an elliptical region and refills it with a plane fitted to
  the surrounding ring plus weak noise.

Sigmas are in 8-bit units.  Images are quantised to 8 bits on return so
that on-disk PNGs and in-memory samples agree exactly.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import Xoshiro256

MAX_ATTEMPTS = 100


class GenerationError(RuntimeError):
    pass


class ManipulationType(str, enum.Enum):
    SPLICE = "SPLICE"
    COPY_MOVE = "COPY_MOVE"
    REMOVE = "REMOVE"
    AUTHENTIC = "AUTHENTIC"


@dataclass(frozen=True)
class ForgeConfig:
    size: int = 64
    n_shapes: tuple = (2, 5)
    shape_radius: tuple = (5, 14)
    bg_sigma: tuple = (3.0, 6.0)
    shape_sigma: tuple = (4.0, 10.0)
    splice_sigma: tuple = (14.0, 22.0)
    splice_margin: float = 6.0
    fill_sigma: tuple = (0.0, 1.5)
    area_frac: tuple = (0.02, 0.25)
    rect_side: tuple = (10, 28)
    feather: bool = False

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def config_hash(cfg: ForgeConfig) -> str:
    return f"{fnv1a64(cfg.canonical().encode('utf-8')):016x}"


@dataclass
class Shape:
    mask: np.ndarray  # full ellipse footprint, bool [h, w]
    sigma: float
    color: np.ndarray
    center: tuple
    radii: tuple


@dataclass
class Scene:
    image: np.ndarray  # [3, h, w] float in [0, 1], 8-bit quantised
    clean: np.ndarray  # noiseless rendering
    bg_sigma: float
    shapes: list = field(default_factory=list)

    def visible_mask(self, i: int) -> np.ndarray:
        """Pixels where shape ``i`` is on top."""
        vis = self.shapes[i].mask.copy()
        for s in self.shapes[i + 1:]:
            vis &= ~s.mask
        return vis


@dataclass
class ImageSample:
    image: np.ndarray  # [3, h, w] float in [0, 1]
    mask: np.ndarray  # [h, w] uint8 in {0, 1}
    label: str  # "REAL" | "FAKE"
    manip: ManipulationType
    text: list
    seed: int

    def check(self, cfg: ForgeConfig) -> None:
        area = int(self.mask.sum())
        fake = self.label == "FAKE"
        if fake != (area > 0):
            raise GenerationError(f"label {self.label} inconsistent with mask area {area}")
        if (self.manip == ManipulationType.AUTHENTIC) != (area == 0):
            raise GenerationError(f"{self.manip.value} inconsistent with mask area {area}")
        if fake:
            frac = area / self.mask.size
            lo, hi = cfg.area_frac
            if not lo <= frac <= hi:
                raise GenerationError(f"mask area fraction {frac:.4f} outside [{lo}, {hi}]")


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def ellipse_mask(size: int, center, radii, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = (dx * c + dy * s) / radii[1]
    v = (-dx * s + dy * c) / radii[0]
    return u * u + v * v <= 1.0


def _gradient(rng: Xoshiro256, size: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.75, size=3)
    slope = rng.uniform(-0.25, 0.25, size=(3, 2))
    ramp = np.linspace(-0.5, 0.5, size)
    gy, gx = np.meshgrid(ramp, ramp, indexing="ij")
    return base[:, None, None] + slope[:, 0, None, None] * gy + slope[:, 1, None, None] * gx


def render_scene(seed: int, cfg: ForgeConfig = ForgeConfig(), bg_sigma: float | None = None,
                 shape_sigma: float | None = None) -> Scene:
    """Deterministic scene from ``seed``; optional overrides pin every sigma."""
    rng = Xoshiro256(seed)
    n = cfg.size
    clean = _gradient(rng, n)
    bg = float(rng.uniform(*cfg.bg_sigma)) if bg_sigma is None else float(bg_sigma)
    sigma_map = np.full((n, n), bg)
    shapes = []
    for _ in range(rng.integers(cfg.n_shapes[0], cfg.n_shapes[1] + 1)):
        center = (rng.uniform(0, n - 1), rng.uniform(0, n - 1))
        radii = (rng.uniform(*cfg.shape_radius), rng.uniform(*cfg.shape_radius))
        angle = rng.uniform(0, np.pi)
        color = rng.uniform(0.2, 0.8, size=3)
        sig = float(rng.uniform(*cfg.shape_sigma)) if shape_sigma is None else float(shape_sigma)
        m = ellipse_mask(n, center, radii, angle)
        clean[:, m] = color[:, None]
        sigma_map[m] = sig
        shapes.append(Shape(m, sig, color, center, radii))
    noise = rng.normal(size=(3, n, n)) * (sigma_map / 255.0)
    image = quantize(clean + noise)
    return Scene(image, clean, bg, shapes)


def gen_base_scene(seed: int, cfg: ForgeConfig = ForgeConfig()) -> np.ndarray:
    return render_scene(seed, cfg).image


def _area_ok(area: int, cfg: ForgeConfig) -> bool:
    frac = area / cfg.size ** 2
    return cfg.area_frac[0] <= frac <= cfg.area_frac[1]


def _place_ellipse(rng: Xoshiro256, cfg: ForgeConfig, what: str, centers=()) -> np.ndarray:
    n = cfg.size
    for attempt in range(MAX_ATTEMPTS):
        if attempt < len(centers):
            center = centers[attempt]
        else:
            center = (rng.uniform(0, n - 1), rng.uniform(0, n - 1))
        radii = (rng.uniform(*cfg.shape_radius), rng.uniform(*cfg.shape_radius))
        m = ellipse_mask(n, center, radii, rng.uniform(0, np.pi))
        if _area_ok(int(m.sum()), cfg):
            return m
    raise GenerationError(f"{what}: no ellipse with area fraction in {cfg.area_frac} after {MAX_ATTEMPTS} attempts")


def _feather(host: np.ndarray, pasted: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Blend one-pixel boundary of ``region`` 50/50 between host and paste."""
    inner = region.copy()
    inner[1:, :] &= region[:-1, :]
    inner[:-1, :] &= region[1:, :]
    inner[:, 1:] &= region[:, :-1]
    inner[:, :-1] &= region[:, 1:]
    edge = region & ~inner
    out = host.copy()
    out[:, inner] = pasted[:, inner]
    out[:, edge] = 0.5 * (host[:, edge] + pasted[:, edge])
    return out


def gen_authentic(seed: int, cfg: ForgeConfig = ForgeConfig()) -> ImageSample:
    scene = render_scene(seed, cfg)
    mask = np.zeros((cfg.size, cfg.size), dtype=np.uint8)
    return _finish(scene.image, mask, ManipulationType.AUTHENTIC, seed, cfg)


def gen_splice(seed: int, cfg: ForgeConfig = ForgeConfig()) -> ImageSample:
    rng = Xoshiro256(seed).derive(1)
    host = render_scene(seed, cfg)
    for _ in range(MAX_ATTEMPTS):
        donor_sigma = float(rng.uniform(*cfg.splice_sigma))
        if abs(donor_sigma - host.bg_sigma) >= cfg.splice_margin:
            break
    else:
        raise GenerationError(f"splice: no donor sigma with margin {cfg.splice_margin} after {MAX_ATTEMPTS} attempts")
    donor_seed = int(rng.next_u64(1)[0])
    donor = render_scene(donor_seed, cfg, bg_sigma=donor_sigma, shape_sigma=donor_sigma)
    region = _place_ellipse(rng, cfg, "splice")
    if cfg.feather:
        image = _feather(host.image, donor.image, region)
    else:
        image = host.image.copy()
        image[:, region] = donor.image[:, region]
    return _finish(quantize(image), region.astype(np.uint8), ManipulationType.SPLICE, seed, cfg)


def _rects_disjoint(a, b) -> bool:
    (ay, ax, ah, aw), (by, bx, bh, bw) = a, b
    return ay + ah <= by or by + bh <= ay or ax + aw <= bx or bx + bw <= ax


def copy_move_rects(seed: int, cfg: ForgeConfig = ForgeConfig()):
    """(source, destination) rectangles as (y, x, h, w); disjoint, in bounds."""
    rng = Xoshiro256(seed).derive(2)
    n = cfg.size
    lo, hi = cfg.rect_side
    for _ in range(MAX_ATTEMPTS):
        h = rng.integers(lo, hi + 1)
        w = rng.integers(lo, hi + 1)
        if not _area_ok(h * w, cfg):
            continue
        src = (rng.integers(0, n - h + 1), rng.integers(0, n - w + 1), h, w)
        dst = (rng.integers(0, n - h + 1), rng.integers(0, n - w + 1), h, w)
        if _rects_disjoint(src, dst):
            return src, dst
    raise GenerationError(f"copy-move: no disjoint in-bounds rectangles after {MAX_ATTEMPTS} attempts")


def gen_copy_move(seed: int, cfg: ForgeConfig = ForgeConfig()) -> ImageSample:
    host = render_scene(seed, cfg)
    src, dst = copy_move_rects(seed, cfg)
    sy, sx, h, w = src
    dy, dx, _, _ = dst
    image = host.image.copy()
    image[:, dy:dy + h, dx:dx + w] = host.image[:, sy:sy + h, sx:sx + w]
    mask = np.zeros((cfg.size, cfg.size), dtype=np.uint8)
    mask[dy:dy + h, dx:dx + w] = 1
    return _finish(image, mask, ManipulationType.COPY_MOVE, seed, cfg)


def _ring(region: np.ndarray, width: int = 3) -> np.ndarray:
    grown = region.copy()
    for _ in range(width):
        g = grown.copy()
        g[1:, :] |= grown[:-1, :]
        g[:-1, :] |= grown[1:, :]
        g[:, 1:] |= grown[:, :-1]
        g[:, :-1] |= grown[:, 1:]
        grown = g
    return grown & ~region


def gen_remove(seed: int, cfg: ForgeConfig = ForgeConfig()) -> ImageSample:
    rng = Xoshiro256(seed).derive(3)
    host = render_scene(seed, cfg)
    centers = [s.center for s in host.shapes[::-1]]
    region = _place_ellipse(rng, cfg, "remove", centers)
    ring = _ring(region)
    yy, xx = np.nonzero(ring)
    design = np.stack([np.ones_like(yy), yy, xx], axis=1).astype(np.float64)
    ty, tx = np.nonzero(region)
    fill_design = np.stack([np.ones_like(ty), ty, tx], axis=1).astype(np.float64)
    fill_sigma = float(rng.uniform(*cfg.fill_sigma))
    image = host.image.copy()
    noise = rng.normal(size=(3, len(ty))) * (fill_sigma / 255.0)
    for c in range(3):
        coef, *_ = np.linalg.lstsq(design, host.image[c][yy, xx], rcond=None)
        image[c, ty, tx] = fill_design @ coef + noise[c]
    return _finish(quantize(image), region.astype(np.uint8), ManipulationType.REMOVE, seed, cfg)


def render_coc_text(label: str, manip: ManipulationType) -> list[str]:
    """Five-slot clue text: class, manipulation type, segmentation request, EOS, PAD."""
    from ..stub import EOS, FAKE, NOSEG, PAD, REAL, SEG

    if label == "FAKE":
        return [FAKE, manip.value, SEG, EOS, PAD]
    return [REAL, "NONE", NOSEG, EOS, PAD]


def _finish(image, mask, manip: ManipulationType, seed: int, cfg: ForgeConfig) -> ImageSample:
    label = "REAL" if manip == ManipulationType.AUTHENTIC else "FAKE"
    sample = ImageSample(image, mask, label, manip, render_coc_text(label, manip), seed)
    sample.check(cfg)
    return sample


GENERATORS = {
    ManipulationType.SPLICE: gen_splice,
    ManipulationType.COPY_MOVE: gen_copy_move,
    ManipulationType.REMOVE: gen_remove,
    ManipulationType.AUTHENTIC: gen_authentic,
}


def generate(manip: ManipulationType, seed: int, cfg: ForgeConfig = ForgeConfig()) -> ImageSample:
    return GENERATORS[ManipulationType(manip)](seed, cfg)
