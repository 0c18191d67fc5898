"""Paired RGB/TIR sequences: synthetic generation, on-disk loading and cropping.

Images are float32 arrays in [0, 1], RGB as ``H x W x 3`` and TIR as
``H x W x 1``.  Boxes are ``(x, y, w, h)`` in pixels with a top-left origin;
pixel ``j`` covers the continuous interval ``[j, j + 1)``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence as Seq

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    @property
    def valid(self) -> bool:
        return self.w > 0 and self.h > 0 and all(map(math.isfinite, self.as_tuple()))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    def clip(self, width: int, height: int, min_size: float = 1.0) -> "BBox":
        """Clip to the frame, keeping at least ``min_size`` pixels per side."""
        x1 = min(max(self.x, 0.0), width - min_size)
        y1 = min(max(self.y, 0.0), height - min_size)
        x2 = min(max(self.x + self.w, x1 + min_size), float(width))
        y2 = min(max(self.y + self.h, y1 + min_size), float(height))
        return BBox(x1, y1, x2 - x1, y2 - y1)


@dataclass
class FramePair:
    rgb: np.ndarray
    tir: np.ndarray
    gt: BBox

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise DataError(f"rgb image must be HxWx3, got {self.rgb.shape}")
        if self.tir.ndim == 2:
            self.tir = self.tir[..., None]
        if self.tir.shape[:2] != self.rgb.shape[:2] or self.tir.shape[2] != 1:
            raise DataError(
                f"unaligned pair: rgb {self.rgb.shape} vs tir {self.tir.shape}")

    @property
    def size(self) -> tuple[int, int]:
        """(width, height)"""
        return self.rgb.shape[1], self.rgb.shape[0]


@dataclass
class Sequence:
    name: str
    frames: list[FramePair]

    def __len__(self):
        return len(self.frames)

    @property
    def boxes(self) -> np.ndarray:
        return np.stack([f.gt.as_array() for f in self.frames])


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class StylePreset:
    """Appearance and motion knobs for the synthetic generator.

    The TIR channel is ``tir_offset + tir_contrast * raw`` where ``raw`` is a
    smoothed heat map, so the two modalities get different global statistics.
    """
    target_size: float = 16.0
    aspect_jitter: float = 0.25
    step_std: float = 1.2
    momentum: float = 0.85
    max_speed: float = 4.0
    n_clutter: int = 10
    n_distractors: int = 1
    tir_offset: float = 0.45
    tir_contrast: float = 0.5
    blob_sigma: float = 0.35
    noise: float = 0.02


STYLE_PRESETS = {
    "default": StylePreset(),
    "static": StylePreset(step_std=0.0),
    "low_gap": StylePreset(tir_offset=0.1, tir_contrast=1.0),
}


def _style(style) -> StylePreset:
    if isinstance(style, StylePreset):
        return style
    try:
        return STYLE_PRESETS[style]
    except KeyError:
        raise ConfigError(f"unknown style preset {style!r}") from None


def _smooth_noise(rng, shape, sigma):
    noise = ndimage.gaussian_filter(rng.random(shape), sigma=sigma, mode="wrap")
    lo, hi = noise.min(), noise.max()
    return (noise - lo) / (hi - lo + 1e-12)


def _target_texture(rng, w, h):
    cells = rng.random((4, 4, 3))
    # keep at least one saturated channel per cell so the target pops out
    cells[..., rng.integers(0, 3)] = 0.75 + 0.25 * rng.random((4, 4))
    ys = np.minimum((np.arange(h) * 4) // h, 3)
    xs = np.minimum((np.arange(w) * 4) // w, 3)
    return cells[ys[:, None], xs[None, :]]


def generate_synthetic_sequence(seed: int, length: int = 50, canvas: int = 128,
                                style="default", name: Optional[str] = None) -> Sequence:
    """Render a deterministic two-modality sequence with a randomly walking target."""
    preset = _style(style)
    if length < 2:
        raise ConfigError(f"length must be >= 2, got {length}")
    rng = np.random.default_rng(seed)
    aspect = math.exp(rng.uniform(-preset.aspect_jitter, preset.aspect_jitter))
    w = max(4, int(round(preset.target_size * math.sqrt(aspect))))
    h = max(4, int(round(preset.target_size / math.sqrt(aspect))))
    if canvas < 4 * max(w, h):
        raise ConfigError(f"canvas {canvas} must be at least 4x the target size {max(w, h)}")

    bg_rgb = 0.1 + 0.4 * _smooth_noise(rng, (canvas, canvas, 3), (6, 6, 0))
    for _ in range(preset.n_clutter):
        cw, ch = rng.integers(4, max(5, w), size=2)
        cx, cy = rng.integers(0, canvas - max(cw, ch), size=2)
        bg_rgb[cy:cy + ch, cx:cx + cw] = 0.15 + 0.35 * rng.random(3)
    bg_heat = 0.25 * _smooth_noise(rng, (canvas, canvas), 8)
    texture = _target_texture(rng, w, h)

    yy, xx = np.mgrid[0:canvas, 0:canvas] + 0.5

    def blob(cx, cy, amp):
        sx, sy = preset.blob_sigma * w, preset.blob_sigma * h
        return amp * np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))

    distractors = [(rng.uniform(w, canvas - w), rng.uniform(h, canvas - h))
                   for _ in range(preset.n_distractors)]

    pos = np.array([rng.uniform(w, canvas - 2 * w), rng.uniform(h, canvas - 2 * h)])
    vel = np.zeros(2)
    lo, hi = np.array([1.0, 1.0]), np.array([canvas - w - 1.0, canvas - h - 1.0])
    frames = []
    for _ in range(length):
        x, y = int(round(pos[0])), int(round(pos[1]))
        rgb = bg_rgb.copy()
        rgb[y:y + h, x:x + w] = texture
        heat = bg_heat.copy() + blob(x + w / 2, y + h / 2, 1.0)
        for dx, dy in distractors:
            heat += blob(dx, dy, 0.35)
        rgb += preset.noise * rng.standard_normal(rgb.shape)
        heat += preset.noise * rng.standard_normal(heat.shape)
        tir = preset.tir_offset + preset.tir_contrast * heat
        frames.append(FramePair(
            rgb=np.clip(rgb, 0, 1).astype(np.float32),
            tir=np.clip(tir, 0, 1).astype(np.float32)[..., None],
            gt=BBox(float(x), float(y), float(w), float(h))))

        vel = preset.momentum * vel + preset.step_std * rng.standard_normal(2)
        speed = np.linalg.norm(vel)
        if speed > preset.max_speed:
            vel *= preset.max_speed / speed
        pos = pos + vel
        # reflect off the borders
        for k in range(2):
            if pos[k] < lo[k] or pos[k] > hi[k]:
                vel[k] = -vel[k]
                pos[k] = np.clip(pos[k], lo[k], hi[k])
    return Sequence(name=name or f"synthetic_{seed:05d}", frames=frames)


def synthetic_benchmark(n_train: int = 20, n_test: int = 5, length: int = 50,
                        canvas: int = 128, seed: int = 0, style="default"):
    """Disjointly seeded train/test sequence lists."""
    base = 1_000_003 * seed
    train = [generate_synthetic_sequence(base + i, length, canvas, style,
                                         name=f"train_{i:03d}") for i in range(n_train)]
    test = [generate_synthetic_sequence(base + 500_000 + i, length, canvas, style,
                                        name=f"test_{i:03d}") for i in range(n_test)]
    return train, test


# ------------------------------------------------------------------ on disk


def _natural_key(path: Path):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", path.name)]


def _list_images(folder: Path) -> list[Path]:
    if not folder.is_dir():
        raise DataError(f"missing image folder {folder}")
    return sorted((p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES),
                  key=_natural_key)


def _read_image(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert(mode), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr if arr.ndim == 3 else arr[..., None]


def read_groundtruth(path: Path) -> list[BBox]:
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = [p for p in re.split(r"[,\s]+", line) if p]
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected x,y,w,h, got {line!r}")
        try:
            boxes.append(BBox(*map(float, parts)))
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric annotation {line!r}") from None
    return boxes


def load_sequence(seq_dir: Path) -> Sequence:
    seq_dir = Path(seq_dir)
    gt_path = seq_dir / "groundtruth.txt"
    if not gt_path.is_file():
        raise DataError(f"sequence {seq_dir.name}: missing groundtruth.txt")
    boxes = read_groundtruth(gt_path)
    rgb_paths = _list_images(seq_dir / "rgb")
    tir_paths = _list_images(seq_dir / "tir")
    if not (len(rgb_paths) == len(tir_paths) == len(boxes)):
        raise DataError(
            f"sequence {seq_dir.name}: {len(rgb_paths)} rgb / {len(tir_paths)} tir images "
            f"but {len(boxes)} annotation lines")
    frames = []
    for rp, tp, box in zip(rgb_paths, tir_paths, boxes):
        rgb, tir = _read_image(rp, "RGB"), _read_image(tp, "L")
        if tir.shape[:2] != rgb.shape[:2]:
            raise DataError(f"sequence {seq_dir.name}: {rp.name} and {tp.name} differ in size")
        width, height = rgb.shape[1], rgb.shape[0]
        frames.append(FramePair(rgb, tir, box.clip(width, height)))
    if len(frames) < 2:
        raise DataError(f"sequence {seq_dir.name}: needs at least 2 frames")
    return Sequence(name=seq_dir.name, frames=frames)


def load_dataset(root) -> list[Sequence]:
    """Load every ``<root>/<name>/{rgb,tir,groundtruth.txt}`` sequence, sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    return [load_sequence(d) for d in sorted(p for p in root.iterdir() if p.is_dir())]


def save_sequence(seq: Sequence, root) -> Path:
    """Write a sequence in the layout read by :func:`load_dataset` (8-bit PNG)."""
    out = Path(root) / seq.name
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "tir").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, fr in enumerate(seq.frames):
        Image.fromarray(np.round(fr.rgb * 255).astype(np.uint8)).save(out / "rgb" / f"{i:05d}.png")
        Image.fromarray(np.round(fr.tir[..., 0] * 255).astype(np.uint8)).save(out / "tir" / f"{i:05d}.png")
        lines.append(",".join(f"{v:g}" for v in fr.gt.as_tuple()))
    (out / "groundtruth.txt").write_text("\n".join(lines) + "\n")
    return out


# ----------------------------------------------------------------- cropping


@dataclass(frozen=True)
class CropConfig:
    template_size: int = 32
    search_size: int = 64
    template_factor: float = 2.0
    search_factor: float = 4.0


@dataclass(frozen=True)
class CropTransform:
    """Affine map between crop and frame coordinates: ``frame = crop / scale + offset``."""
    scale: float
    x0: float
    y0: float

    def to_frame(self, box: BBox) -> BBox:
        s = self.scale
        return BBox(box.x / s + self.x0, box.y / s + self.y0, box.w / s, box.h / s)

    def to_crop(self, box: BBox) -> BBox:
        s = self.scale
        return BBox((box.x - self.x0) * s, (box.y - self.y0) * s, box.w * s, box.h * s)


IDENTITY_TRANSFORM = CropTransform(1.0, 0.0, 0.0)


@dataclass
class FrameSample:
    template_rgb: np.ndarray
    template_tir: np.ndarray
    search_rgb: np.ndarray
    search_tir: np.ndarray
    gt_in_search: BBox
    crop_transform: CropTransform
    template_transform: CropTransform = field(default=IDENTITY_TRANSFORM)


def crop_region(image: np.ndarray, cx: float, cy: float, side: float,
                out_size: int) -> tuple[np.ndarray, CropTransform]:
    """Bilinearly resample the square ``side`` region centred on (cx, cy).

    Output pixels whose centre falls outside the frame are set to the
    per-channel image mean.
    """
    height, width, channels = image.shape
    scale = out_size / side
    tf = CropTransform(scale, cx - side / 2.0, cy - side / 2.0)
    centers = (np.arange(out_size) + 0.5) / scale
    fx, fy = centers + tf.x0, centers + tf.y0
    fill = image.reshape(-1, channels).mean(axis=0)
    coords = np.meshgrid(fy - 0.5, fx - 0.5, indexing="ij")
    out = np.empty((out_size, out_size, channels), dtype=np.float32)
    for c in range(channels):
        out[..., c] = ndimage.map_coordinates(image[..., c], coords, order=1, mode="nearest")
    outside = ((fy < 0) | (fy >= height))[:, None] | ((fx < 0) | (fx >= width))[None, :]
    out[outside] = fill
    return out, tf


def _crop_side(box: BBox, factor: float) -> float:
    return factor * math.sqrt(box.w * box.h)


def make_sample(frame: FramePair, template_frame: FramePair, prev_box: BBox,
                cfg: CropConfig = CropConfig(), fallback: Optional[BBox] = None,
                template_box: Optional[BBox] = None) -> FrameSample:
    """Cut template and search crops for one tracking step.

    The template is centred on ``template_box`` (default: the template
    frame's ground truth), the search region on ``prev_box``.  A degenerate
    ``prev_box`` is replaced by ``fallback``.
    """
    for size in (cfg.template_size, cfg.search_size):
        if size <= 0:
            raise ConfigError(f"crop sizes must be positive, got {size}")
    if not prev_box.valid:
        if fallback is None or not fallback.valid:
            raise DataError(f"degenerate search box {prev_box} and no valid fallback")
        prev_box = fallback
    tbox = template_box or template_frame.gt
    if not tbox.valid:
        raise DataError(f"degenerate template box {tbox}")

    tcx, tcy = tbox.center
    tside = _crop_side(tbox, cfg.template_factor)
    t_rgb, t_tf = crop_region(template_frame.rgb, tcx, tcy, tside, cfg.template_size)
    t_tir, _ = crop_region(template_frame.tir, tcx, tcy, tside, cfg.template_size)

    cx, cy = prev_box.center
    side = _crop_side(prev_box, cfg.search_factor)
    s_rgb, s_tf = crop_region(frame.rgb, cx, cy, side, cfg.search_size)
    s_tir, _ = crop_region(frame.tir, cx, cy, side, cfg.search_size)
    return FrameSample(t_rgb, t_tir, s_rgb, s_tir, s_tf.to_crop(frame.gt), s_tf, t_tf)


def jitter_box(box: BBox, rng: np.random.Generator, center_jitter: float = 0.75,
               scale_jitter: float = 0.4) -> BBox:
    """Perturb a box the way a previous-frame estimate would be off."""
    size = math.sqrt(box.w * box.h)
    cx, cy = box.center
    cx += center_jitter * size * rng.uniform(-1, 1)
    cy += center_jitter * size * rng.uniform(-1, 1)
    s = math.exp(scale_jitter * rng.uniform(-1, 1))
    return BBox.from_center(cx, cy, box.w * s, box.h * s)


class SampleSource:
    """Draws random training samples (template frame, later search frame) from sequences."""

    def __init__(self, sequences: Seq[Sequence], crop: CropConfig = CropConfig(),
                 max_gap: int = 20, center_jitter: float = 0.75, scale_jitter: float = 0.4):
        if not sequences:
            raise DataError("no training sequences")
        self.sequences = list(sequences)
        self.crop = crop
        self.max_gap = max_gap
        self.center_jitter = center_jitter
        self.scale_jitter = scale_jitter

    def draw(self, rng: np.random.Generator) -> FrameSample:
        seq = self.sequences[rng.integers(len(self.sequences))]
        n = len(seq)
        t = int(rng.integers(n))
        lo, hi = max(0, t - self.max_gap), min(n - 1, t + self.max_gap)
        s = int(rng.integers(lo, hi + 1))
        frame = seq.frames[s]
        prev = jitter_box(frame.gt, rng, self.center_jitter, self.scale_jitter)
        return make_sample(frame, seq.frames[t], prev, self.crop)

    def batch(self, rng: np.random.Generator, size: int) -> list[FrameSample]:
        return [self.draw(rng) for _ in range(size)]
