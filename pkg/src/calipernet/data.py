"""Datasets, preprocessing, augmentation, synthetic scenes and fold plans.

On-disk layout (shared by real and synthetic data)::

    <root>/images/<id>.png          8-bit grayscale
    <root>/annotations/<id>.json    {"id", "top": [row, col], "bottom": [row, col],
                                     "mm_per_pixel", "state"}
    <root>/dataset.toml             optional: roi = [row0, col0, height, width],
                                    target_size = [h, w]
    <root>/truth.csv                synthetic only: id, thickness_mm
"""

from __future__ import annotations

import csv
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .loss import AnnotationSet
from .tensor import interp_matrix

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# grayscale average of the usual ImageNet channel statistics
NORM_MEAN = 0.449
NORM_STD = 0.226

RESTING = "resting"
CONTRACTED = "contracted"


class DatasetError(ValueError):
    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = Path(path)


@dataclass
class Sample:
    """One image with its two caliper endpoints (top first)."""

    id: str
    image: np.ndarray  # float64 in [0, 1], h x w
    annotation: AnnotationSet
    mm_per_pixel: float
    state: str = RESTING
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.annotation.points) != 2:
            raise ValueError(f"{self.id}: need exactly 2 annotation points")
        h, w = self.image.shape[:2]
        self.annotation.check_bounds(h, w)
        (r0, _, _), (r1, _, _) = self.annotation.points
        if not r0 < r1:
            raise ValueError(f"{self.id}: top row {r0} must be above bottom row {r1}")
        if not self.mm_per_pixel > 0:
            raise ValueError(f"{self.id}: mm_per_pixel must be positive")

    @property
    def top(self) -> tuple[int, int]:
        r, c, _ = self.annotation.points[0]
        return r, c

    @property
    def bottom(self) -> tuple[int, int]:
        r, c, _ = self.annotation.points[1]
        return r, c

    @property
    def thickness_px(self) -> float:
        (r0, c0), (r1, c1) = self.top, self.bottom
        return math.hypot(r1 - r0, c1 - c0)

    @property
    def thickness_mm(self) -> float:
        return self.thickness_px * self.mm_per_pixel


def make_sample(id, image, top, bottom, mm_per_pixel, state=RESTING, meta=None) -> Sample:
    ann = AnnotationSet([(top[0], top[1], 1), (bottom[0], bottom[1], 1)])
    return Sample(str(id), np.asarray(image, dtype=np.float64), ann, float(mm_per_pixel), state, meta or {})


# ---------------------------------------------------------------------------
# disk I/O


@dataclass
class DatasetConfig:
    roi: Optional[tuple[int, int, int, int]] = None
    target_size: Optional[tuple[int, int]] = None


def read_dataset_config(root) -> DatasetConfig:
    path = Path(root) / "dataset.toml"
    if not path.exists():
        return DatasetConfig()
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise DatasetError(path, f"malformed config: {exc}") from exc
    roi = tuple(int(v) for v in raw["roi"]) if "roi" in raw else None
    target = tuple(int(v) for v in raw["target_size"]) if "target_size" in raw else None
    if roi is not None and len(roi) != 4:
        raise DatasetError(path, "roi must be [row0, col0, height, width]")
    return DatasetConfig(roi, target)


def write_dataset_config(root, cfg: DatasetConfig) -> None:
    lines = []
    if cfg.roi is not None:
        lines.append(f"roi = [{', '.join(str(v) for v in cfg.roi)}]")
    if cfg.target_size is not None:
        lines.append(f"target_size = [{', '.join(str(v) for v in cfg.target_size)}]")
    (Path(root) / "dataset.toml").write_text("\n".join(lines) + "\n")


def read_png(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DatasetError(path, f"cannot read image: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _parse_point(path: Path, raw, name: str) -> tuple[int, int]:
    try:
        r, c = raw[name]
        if float(r) != int(r) or float(c) != int(c):
            raise ValueError
        return int(r), int(c)
    except (KeyError, TypeError, ValueError):
        raise DatasetError(path, f"field {name!r} must be [row, col] integers") from None


def load_dataset(root) -> list[Sample]:
    """Parse every annotation/image pair under ``root``, sorted by id."""
    root = Path(root)
    ann_dir, img_dir = root / "annotations", root / "images"
    if not ann_dir.exists() and not img_dir.exists():
        return []
    ann_ids = {p.stem for p in ann_dir.glob("*.json")} if ann_dir.exists() else set()
    img_ids = {p.stem for p in img_dir.glob("*.png")} if img_dir.exists() else set()
    for missing in sorted(img_ids - ann_ids):
        raise DatasetError(ann_dir / f"{missing}.json", "annotation file missing")
    samples = []
    for sid in sorted(ann_ids):
        ann_path = ann_dir / f"{sid}.json"
        img_path = img_dir / f"{sid}.png"
        if not img_path.exists():
            raise DatasetError(img_path, "image file missing")
        try:
            raw = json.loads(ann_path.read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(ann_path, f"invalid JSON: {exc}") from exc
        top = _parse_point(ann_path, raw, "top")
        bottom = _parse_point(ann_path, raw, "bottom")
        try:
            mpp = float(raw["mm_per_pixel"])
        except (KeyError, TypeError, ValueError):
            raise DatasetError(ann_path, "field 'mm_per_pixel' missing or not a number") from None
        image = read_png(img_path)
        try:
            samples.append(
                make_sample(raw.get("id", sid), image, top, bottom, mpp, raw.get("state", RESTING))
            )
        except ValueError as exc:
            raise DatasetError(ann_path, str(exc)) from exc
    return samples


def write_dataset(samples: Sequence[Sample], root, cfg: Optional[DatasetConfig] = None) -> Path:
    from PIL import Image

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(to_uint8(s.image), mode="L").save(root / "images" / f"{s.id}.png")
        record = {
            "id": s.id,
            "top": list(s.top),
            "bottom": list(s.bottom),
            "mm_per_pixel": s.mm_per_pixel,
            "state": s.state,
        }
        (root / "annotations" / f"{s.id}.json").write_text(json.dumps(record, indent=2) + "\n")
    with open(root / "truth.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "thickness_mm"])
        for s in samples:
            writer.writerow([s.id, repr(s.thickness_mm)])
    write_dataset_config(root, cfg or DatasetConfig(target_size=samples[0].image.shape[:2] if samples else None))
    return root


# ---------------------------------------------------------------------------
# preprocessing


def crop_roi(sample: Sample, roi: Optional[tuple[int, int, int, int]]) -> Sample:
    """Crop to (row0, col0, height, width); annotations shift with the origin."""
    if roi is None:
        return sample
    r0, c0, rh, rw = roi
    h, w = sample.image.shape[:2]
    if r0 < 0 or c0 < 0 or rh < 1 or rw < 1 or r0 + rh > h or c0 + rw > w:
        raise ValueError(f"{sample.id}: roi {roi} outside {h}x{w} image")
    points = []
    for r, c, k in sample.annotation.points:
        if not (r0 <= r < r0 + rh and c0 <= c < c0 + rw):
            raise ValueError(f"{sample.id}: annotation ({r}, {c}) outside roi {roi}")
        points.append((r - r0, c - c0, k))
    return Sample(
        sample.id,
        sample.image[r0 : r0 + rh, c0 : c0 + rw].copy(),
        AnnotationSet(points, sample.annotation.num_classes),
        sample.mm_per_pixel,
        sample.state,
        dict(sample.meta),
    )


def resize_image(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel-centre sampling."""
    h, w = image.shape[:2]
    th, tw = target
    if (h, w) == (th, tw):
        return image.astype(np.float64, copy=True)
    return interp_matrix(h, th) @ image @ interp_matrix(w, tw).T


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    return (image - NORM_MEAN) / NORM_STD


@dataclass
class Prepared:
    """A sample in model-input space."""

    id: str
    image: np.ndarray  # resized, [0, 1], h x w (normalisation applied later)
    points: np.ndarray  # 2 x 2 float (row, col), top first
    annotation: AnnotationSet  # points rounded to pixels
    mm_per_pixel: float  # geometric mean of the two axis scales
    anisotropy: float  # row-axis scale / column-axis scale

    @property
    def model_input(self) -> np.ndarray:
        return normalize_intensity(self.image)[:, :, None]


def resize_sample(sample: Sample, target: tuple[int, int]) -> Prepared:
    h, w = sample.image.shape[:2]
    th, tw = target
    sy, sx = th / h, tw / w
    pts = np.array([[r * sy, c * sx] for r, c, _ in sample.annotation.points], dtype=np.float64)
    rounded = [
        (int(min(max(round(r), 0), th - 1)), int(min(max(round(c), 0), tw - 1)), k)
        for (r, c), (_, _, k) in zip(pts, sample.annotation.points)
    ]
    mm_row = sample.mm_per_pixel / sy
    mm_col = sample.mm_per_pixel / sx
    return Prepared(
        sample.id,
        resize_image(sample.image, target),
        pts,
        AnnotationSet(rounded, sample.annotation.num_classes),
        math.sqrt(mm_row * mm_col),
        mm_row / mm_col,
    )


def resize_normalize(sample: Sample, target: tuple[int, int]):
    """Model-ready (h x w x 1) array, scaled annotations and adjusted mm scale."""
    prep = resize_sample(sample, target)
    return prep.model_input, prep.annotation, prep.mm_per_pixel


@dataclass
class AugmentConfig:
    contrast: tuple[float, float] = (0.8, 1.2)
    brightness: tuple[float, float] = (-0.1, 0.1)
    gamma: tuple[float, float] = (0.8, 1.25)


def apply_intensity(image: np.ndarray, contrast: float, brightness: float, gamma: float) -> np.ndarray:
    """Contrast about the mean, brightness shift, then gamma; clamped to [0, 1]."""
    out = (image - image.mean()) * contrast + image.mean() + brightness
    out = np.clip(out, 0.0, 1.0)
    if gamma != 1.0:
        out = out ** gamma
    return out


def augment(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    u = rng.uniform(*cfg.contrast)
    v = rng.uniform(*cfg.brightness)
    g = rng.uniform(*cfg.gamma)
    return apply_intensity(image, u, v, g)


# ---------------------------------------------------------------------------
# synthetic scenes

# reported TrA thickness ranges (mm) and means per state
THICKNESS_MODES = {
    RESTING: dict(low=1.05, high=5.24, mean=3.03, sd=0.8),
    CONTRACTED: dict(low=2.07, high=8.02, mean=5.25, sd=1.1),
}
SYNTH_FIELD_OF_VIEW_MM = 12.8  # image height in mm


def synth_mm_per_pixel(size: tuple[int, int]) -> float:
    return SYNTH_FIELD_OF_VIEW_MM / size[0]


def _truncated_normal(rng: np.random.Generator, mean, sd, low, high) -> float:
    while True:
        x = rng.normal(mean, sd)
        if low <= x <= high:
            return x


def _coverage(lo: np.ndarray, hi: np.ndarray, rows: np.ndarray) -> np.ndarray:
    # overlap of pixel interval [r - 0.5, r + 0.5] with [lo, hi], per column
    a = np.maximum(rows[:, None] - 0.5, lo[None, :])
    b = np.minimum(rows[:, None] + 0.5, hi[None, :])
    return np.clip(b - a, 0.0, 1.0)


def synth_scene(rng: np.random.Generator, size: tuple[int, int], sid: str) -> Sample:
    h, w = size
    s = h / 128.0
    mpp = synth_mm_per_pixel(size)
    state = RESTING if rng.random() < 0.5 else CONTRACTED
    mode = THICKNESS_MODES[state]
    t_mm = _truncated_normal(rng, mode["mean"], mode["sd"], mode["low"], mode["high"])
    lo_px = math.ceil(mode["low"] / mpp - 1e-9)
    hi_px = math.floor(mode["high"] / mpp + 1e-9)
    t_px = int(min(max(round(t_mm / mpp), lo_px), hi_px))

    # each band is a thin bright fascia line; its centre row is the caliper
    # landmark, which keeps the landmark symmetric for centroid localisation
    band_top = rng.uniform(1.25, 2.0) * s  # half-widths
    band_bot = rng.uniform(1.25, 2.0) * s
    xs = np.arange(w, dtype=np.float64)
    u = xs / max(w - 1, 1) - 0.5
    curve = rng.uniform(-10, 10) * s * (u ** 2 - 1.0 / 12) + rng.uniform(-5, 5) * s * u
    margin = 6 * s
    y_min = margin + band_top - curve.min()
    y_max = h - 1 - margin - band_bot - t_px - curve.max()
    if y_max < y_min:
        y_max = y_min
    y0 = rng.uniform(y_min, y_max)
    inner_top = y0 + curve
    inner_bot = inner_top + t_px

    rows = np.arange(h, dtype=np.float64)
    upper = _coverage(inner_top - band_top, inner_top + band_top, rows)
    lower = _coverage(inner_bot - band_bot, inner_bot + band_bot, rows)

    base = ndimage.gaussian_filter(rng.random((h, w)), sigma=6 * s, mode="reflect")
    base = (base - base.min()) / max(base.max() - base.min(), 1e-12)
    base = 0.12 + 0.12 * base + 0.04 * (rows / h)[:, None]
    clutter = np.zeros((h, w))
    for _ in range(int(rng.integers(1, 4))):
        # faint echoes away from the muscle
        if rng.random() < 0.5:
            y = rng.uniform(1, max(inner_top.min() - band_top - 3 * s, 1.5))
        else:
            y = rng.uniform(min(inner_bot.max() + band_bot + 3 * s, h - 2), h - 1)
        thick = rng.uniform(1.0, 2.5) * s
        slope = rng.uniform(-0.1, 0.1)
        yc = y + slope * (xs - w / 2)
        clutter = np.maximum(clutter, rng.uniform(0.15, 0.3) * _coverage(yc - thick, yc, rows))
    # the caliper column is marked by a brighter stretch of both bands
    col = int(rng.integers(int(round(0.35 * (w - 1))), int(round(0.65 * (w - 1))) + 1))
    focus = np.exp(-0.5 * ((xs - col) / (5.0 * s)) ** 2)[None, :]
    bright_top = rng.uniform(0.4, 0.55) + 0.4 * focus
    bright_bot = rng.uniform(0.4, 0.55) + 0.4 * focus
    clean = base + clutter + bright_top * upper + bright_bot * lower
    speckle = rng.gamma(shape=6.0, scale=1.0 / 6.0, size=(h, w))
    image = np.clip(ndimage.gaussian_filter(clean * speckle, sigma=0.8 * s), 0.0, 1.0)
    image = to_uint8(image).astype(np.float64) / 255.0

    top_row = int(round(inner_top[col]))
    top = (top_row, col)
    bottom = (top_row + t_px, col)
    return make_sample(sid, image, top, bottom, mpp, state, {"synthetic": True})


def synth_generate(count: int, size: tuple[int, int], rng: np.random.Generator) -> list[Sample]:
    """``count`` synthetic two-band scenes with known caliper endpoints."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    width = max(4, len(str(count - 1)))
    return [synth_scene(rng, tuple(size), f"synth{i:0{width}d}") for i in range(count)]


# ---------------------------------------------------------------------------
# cross-validation plans


@dataclass
class FoldPlan:
    folds: list[dict[str, list]]  # each: {"train", "val", "test"}
    test_fold: dict  # id -> fold index whose test split holds it

    @property
    def k(self) -> int:
        return len(self.folds)


def kfold_split(ids: Sequence, k: int, rng: np.random.Generator) -> FoldPlan:
    """Shuffle once, cut into k chunks; fold f tests chunk f and validates on chunk f+1.

    With k = 2 there is no chunk left for training after taking a validation
    chunk, so the validation split is empty and the other chunk trains.
    """
    ids = list(ids)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of ids ({len(ids)})")
    order = rng.permutation(len(ids))
    chunks = [[ids[i] for i in part] for part in np.array_split(order, k)]
    folds = []
    test_fold = {}
    for f in range(k):
        val_idx = (f + 1) % k if k >= 3 else None
        train = [
            i for g, chunk in enumerate(chunks) if g != f and g != val_idx for i in chunk
        ]
        folds.append({
            "train": train,
            "val": list(chunks[val_idx]) if val_idx is not None else [],
            "test": list(chunks[f]),
        })
        for i in chunks[f]:
            test_fold[i] = f
    return FoldPlan(folds, test_fold)
