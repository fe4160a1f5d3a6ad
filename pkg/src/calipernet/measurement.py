"""Turn a probability map into a caliper line and a thickness value."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .loss import BlobSet, blobs_from_mask, foreground_mask
from .tensor import ProbabilityMap


class DegenerateMeasurement(ValueError):
    """Fewer than two blobs: the image cannot be measured."""

    def __init__(self, blob_count: int):
        super().__init__(f"unmeasurable: {blob_count} blobs found")
        self.blob_count = blob_count


@dataclass(frozen=True)
class MeasurementLine:
    top: tuple[float, float]
    bottom: tuple[float, float]
    length_mm: Optional[float] = None

    @property
    def length_px(self) -> float:
        return math.hypot(self.bottom[0] - self.top[0], self.bottom[1] - self.top[1])

    @classmethod
    def from_points(cls, a, b, length_mm: Optional[float] = None) -> "MeasurementLine":
        """Order two points so the one with the smaller row is ``top``."""
        a = (float(a[0]), float(a[1]))
        b = (float(b[0]), float(b[1]))
        if b[0] < a[0]:
            a, b = b, a
        return cls(a, b, length_mm)


@dataclass(frozen=True)
class MeasurementResult:
    line: Optional[MeasurementLine]
    blob_count: int
    confidence: float
    status: str  # "ok" | "degenerate"
    length_px: float = 0.0
    length_mm: Optional[float] = None


def extract_blobs(probs: ProbabilityMap, cls: int = 1, connectivity: int = 4) -> BlobSet:
    """Foreground blobs relabelled 1..n by pixel count, largest first (raster order on ties)."""
    blobs = blobs_from_mask(foreground_mask(probs, cls), cls, connectivity)
    if blobs.count == 0:
        return blobs
    sizes = blobs.sizes
    # component ids are already in raster order, so a stable sort keeps that on ties
    order = np.argsort(-sizes, kind="stable")
    remap = np.zeros(blobs.count + 1, dtype=np.int64)
    remap[order + 1] = np.arange(1, blobs.count + 1)
    return BlobSet(
        cls, remap[blobs.labels], blobs.count, [blobs.pixels[i] for i in order]
    )


def blob_centroid(pixels) -> tuple[float, float]:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(pixels) == 0:
        raise ValueError("blob_centroid: empty blob")
    r, c = pixels.mean(axis=0)
    return float(r), float(c)


def select_endpoint_pair(blobs: BlobSet) -> MeasurementLine:
    """Centroids of the two largest blobs, ordered top to bottom."""
    if blobs.count < 2:
        raise DegenerateMeasurement(blobs.count)
    sizes = blobs.sizes
    first, second = np.argsort(-sizes, kind="stable")[:2]
    return MeasurementLine.from_points(
        blob_centroid(blobs.pixels[first]), blob_centroid(blobs.pixels[second])
    )


def thickness(line: MeasurementLine, mm_per_pixel: Optional[float] = None) -> MeasurementResult:
    if mm_per_pixel is not None and not mm_per_pixel > 0:
        raise ValueError(f"mm_per_pixel must be positive, got {mm_per_pixel}")
    px = line.length_px
    mm = px * mm_per_pixel if mm_per_pixel is not None else None
    status = "ok" if px > 0 else "degenerate"
    return MeasurementResult(
        MeasurementLine(line.top, line.bottom, mm), 2, float("nan"), status, px, mm
    )


def measure(
    probs: ProbabilityMap, mm_per_pixel: Optional[float] = None, cls: int = 1
) -> MeasurementResult:
    """Full map-to-thickness path; degenerate maps come back with status 'degenerate'."""
    blobs = extract_blobs(probs, cls)
    if blobs.count < 2:
        return MeasurementResult(None, blobs.count, float("nan"), "degenerate")
    line = select_endpoint_pair(blobs)
    sel = np.concatenate(blobs.pixels[:2])
    confidence = float(probs.values()[sel[:, 0], sel[:, 1], cls].mean())
    rec = thickness(line, mm_per_pixel)
    return MeasurementResult(
        rec.line, blobs.count, confidence, rec.status, rec.length_px, rec.length_mm
    )


# ---------------------------------------------------------------------------
# overlay rendering

PRED_COLOUR = (0, 255, 0)
TRUTH_COLOUR = (255, 0, 0)


def render_overlay(
    image: np.ndarray,
    predicted: Optional[MeasurementLine] = None,
    truth: Optional[MeasurementLine] = None,
    path=None,
):
    """RGB overlay: prediction in green, ground truth in red, endpoints as small discs.

    ``image`` is grayscale, either uint8 or floats in [0, 1]. Returns the PIL
    image and writes it when ``path`` is given (format from the suffix; .png
    or .ppm).
    """
    from PIL import Image, ImageDraw

    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    canvas = Image.fromarray(img, mode="L").convert("RGB")
    draw = ImageDraw.Draw(canvas)
    for line, colour in ((truth, TRUTH_COLOUR), (predicted, PRED_COLOUR)):
        if line is None:
            continue
        (r0, c0), (r1, c1) = line.top, line.bottom
        draw.line([(c0, r0), (c1, r1)], fill=colour, width=1)
        for r, c in (line.top, line.bottom):
            draw.ellipse([c - 1.5, r - 1.5, c + 1.5, r + 1.5], outline=colour)
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        canvas.save(path)
    return canvas

