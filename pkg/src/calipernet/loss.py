"""Point-supervised LCFCN loss: image, point, split and false-positive terms.

Blob structure (argmax mask, components, watershed lines) is derived from the
probability values and treated as constant; gradients flow only through the
log-probabilities the terms pick out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .morphology import connected_components, seeded_watershed, LINE
from .tensor import ProbabilityMap, Tensor


@dataclass
class AnnotationSet:
    """Ground-truth points as (row, col, class); class 0 is reserved for background."""

    points: list[tuple[int, int, int]] = field(default_factory=list)
    num_classes: int = 2

    def __post_init__(self):
        self.points = [(int(r), int(c), int(k)) for r, c, k in self.points]
        for r, c, k in self.points:
            if not 1 <= k < self.num_classes:
                raise ValueError(f"annotation ({r}, {c}) has invalid class {k}")

    @classmethod
    def from_points(cls, points: Sequence[tuple[int, int]], cls_id: int = 1, num_classes: int = 2):
        return cls([(r, c, cls_id) for r, c in points], num_classes)

    @property
    def present_classes(self) -> list[int]:
        return sorted({k for _, _, k in self.points})

    @property
    def absent_classes(self) -> list[int]:
        present = set(self.present_classes)
        return [k for k in range(1, self.num_classes) if k not in present]

    def of_class(self, k: int) -> list[tuple[int, int]]:
        return [(r, c) for r, c, kk in self.points if kk == k]

    def check_bounds(self, h: int, w: int) -> None:
        for r, c, _ in self.points:
            if not (0 <= r < h and 0 <= c < w):
                raise ValueError(f"annotation ({r}, {c}) outside {h}x{w} image")


@dataclass
class BlobSet:
    """Connected foreground components of one class plus the loss bookkeeping."""

    cls: int
    labels: np.ndarray
    count: int
    pixels: list[np.ndarray]
    alpha: Optional[np.ndarray] = None
    split_boundaries: Optional[np.ndarray] = None
    false_positive_pixels: Optional[np.ndarray] = None

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(p) for p in self.pixels], dtype=np.int64)

    def alpha_map(self) -> np.ndarray:
        """Per-pixel annotation count of the containing blob; 1 outside all blobs."""
        if self.alpha is None:
            raise ValueError("alpha not computed for this BlobSet")
        lut = np.concatenate([[1], self.alpha]).astype(np.float64)
        return lut[self.labels]


def foreground_mask(probs: ProbabilityMap, cls: int = 1) -> np.ndarray:
    """Pixels whose argmax channel is ``cls`` (ties go to the lower channel)."""
    if cls < 1:
        raise ValueError("foreground class must be >= 1")
    return np.argmax(probs.values(), axis=2) == cls


def _pixel_lists(labels: np.ndarray, count: int) -> list[np.ndarray]:
    if count == 0:
        return []
    flat = labels.ravel()
    idx = np.flatnonzero(flat)
    order = np.argsort(flat[idx], kind="stable")
    idx = idx[order]
    splits = np.cumsum(np.bincount(flat[idx], minlength=count + 1)[1:])[:-1]
    rc = np.stack(divmod(idx, labels.shape[1]), axis=1)
    return np.split(rc, splits)


def blobs_from_mask(mask: np.ndarray, cls: int = 1, connectivity: int = 4) -> BlobSet:
    labels, count = connected_components(mask, connectivity)
    return BlobSet(cls, labels, count, _pixel_lists(labels, count))


def watershed_split(probs: ProbabilityMap, ann: AnnotationSet, blobs: BlobSet) -> np.ndarray:
    """Boundary pixel set T_b (boolean mask) for one class.

    Union of the global watershed lines over the whole image and the local
    lines inside every blob holding two or more annotations. Elevation is the
    negative class probability, seeds are the annotation points.
    """
    h, w = blobs.labels.shape
    seeds = ann.of_class(blobs.cls)
    boundary = np.zeros((h, w), dtype=bool)
    if len(seeds) < 2:
        return boundary
    elevation = -probs.values()[:, :, blobs.cls]
    boundary |= seeded_watershed(elevation, seeds) == LINE
    if blobs.count:
        seed_labels = np.array([blobs.labels[r, c] for r, c in seeds])
        for k in range(1, blobs.count + 1):
            inside = [s for s, lab in zip(seeds, seed_labels) if lab == k]
            if len(inside) >= 2:
                boundary |= seeded_watershed(elevation, inside, blobs.labels == k) == LINE
    return boundary


def derive_blobs(
    probs: ProbabilityMap, ann: AnnotationSet, cls: int = 1, connectivity: int = 4
) -> BlobSet:
    """Components of the argmax mask with annotation counts, T_b and B_fp filled in."""
    h, w = probs.shape[:2]
    ann.check_bounds(h, w)
    blobs = blobs_from_mask(foreground_mask(probs, cls), cls, connectivity)
    alpha = np.zeros(blobs.count, dtype=np.int64)
    for r, c in ann.of_class(cls):
        lab = blobs.labels[r, c]
        if lab:
            alpha[lab - 1] += 1
    blobs.alpha = alpha
    fp_ids = np.flatnonzero(alpha == 0) + 1
    blobs.false_positive_pixels = np.isin(blobs.labels, fp_ids)
    blobs.split_boundaries = watershed_split(probs, ann, blobs)
    return blobs


def image_level_loss(probs: ProbabilityMap, ann: AnnotationSet) -> Tensor:
    """Push the most confident pixel of each present class up, of each absent class down."""
    p = probs.values()
    h, w, _ = p.shape
    logp = probs.log()
    total = Tensor(0.0)
    present, absent = ann.present_classes, ann.absent_classes
    if present:
        terms = []
        for c in present:
            r, col = divmod(int(np.argmax(p[:, :, c])), w)
            terms.append(T.take(logp, (np.array([r]), np.array([col]), np.array([c]))))
        acc = terms[0]
        for t in terms[1:]:
            acc = acc + t
        total = total - acc.sum() * (1.0 / len(present))
    if absent:
        terms = []
        for c in absent:
            r, col = divmod(int(np.argmax(p[:, :, c])), w)
            others = np.array([k for k in range(p.shape[2]) if k != c])
            rows = np.full(len(others), r)
            cols = np.full(len(others), col)
            # log(1 - p_c) = log(sum of the other channels)
            terms.append(T.logsumexp(T.take(logp, (rows, cols, others))))
        acc = terms[0]
        for t in terms[1:]:
            acc = acc + t
        total = total - acc * (1.0 / len(absent))
    return total


def point_level_loss(probs: ProbabilityMap, ann: AnnotationSet) -> Tensor:
    h, w = probs.shape[:2]
    ann.check_bounds(h, w)
    if not ann.points:
        return Tensor(0.0)
    pts = np.array(ann.points)
    return -T.take(probs.log(), (pts[:, 0], pts[:, 1], pts[:, 2])).sum()


def split_level_loss(probs: ProbabilityMap, ann: AnnotationSet, blobs: BlobSet) -> Tensor:
    """-sum over T_b of alpha_i * log P(background)."""
    if blobs.split_boundaries is None:
        blobs.split_boundaries = watershed_split(probs, ann, blobs)
    if blobs.alpha is None:
        raise ValueError("split_level_loss needs a BlobSet with alpha computed")
    rows, cols = np.nonzero(blobs.split_boundaries)
    if rows.size == 0:
        return Tensor(0.0)
    weights = blobs.alpha_map()[rows, cols]
    picked = T.take(probs.log(), (rows, cols, np.zeros_like(rows)))
    return -(picked * weights).sum()


def false_positive_loss(probs: ProbabilityMap, blobs: BlobSet) -> Tensor:
    """-sum over pixels of annotation-free blobs of log P(background)."""
    if blobs.false_positive_pixels is None:
        raise ValueError("false_positive_loss needs a BlobSet with B_fp computed")
    rows, cols = np.nonzero(blobs.false_positive_pixels)
    if rows.size == 0:
        return Tensor(0.0)
    return -T.take(probs.log(), (rows, cols, np.zeros_like(rows))).sum()


@dataclass
class LossResult:
    total: Tensor
    image: Tensor
    point: Tensor
    split: Tensor
    false_positive: Tensor
    blobs: list[BlobSet]

    def breakdown(self) -> dict[str, float]:
        return {
            "L_I": self.image.item(),
            "L_P": self.point.item(),
            "L_S": self.split.item(),
            "L_F": self.false_positive.item(),
            "total": self.total.item(),
        }


def lcfcn_loss(
    probs: ProbabilityMap,
    ann: AnnotationSet,
    blobs: Optional[Sequence[BlobSet]] = None,
    connectivity: int = 4,
) -> LossResult:
    """Sum of the four terms; blobs are derived fresh unless supplied."""
    if blobs is None:
        blobs = [
            derive_blobs(probs, ann, k, connectivity) for k in range(1, probs.num_classes)
        ]
    l_i = image_level_loss(probs, ann)
    l_p = point_level_loss(probs, ann)
    l_s = Tensor(0.0)
    l_f = Tensor(0.0)
    for b in blobs:
        l_s = l_s + split_level_loss(probs, ann, b)
        l_f = l_f + false_positive_loss(probs, b)
    total = l_i + l_p + l_s + l_f
    return LossResult(total, l_i, l_p, l_s, l_f, list(blobs))


def structure_signature(probs: ProbabilityMap, ann: AnnotationSet) -> tuple:
    """Hashable summary of every discrete choice the loss makes for these probs.

    Two evaluations with equal signatures differ only through smooth terms.
    """
    p = probs.values()
    parts: list = [tuple(int(np.argmax(p[:, :, c])) for c in range(1, p.shape[2]))]
    for k in range(1, p.shape[2]):
        b = derive_blobs(probs, ann, k)
        parts.append(b.labels.tobytes())
        parts.append(b.split_boundaries.tobytes())
    return tuple(parts)
