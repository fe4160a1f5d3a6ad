"""Connected components and seeded watershed with explicit line pixels."""

from __future__ import annotations

from typing import Iterable, Optional

import numba
import numpy as np
from scipy import ndimage

LINE = -1

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def connected_components(mask: np.ndarray, connectivity: int = 4) -> tuple[np.ndarray, int]:
    """Label the foreground of a boolean mask.

    Components are numbered 1..n in raster order of their first pixel;
    background stays 0.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    return labels.astype(np.int64), int(count)


@numba.njit(cache=True)
def _heap_push(keys, ages, vals, size, key, age, val):
    i = size
    keys[i] = key
    ages[i] = age
    vals[i] = val
    while i > 0:
        parent = (i - 1) >> 1
        if keys[parent] < keys[i] or (keys[parent] == keys[i] and ages[parent] < ages[i]):
            break
        keys[parent], keys[i] = keys[i], keys[parent]
        ages[parent], ages[i] = ages[i], ages[parent]
        vals[parent], vals[i] = vals[i], vals[parent]
        i = parent
    return size + 1


@numba.njit(cache=True)
def _heap_pop(keys, ages, vals, size):
    top = vals[0]
    size -= 1
    keys[0] = keys[size]
    ages[0] = ages[size]
    vals[0] = vals[size]
    i = 0
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        best = left
        right = left + 1
        if right < size and (
            keys[right] < keys[left] or (keys[right] == keys[left] and ages[right] < ages[left])
        ):
            best = right
        if keys[i] < keys[best] or (keys[i] == keys[best] and ages[i] < ages[best]):
            break
        keys[best], keys[i] = keys[i], keys[best]
        ages[best], ages[i] = ages[i], ages[best]
        vals[best], vals[i] = vals[i], vals[best]
        i = best
    return top, size


@numba.njit(cache=True)
def _flood(elevation, domain, seed_idx, seed_lab):
    h, w = elevation.shape
    n = h * w
    elev = elevation.ravel()
    dom = domain.ravel()
    labels = np.zeros(n, dtype=np.int64)
    queued = np.zeros(n, dtype=np.bool_)
    keys = np.empty(n, dtype=np.float64)
    ages = np.empty(n, dtype=np.int64)
    vals = np.empty(n, dtype=np.int64)
    size = 0
    age = 0
    for s in range(seed_idx.shape[0]):
        labels[seed_idx[s]] = seed_lab[s]
        queued[seed_idx[s]] = True
    nbr = np.empty(4, dtype=np.int64)
    # seeds expand in their given order, then strictly by (elevation, push age)
    for s in range(seed_idx.shape[0]):
        p = seed_idx[s]
        r = p // w
        c = p - r * w
        nbr[0] = p - w if r > 0 else -1
        nbr[1] = p - 1 if c > 0 else -1
        nbr[2] = p + 1 if c < w - 1 else -1
        nbr[3] = p + w if r < h - 1 else -1
        for k in range(4):
            q = nbr[k]
            if q >= 0 and dom[q] and not queued[q]:
                queued[q] = True
                size = _heap_push(keys, ages, vals, size, elev[q], age, q)
                age += 1
    while size > 0:
        p, size = _heap_pop(keys, ages, vals, size)
        r = p // w
        c = p - r * w
        nbr[0] = p - w if r > 0 else -1
        nbr[1] = p - 1 if c > 0 else -1
        nbr[2] = p + 1 if c < w - 1 else -1
        nbr[3] = p + w if r < h - 1 else -1
        found = 0
        conflict = False
        for k in range(4):
            q = nbr[k]
            if q >= 0:
                lab = labels[q]
                if lab > 0:
                    if found == 0:
                        found = lab
                    elif lab != found:
                        conflict = True
        if conflict:
            labels[p] = -1
            continue
        labels[p] = found
        for k in range(4):
            q = nbr[k]
            if q >= 0 and dom[q] and not queued[q]:
                queued[q] = True
                size = _heap_push(keys, ages, vals, size, elev[q], age, q)
                age += 1
    return labels.reshape(h, w)


def seeded_watershed(
    elevation: np.ndarray,
    seeds: Iterable[tuple[int, int]],
    domain: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Priority-flood watershed over 4-connected pixels.

    Returns a label map: 0 outside the domain, k >= 1 for the basin of the
    k-th distinct seed, ``LINE`` (-1) where basins meet. Domain pixels cut
    off from every seed by line pixels are also ``LINE``.

    Seeds are expanded in order of ascending elevation (raster order on ties).
    After that pixels are flooded by (elevation, queue age), so equal-elevation
    plateaus grow breadth-first from every basin at once. A pixel whose
    already-labelled neighbours carry two different basins becomes a line
    pixel and does not propagate.
    """
    elevation = np.ascontiguousarray(elevation, dtype=np.float64)
    h, w = elevation.shape
    dom = np.ones((h, w), dtype=bool) if domain is None else np.ascontiguousarray(domain, dtype=bool)
    flat: list[int] = []
    for r, c in seeds:
        r, c = int(r), int(c)
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"seed ({r}, {c}) outside {h}x{w} elevation map")
        if not dom[r, c]:
            raise ValueError(f"seed ({r}, {c}) lies outside the flooding domain")
        idx = r * w + c
        if idx not in flat:
            flat.append(idx)
    if not flat:
        return np.zeros((h, w), dtype=np.int64)
    order = sorted(range(len(flat)), key=lambda i: (elevation.flat[flat[i]], flat[i]))
    seed_idx = np.array([flat[i] for i in order], dtype=np.int64)
    seed_lab = np.array([i + 1 for i in order], dtype=np.int64)
    labels = _flood(elevation, dom, seed_idx, seed_lab)
    # pockets walled in by line pixels belong to no basin
    labels[(labels == 0) & dom] = LINE
    return labels


def watershed_lines(
    elevation: np.ndarray,
    seeds: Iterable[tuple[int, int]],
    domain: Optional[np.ndarray] = None,
) -> np.ndarray:
    return seeded_watershed(elevation, seeds, domain) == LINE
