import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calipernet.morphology import LINE, connected_components, seeded_watershed, watershed_lines
from oracles import flood_fill_components


def same_partition(a, b):
    pairs = set(zip(a.ravel().tolist(), b.ravel().tolist()))
    return len(pairs) == len({p[0] for p in pairs}) == len({p[1] for p in pairs})


def test_components_match_flood_fill_on_random_masks():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        mask = rng.random((16, 16)) < rng.uniform(0.2, 0.8)
        got, n = connected_components(mask)
        want, m = flood_fill_components(mask)
        assert n == m, trial
        np.testing.assert_array_equal(got == 0, ~mask)
        assert same_partition(got, want), trial


def test_components_eight_connectivity():
    mask = np.eye(4, dtype=bool)
    assert connected_components(mask, 4)[1] == 4
    assert connected_components(mask, 8)[1] == 1


def test_components_empty_and_invalid():
    labels, n = connected_components(np.zeros((3, 3), dtype=bool))
    assert n == 0 and not labels.any()
    with pytest.raises(ValueError):
        connected_components(np.ones((2, 2), dtype=bool), connectivity=6)


def test_uniform_strip_splits_in_the_middle():
    lab = seeded_watershed(np.zeros((1, 7)), [(0, 0), (0, 6)])
    np.testing.assert_array_equal(lab[0], [1, 1, 1, LINE, 2, 2, 2])


def test_ridge_becomes_the_line():
    elevation = np.array([[0.0, 0.1, 0.2, 0.9, 0.3, 0.1, 0.0]])
    lab = seeded_watershed(elevation, [(0, 0), (0, 6)])
    assert lab[0, 3] == LINE
    assert (lab[0, :3] == 1).all() and (lab[0, 4:] == 2).all()


def test_single_seed_has_no_lines():
    rng = np.random.default_rng(3)
    lab = seeded_watershed(rng.random((8, 8)), [(4, 4)])
    assert (lab == 1).all()


def test_duplicate_seeds_merge():
    lab = seeded_watershed(np.zeros((3, 3)), [(1, 1), (1, 1)])
    assert (lab == 1).all()


def test_domain_restricts_flooding():
    dom = np.zeros((4, 4), dtype=bool)
    dom[1:3, 1:3] = True
    lab = seeded_watershed(np.zeros((4, 4)), [(1, 1)], dom)
    assert (lab[dom] == 1).all() and (lab[~dom] == 0).all()


def test_seed_errors():
    with pytest.raises(ValueError, match="outside"):
        seeded_watershed(np.zeros((3, 3)), [(3, 0)])
    dom = np.zeros((3, 3), dtype=bool)
    with pytest.raises(ValueError, match="domain"):
        seeded_watershed(np.zeros((3, 3)), [(0, 0)], dom)


def test_no_seeds_gives_empty_map():
    assert not seeded_watershed(np.zeros((2, 2)), []).any()


def random_blob(rng, size=16):
    """A 4-connected blob grown by a random walk of pixel additions."""
    mask = np.zeros((size, size), dtype=bool)
    r, c = size // 2, size // 2
    mask[r, c] = True
    target = int(rng.integers(20, 120))
    frontier = [(r, c)]
    while mask.sum() < target:
        y, x = frontier[int(rng.integers(len(frontier)))]
        dy, dx = [(-1, 0), (1, 0), (0, -1), (0, 1)][int(rng.integers(4))]
        yy, xx = y + dy, x + dx
        if 0 <= yy < size and 0 <= xx < size and not mask[yy, xx]:
            mask[yy, xx] = True
            frontier.append((yy, xx))
    return mask


def pick_separated_seeds(rng, mask, k):
    # seeds that touch each other cannot be separated by any line pixel
    cells = np.argwhere(mask)
    rng.shuffle(cells)
    chosen = []
    for r, c in cells:
        if all(abs(r - a) + abs(c - b) > 1 for a, b in chosen):
            chosen.append((int(r), int(c)))
        if len(chosen) == k:
            break
    return chosen


def test_split_property_on_random_multi_seed_blobs():
    rng = np.random.default_rng(11)
    checked = 0
    for trial in range(200):
        mask = random_blob(rng)
        seeds = pick_separated_seeds(rng, mask, int(rng.integers(2, 5)))
        assert len(seeds) >= 2
        elevation = -rng.random(mask.shape)
        if trial % 3 == 0:
            elevation = np.round(elevation, 1)  # plenty of plateaus
        lines = watershed_lines(elevation, seeds, mask)
        assert not lines[~mask].any()
        parts, n = flood_fill_components(mask & ~lines)
        seeds_per_part = np.zeros(n + 1, dtype=int)
        for r, c in seeds:
            assert not lines[r, c]
            seeds_per_part[parts[r, c]] += 1
        assert (seeds_per_part[1:] == 1).all(), trial
        checked += 1
    assert checked == 200


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_basins_never_touch(seed, k):
    rng = np.random.default_rng(seed)
    elevation = rng.random((10, 10))
    seeds = pick_separated_seeds(rng, np.ones((10, 10), dtype=bool), k)
    lab = seeded_watershed(elevation, seeds)
    horiz = (lab[:, 1:] > 0) & (lab[:, :-1] > 0) & (lab[:, 1:] != lab[:, :-1])
    vert = (lab[1:] > 0) & (lab[:-1] > 0) & (lab[1:] != lab[:-1])
    assert not horiz.any() and not vert.any()
    for i, (r, c) in enumerate(seeds):
        assert lab[r, c] > 0
