"""Shared fixture builders for quality-discrimination tests."""

import numpy as np

from genview.saliency import fit_foreground_direction


def _unit_rows(rows, against=None):
    if against is not None:
        rows = rows - np.outer(rows @ against, against)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def make_fixture_batch(seed, n_pairs=16, dim=12, grid=(4, 4), n_clusters=4,
                       corrupt_fraction=0.5, fg_strength=3.0, class_strength=3.0,
                       noise=0.25):
    """Batch of positive pairs, half with foregrounds from a different cluster.

    Returns (pairs, corrupted_flags, direction): pairs are
    (pair_id, map1, map2) triples ready for score_image_pairs; the direction
    is fitted on all maps in the batch.
    """
    rng = np.random.default_rng(seed)
    h, w = grid
    hw = h * w
    n_fg = max(1, int(round(0.4 * hw)))

    mu = rng.standard_normal(dim)
    mu /= np.linalg.norm(mu)
    centers = _unit_rows(rng.standard_normal((n_clusters, dim)), mu)
    pool = _unit_rows(rng.standard_normal((8, dim)), mu)

    def build(label, bg_rows=None):
        tokens = np.empty((hw, dim))
        pos = rng.permutation(hw)
        fg = (fg_strength * mu + class_strength * centers[label]
              + noise * rng.standard_normal((n_fg, dim)))
        if bg_rows is None:
            bg_rows = pool[rng.integers(0, len(pool), hw - n_fg)] \
                + noise * rng.standard_normal((hw - n_fg, dim))
        tokens[pos[:n_fg]] = fg
        tokens[pos[n_fg:]] = bg_rows
        return tokens.reshape(h, w, dim), bg_rows

    n_corrupt = int(round(corrupt_fraction * n_pairs))
    flags = np.zeros(n_pairs, dtype=bool)
    flags[:n_corrupt] = True
    rng.shuffle(flags)

    pairs, all_maps = [], []
    for i, corrupted in enumerate(flags):
        label = int(rng.integers(n_clusters))
        map1, bg_rows = build(label)
        if corrupted:
            other = (label + 1 + int(rng.integers(n_clusters - 1))) % n_clusters
            map2, _ = build(other, bg_rows=bg_rows.copy())
        else:
            map2, _ = build(label)
        pairs.append((f"p{i:03d}", map1, map2))
        all_maps.extend([map1, map2])

    direction = fit_foreground_direction(all_maps, seed=seed)
    return pairs, flags, direction
