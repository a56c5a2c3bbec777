"""Cross-validation folds stratified by density level and violent/non-violent."""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np

from .labels import NUM_LEVELS


def stratified_folds(samples: Sequence, k: int = 5, seed: int = 0) -> list[list[int]]:
    """Partition sample indices into ``k`` disjoint folds.

    Each density level is dealt round-robin across the folds (continuing the
    rotation from one level to the next), which puts every level's per-fold
    count within one of its proportional share. Violent counts are then
    evened out by swapping a violent and a non-violent sample of the same
    level between folds, which leaves the level histogram untouched.

    ``samples`` needs ``density_level`` and ``violent`` attributes.
    """
    n = len(samples)
    if k < 2:
        raise ValueError("need at least 2 folds")
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    rng = np.random.default_rng(seed)
    levels = np.array([s.density_level for s in samples])
    violent = np.array([bool(s.violent) for s in samples])

    sparse = [lvl for lvl in range(1, NUM_LEVELS + 1) if 0 < (levels == lvl).sum() < k]
    if sparse:
        warnings.warn(
            f"density level(s) {sparse} have fewer than {k} samples; some folds will not contain them",
            stacklevel=2,
        )

    fold_of = np.empty(n, dtype=int)
    pos = int(rng.integers(k))
    for lvl in range(1, NUM_LEVELS + 1):
        members = rng.permutation(np.flatnonzero(levels == lvl))
        for i in members:
            fold_of[i] = pos % k
            pos += 1

    sizes = np.bincount(fold_of, minlength=k)
    share = sizes * violent.sum() / n
    while True:
        excess = np.bincount(fold_of[violent], minlength=k) - share
        hi, lo = int(np.argmax(excess)), int(np.argmin(excess))
        if excess[hi] - excess[lo] <= 1:
            break
        swapped = False
        for lvl in rng.permutation(np.arange(1, NUM_LEVELS + 1)):
            give = np.flatnonzero((fold_of == hi) & violent & (levels == lvl))
            take = np.flatnonzero((fold_of == lo) & ~violent & (levels == lvl))
            if len(give) and len(take):
                fold_of[give[0]], fold_of[take[0]] = lo, hi
                swapped = True
                break
        if not swapped:
            warnings.warn("could not balance violent samples across folds within one sample", stacklevel=2)
            break

    return [sorted(np.flatnonzero(fold_of == f).tolist()) for f in range(k)]
