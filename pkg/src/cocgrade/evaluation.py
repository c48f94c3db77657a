"""Segmentation overlap metrics, classification scores and the stratified split."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import EmptyInput, InvalidParams, ShapeMismatch
from .grades import GRADES, Grade
from .raster import BitMask


def _bits(a: BitMask | np.ndarray) -> np.ndarray:
    return a.bits if isinstance(a, BitMask) else np.asarray(a, dtype=bool)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _bits(a), _bits(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a: BitMask, b: BitMask) -> float:
    """``2|a & b| / (|a| + |b|)``; two empty masks agree perfectly (1.0)."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def _c2(k) -> int:
    k = int(k)
    return k * (k - 1) // 2


def rand_index(a: BitMask, b: BitMask) -> float:
    """Unadjusted Rand index of the two binary pixel partitions.

    Uses the 2x2 contingency table: agreements =
    C(n,2) + 2*sum C(n_ij,2) - sum C(a_i,2) - sum C(b_j,2).
    """
    a, b = _pair(a, b)
    n = a.size
    if n < 2:
        raise ShapeMismatch("Rand index needs at least two pixels")
    n11 = int(np.count_nonzero(a & b))
    n10 = int(np.count_nonzero(a & ~b))
    n01 = int(np.count_nonzero(~a & b))
    n00 = n - n11 - n10 - n01
    pairs = _c2(n)
    same_both = sum(_c2(k) for k in (n11, n10, n01, n00))
    same_a = _c2(n11 + n10) + _c2(n01 + n00)
    same_b = _c2(n11 + n01) + _c2(n10 + n00)
    return (pairs + 2 * same_both - same_a - same_b) / pairs


def confusion_and_accuracy(true: Sequence, pred: Sequence) -> tuple[np.ndarray, float]:
    """4x4 counts (rows true, columns predicted) and overall accuracy."""
    if len(true) != len(pred):
        raise ShapeMismatch(f"{len(true)} true labels but {len(pred)} predictions")
    if len(true) == 0:
        raise EmptyInput("no samples to score")
    cm = np.zeros((len(GRADES), len(GRADES)), dtype=np.int64)
    for t, p in zip(true, pred):
        cm[int(Grade.parse(t)), int(Grade.parse(p))] += 1
    return cm, float(np.trace(cm)) / float(cm.sum())


def class_train_count(fraction: float, n_c: int) -> int:
    # guard against products like 0.55 * 100 == 55.00000000000001 rounding up
    return min(n_c, max(0, math.ceil(fraction * n_c - 1e-9)))


def stratified_split(labels: Sequence, train_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Per class, ``ceil(fraction * n_c)`` seeded-shuffle picks go to train.

    Returns sorted ``(train, test)`` index lists.
    """
    if not 0 < train_fraction < 1:
        raise InvalidParams(f"train_fraction must lie in (0, 1), got {train_fraction}")
    grades = [Grade.parse(g) for g in labels]
    if not grades:
        raise EmptyInput("no labels to split")
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    train: list[int] = []
    for g in GRADES:
        idx = np.array([i for i, x in enumerate(grades) if x == g], dtype=np.int64)
        if len(idx) == 0:
            continue
        perm = rng.permutation(idx)
        train.extend(int(i) for i in perm[:class_train_count(train_fraction, len(idx))])
    train_set = set(train)
    test = [i for i in range(len(grades)) if i not in train_set]
    return sorted(train), test
