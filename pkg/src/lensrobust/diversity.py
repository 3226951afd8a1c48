"""Greedy diverse top-k pixel selection and the ``-div`` metric variants."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import AttributionMap, PixelSet
from .errors import CapacityError, DomainError
from .metrics import _check_pair, dilate


@dataclass(frozen=True)
class DiverseSelection:
    coords: PixelSet
    w_div: int
    total_score: float

    def mask(self) -> np.ndarray:
        return self.coords.mask()


def max_separated(dims: tuple[int, int], w_div: int) -> int:
    """Largest number of pixels with pairwise Chebyshev distance > w_div.

    Every (w_div+1)-square block holds at most one such pixel, and taking every
    (w_div+1)-th row and column attains that count.
    """
    step = w_div + 1
    return (-(-dims[0] // step)) * (-(-dims[1] // step))


def diverse_top_k(amap: AttributionMap, k: int, w_div: int) -> DiverseSelection:
    """Greedy selection: take the best unblocked pixel, then block its window.

    Pixels are visited in the same order as :func:`top_k_set` (score
    descending, then row-major). Raises :class:`CapacityError` if the greedy
    pass runs out of unblocked pixels before reaching ``k``.
    """
    if k < 1:
        raise DomainError(f"k={k} must be positive")
    if w_div < 0:
        raise DomainError(f"w_div={w_div} must be nonnegative")
    h, w = amap.shape
    flat = amap.values.ravel()
    order = np.argsort(-flat, kind="stable")
    blocked = np.zeros((h, w), dtype=bool)
    chosen = []
    for idx in order:
        r, c = divmod(int(idx), w)
        if blocked[r, c]:
            continue
        chosen.append(int(idx))
        blocked[max(0, r - w_div):r + w_div + 1, max(0, c - w_div):c + w_div + 1] = True
        if len(chosen) == k:
            break
    if len(chosen) < k:
        raise CapacityError(k, len(chosen), max_separated((h, w), w_div))
    total = math.fsum(float(flat[i]) for i in chosen)
    return DiverseSelection(PixelSet.from_flat_indices(chosen, (h, w)), w_div, total)


def _div_masks(a, b, k, w_div):
    _check_pair(a, b)
    return diverse_top_k(a, k, w_div).mask(), diverse_top_k(b, k, w_div).mask()


def topk_div_intersection(a: AttributionMap, b: AttributionMap, k: int, w_div: int) -> float:
    s, t = _div_masks(a, b, k, w_div)
    return int(np.count_nonzero(s & t)) / k


def lens_prec_at_k_div(a: AttributionMap, b: AttributionMap, k: int, w: int, w_div: int) -> float:
    s, t = _div_masks(a, b, k, w_div)
    return int(np.count_nonzero(s & dilate(t, w))) / k


def lens_recall_at_k_div(a: AttributionMap, b: AttributionMap, k: int, w: int, w_div: int) -> float:
    s, t = _div_masks(a, b, k, w_div)
    return int(np.count_nonzero(t & dilate(s, w))) / k
