"""Locality-sensitive (LENS) similarity and distance measures between attribution maps.

Set-based measures work on the top-k pixel sets of two maps; ``w`` is the
half-width of the square neighborhood window, so ``w = 0`` recovers the plain
top-k intersection. Rank correlations are computed on flattened maps, and the
LENS variants on box-smoothed maps.

The first map argument is always the attribution of the original input and
the second that of the perturbed input.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata

from .core import AttributionMap, PixelSet, format_real
from .errors import DataError, DomainError, UndefinedCorrelationError


# --- ranking and windows ----------------------------------------------------


def pixel_ranks(amap: AttributionMap) -> np.ndarray:
    """0-based rank of every pixel (row-major flat order): 0 is the largest score.

    Ties are ordered by row-major position, which is what makes top-k sets
    deterministic.
    """
    order = np.argsort(-amap.values.ravel(), kind="stable")
    ranks = np.empty(order.size, dtype=np.int64)
    ranks[order] = np.arange(order.size)
    return ranks


def _check_k(amap: AttributionMap, k: int) -> None:
    if not 1 <= k <= amap.size:
        raise DomainError(f"k={k} outside [1, {amap.size}]")


def _check_w(w: int) -> None:
    if w < 0:
        raise DomainError(f"window half-width w={w} must be nonnegative")


def _check_pair(a: AttributionMap, b: AttributionMap) -> None:
    if a.shape != b.shape:
        raise DomainError(f"map shapes differ: {a.shape} vs {b.shape}")


def top_k_mask(amap: AttributionMap, k: int) -> np.ndarray:
    _check_k(amap, k)
    return (pixel_ranks(amap) < k).reshape(amap.shape)


def top_k_set(amap: AttributionMap, k: int) -> PixelSet:
    """The ``k`` highest-scoring pixels, in descending score order."""
    _check_k(amap, k)
    order = np.argsort(-amap.values.ravel(), kind="stable")[:k]
    return PixelSet.from_flat_indices(order, amap.shape)


def window_sum(grid: np.ndarray, w: int) -> np.ndarray:
    """Sum over each clipped ``(2w+1) x (2w+1)`` window (zero padding outside)."""
    if w == 0:
        return grid.copy()
    size = 2 * w + 1
    padded = np.pad(grid, w, mode="constant")
    return sliding_window_view(padded, (size, size)).sum(axis=(-1, -2))


def window_min(grid: np.ndarray, w: int, fill) -> np.ndarray:
    """Minimum over each clipped window; out-of-image cells count as ``fill``."""
    if w == 0:
        return grid.copy()
    size = 2 * w + 1
    padded = np.pad(grid, w, mode="constant", constant_values=fill)
    return sliding_window_view(padded, (size, size)).min(axis=(-1, -2))


def dilate(mask: np.ndarray, w: int) -> np.ndarray:
    """Union of the windows around every True cell, clipped to the grid."""
    _check_w(w)
    return window_sum(np.asarray(mask, dtype=np.int64), w) > 0


def neighborhood_union(pset: PixelSet, w: int, dims: Optional[tuple[int, int]] = None) -> PixelSet:
    """All pixels within Chebyshev distance ``w`` of some member of ``pset``."""
    _check_w(w)
    if dims is not None and tuple(dims) != pset.dims:
        pset = PixelSet(pset.coords, tuple(dims))
    if w == 0:
        return pset
    return PixelSet.from_mask(dilate(pset.mask(), w))


# --- top-k family -----------------------------------------------------------


def _set_overlap(s_mask: np.ndarray, t_mask: np.ndarray, w: int) -> int:
    """|S ∩ N_w(T)|"""
    return int(np.count_nonzero(s_mask & dilate(t_mask, w)))


def topk_intersection(a: AttributionMap, b: AttributionMap, k: int) -> float:
    _check_pair(a, b)
    s, t = top_k_mask(a, k), top_k_mask(b, k)
    return int(np.count_nonzero(s & t)) / k


def lens_prec_at_k(a: AttributionMap, b: AttributionMap, k: int, w: int) -> float:
    """w-LENS-prec@k: share of the original top-k lying near the perturbed top-k."""
    _check_pair(a, b)
    _check_w(w)
    return _set_overlap(top_k_mask(a, k), top_k_mask(b, k), w) / k


def lens_recall_at_k(a: AttributionMap, b: AttributionMap, k: int, w: int) -> float:
    """w-LENS-recall@k: share of the perturbed top-k lying near the original top-k."""
    _check_pair(a, b)
    _check_w(w)
    return _set_overlap(top_k_mask(b, k), top_k_mask(a, k), w) / k


def lens_distance(a: AttributionMap, b: AttributionMap, k: int, w: int) -> float:
    """d_k^(w) = |S_k minus N_w(T_k)|/k + |T_k minus N_w(S_k)|/k, in [0, 2]."""
    _check_pair(a, b)
    _check_w(w)
    s, t = top_k_mask(a, k), top_k_mask(b, k)
    missed = (k - _set_overlap(s, t, w)) + (k - _set_overlap(t, s, w))
    return missed / k


def symmetric_difference_ratio(a: AttributionMap, b: AttributionMap, k: int) -> float:
    """|S_k △ T_k| / k"""
    _check_pair(a, b)
    s, t = top_k_mask(a, k), top_k_mask(b, k)
    return int(np.count_nonzero(s ^ t)) / k


# --- combined distance and its metric upper bound ---------------------------


@dataclass(frozen=True)
class WeightSchedule:
    """Truncated weights ``alpha[k-1]`` for k = 1..k_max and ``beta[w]`` for w = 0..w_max.

    ``alpha_tail`` and ``beta_tail`` are the (possibly infinite-series) weight
    mass dropped by the truncation; they only enter the remainder bound.
    """

    alpha: tuple[float, ...]
    beta: tuple[float, ...]
    alpha_tail: float = 0.0
    beta_tail: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(x) for x in self.alpha))
        object.__setattr__(self, "beta", tuple(float(x) for x in self.beta))
        for name in ("alpha", "beta"):
            seq = getattr(self, name)
            if not seq:
                raise DomainError(f"{name} weights are empty")
            if any(not math.isfinite(x) or x < 0 for x in seq):
                raise DomainError(f"{name} weights must be finite and nonnegative")
            if any(later > earlier for earlier, later in zip(seq, seq[1:])):
                raise DomainError(f"{name} weights must be non-increasing")
            if not sum(seq) > 0:
                raise DomainError(f"{name} weights sum to zero")
        for name in ("alpha_tail", "beta_tail"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise DomainError(f"{name} must be finite and nonnegative")

    @classmethod
    def default(cls, k_max: int = 64, w_max: int = 8) -> "WeightSchedule":
        """alpha_k = 2^-k, beta_w = 2^-(w+1); tails are the exact geometric remainders."""
        return cls(
            alpha=tuple(2.0 ** -k for k in range(1, k_max + 1)),
            beta=tuple(2.0 ** -(w + 1) for w in range(w_max + 1)),
            alpha_tail=2.0 ** -k_max,
            beta_tail=2.0 ** -(w_max + 1),
        )

    @classmethod
    def single(cls, k: int, w: int) -> "WeightSchedule":
        """Unit weight on one (k, w) term.

        Such a schedule is not monotone in general, so validation is bypassed;
        it exists to isolate individual terms of the double sum.
        """
        obj = object.__new__(cls)
        object.__setattr__(obj, "alpha", tuple([0.0] * (k - 1) + [1.0]))
        object.__setattr__(obj, "beta", tuple([0.0] * w + [1.0]))
        object.__setattr__(obj, "alpha_tail", 0.0)
        object.__setattr__(obj, "beta_tail", 0.0)
        return obj

    @property
    def k_max(self) -> int:
        return len(self.alpha)

    @property
    def w_max(self) -> int:
        return len(self.beta) - 1

    def remainder_bound(self, n_pixels: Optional[int] = None) -> float:
        """Upper bound on the mass the truncated double sum leaves out.

        Uses d_k^(w) <= 2. When the grid has fewer than ``k_max`` pixels the
        terms with k > n_pixels are skipped and counted here as well.
        """
        alpha_kept = list(self.alpha)
        alpha_tail = self.alpha_tail
        if n_pixels is not None and n_pixels < len(alpha_kept):
            alpha_tail += sum(alpha_kept[n_pixels:])
            alpha_kept = alpha_kept[:n_pixels]
        beta_total = sum(self.beta) + self.beta_tail
        return 2.0 * alpha_tail * beta_total + 2.0 * sum(alpha_kept) * self.beta_tail


def _overlap_profile(rank_s: np.ndarray, rank_t: np.ndarray, shape, w: int, kmax: int) -> np.ndarray:
    """|S_k ∩ N_w(T_k)| for every k = 1..kmax at once.

    A pixel p of S_k is covered by N_w(T_k) iff the smallest T-rank within its
    window is below k, so p contributes for every k > max(rank_s[p], min-window
    T-rank).
    """
    n = rank_s.size
    nearest_t = window_min(rank_t.reshape(shape), w, fill=n).ravel()
    enters = np.maximum(rank_s, nearest_t)
    counts = np.bincount(enters, minlength=n + 1)
    return np.cumsum(counts)[:kmax]


def _distance_terms(a: AttributionMap, b: AttributionMap, sched: WeightSchedule):
    _check_pair(a, b)
    n = a.size
    kmax = min(sched.k_max, n)
    ra, rb = pixel_ranks(a), pixel_ranks(b)
    ks = np.arange(1, kmax + 1)
    inter = np.cumsum(np.bincount(np.maximum(ra, rb), minlength=n + 1))[:kmax]
    sym_diff = 2 * ks - 2 * inter
    missed = np.empty((sched.w_max + 1, kmax), dtype=np.int64)
    for w in range(sched.w_max + 1):
        prec_hits = _overlap_profile(ra, rb, a.shape, w, kmax)
        recall_hits = _overlap_profile(rb, ra, a.shape, w, kmax)
        missed[w] = (ks - prec_hits) + (ks - recall_hits)
    return ks, missed, sym_diff


def _weighted_sum(sched: WeightSchedule, ks: np.ndarray, numerators_by_w) -> float:
    # fixed summation order (k outer, w inner) so that termwise-ordered
    # inputs stay ordered after rounding
    total = 0.0
    for i, k in enumerate(ks):
        alpha = sched.alpha[i]
        if alpha == 0.0:
            continue
        inner = 0.0
        for w, beta in enumerate(sched.beta):
            if beta == 0.0:
                continue
            inner += beta * (int(numerators_by_w(w)[i]) / int(k))
        total += alpha * inner
    return total


def combined_distance(a: AttributionMap, b: AttributionMap, sched: Optional[WeightSchedule] = None) -> float:
    """Truncated sum over k and w of alpha_k * beta_w * d_k^(w)(a, b).

    Terms with k above the pixel count are skipped; see
    :meth:`WeightSchedule.remainder_bound` for what the truncation can miss.
    """
    sched = sched or WeightSchedule.default()
    ks, missed, _ = _distance_terms(a, b, sched)
    return _weighted_sum(sched, ks, lambda w: missed[w])


def upper_bound_u(a: AttributionMap, b: AttributionMap, sched: Optional[WeightSchedule] = None) -> float:
    """Truncated sum over k and w of alpha_k * beta_w * |S_k △ T_k| / k."""
    sched = sched or WeightSchedule.default()
    ks, _, sym_diff = _distance_terms(a, b, sched)
    return _weighted_sum(sched, ks, lambda w: sym_diff)


# --- smoothing and rank correlations -----------------------------------------


def smooth_map(amap: AttributionMap, w: int) -> AttributionMap:
    """Box filter with a fixed ``(2w+1)^2`` denominator, also at the border.

    Keeping the full denominator where the window is clipped is what keeps the
    filter an l2 contraction.
    """
    _check_w(w)
    if w == 0:
        return amap
    return AttributionMap(window_sum(amap.values, w) / float((2 * w + 1) ** 2))


def _flat_pair(a: AttributionMap, b: AttributionMap):
    _check_pair(a, b)
    x, y = a.values.ravel(), b.values.ravel()
    if x.size < 2:
        raise DomainError("rank correlation needs at least 2 entries")
    return x, y


def spearman_rho(a: AttributionMap, b: AttributionMap) -> float:
    """Pearson correlation of average ranks."""
    x, y = _flat_pair(a, b)
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    rx -= rx.mean()
    ry -= ry.mean()
    sxx, syy = float(rx @ rx), float(ry @ ry)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("Spearman's rho is undefined for a constant map")
    rho = float(rx @ ry) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, rho))


def kendall_tau(a: AttributionMap, b: AttributionMap, block: int = 512) -> float:
    """Kendall's tau-b over all pixel pairs."""
    x, y = _flat_pair(a, b)
    n = x.size
    concordance = 0
    tied_x = 0
    tied_y = 0
    for start in range(0, n, block):
        stop = min(n, start + block)
        # pairs (i, j) with i in the block and j > i
        dx = np.sign(x[start:stop, None] - x[None, :])
        dy = np.sign(y[start:stop, None] - y[None, :])
        upper = np.arange(n)[None, :] > np.arange(start, stop)[:, None]
        concordance += int(np.sum((dx * dy)[upper]))
        tied_x += int(np.count_nonzero((dx == 0) & upper))
        tied_y += int(np.count_nonzero((dy == 0) & upper))
    pairs = n * (n - 1) // 2
    denom = (pairs - tied_x) * (pairs - tied_y)
    if denom == 0:
        raise UndefinedCorrelationError("Kendall's tau is undefined for a constant map")
    tau = concordance / math.sqrt(denom)
    return min(1.0, max(-1.0, tau))


def lens_spearman(a: AttributionMap, b: AttributionMap, w: int) -> float:
    return spearman_rho(smooth_map(a, w), smooth_map(b, w))


def lens_kendall(a: AttributionMap, b: AttributionMap, w: int) -> float:
    return kendall_tau(smooth_map(a, w), smooth_map(b, w))


# --- records ------------------------------------------------------------------

SIMILARITY_METRICS = ("topk", "lens_prec", "lens_recall", "topk_div", "lens_prec_div", "lens_recall_div")
CORRELATION_METRICS = ("spearman", "kendall", "lens_spearman", "lens_kendall")
DISTANCE_METRICS = ("lens_distance",)
ALL_METRICS = SIMILARITY_METRICS + CORRELATION_METRICS + DISTANCE_METRICS

RECORD_HEADER = ("image_id", "attack_id", "metric", "k", "w", "epsilon", "value")


def metric_range(metric: str) -> tuple[float, float]:
    if metric in SIMILARITY_METRICS:
        return 0.0, 1.0
    if metric in CORRELATION_METRICS:
        return -1.0, 1.0
    if metric in DISTANCE_METRICS:
        return 0.0, 2.0
    raise DomainError(f"unknown metric {metric!r}")


@dataclass(frozen=True)
class MetricRecord:
    image_id: str
    attack_id: str
    metric: str
    k: int
    w: int
    epsilon: float
    value: Optional[float]

    def __post_init__(self):
        if self.k < 1:
            raise DomainError("k must be positive")
        if self.w < 0:
            raise DomainError("w must be nonnegative")
        if self.epsilon < 0:
            raise DomainError("epsilon must be nonnegative")
        if self.value is not None:
            lo, hi = metric_range(self.metric)
            if not lo <= self.value <= hi:
                raise DomainError(f"{self.metric}={self.value} outside [{lo}, {hi}]")

    def to_row(self) -> list[str]:
        value = "" if self.value is None else format_real(self.value)
        return [self.image_id, self.attack_id, self.metric, str(self.k), str(self.w), format_real(self.epsilon), value]

    @classmethod
    def from_row(cls, row) -> "MetricRecord":
        image_id, attack_id, metric, k, w, eps, value = row
        return cls(image_id, attack_id, metric, int(k), int(w), float(eps), None if value == "" else float(value))


def write_records(path, records: Iterable[MetricRecord]) -> None:
    with Path(path).open("w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_HEADER)
        for rec in records:
            writer.writerow(rec.to_row())


def read_records(path) -> list[MetricRecord]:
    with Path(path).open(newline="", encoding="ascii") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != RECORD_HEADER:
        raise DataError(f"{path}: not a metric record CSV")
    return [MetricRecord.from_row(r) for r in rows[1:]]
