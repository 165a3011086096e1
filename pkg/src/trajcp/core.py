"""Non-conformity scores, score sets, quantiles and sample-centred regions.

Everything here is a pure function of its inputs except :class:`ScoreSet`,
which is a small sorted container owned by a single calibrator track.

Radius sentinels
----------------
A region radius is a float.  ``math.inf`` means the region covers every
point; ``EMPTY`` (``-math.inf``) means it covers nothing.  Because
membership is ``score <= radius`` both sentinels fall out of ordinary float
comparison.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

EMPTY = -math.inf

# absolute slack on ``level * n`` before taking the ceiling, so that
# e.g. 0.9 * 10 = 9.000000000000002 selects the 9th order statistic
RANK_TOL = 1e-9


class DimensionError(ValueError):
    """Observation and samples live in different spaces."""


def as_point(y) -> np.ndarray:
    """Coerce a scalar or sequence to a 1-D float vector."""
    arr = np.atleast_1d(np.asarray(y, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"a point must be a scalar or a 1-D vector, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("point coordinates must be finite")
    return arr


def as_pool(samples) -> np.ndarray:
    """Coerce samples to an ``(M, d)`` array.

    A flat sequence is read as M one-dimensional samples.
    """
    arr = np.asarray(samples, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"a sample pool must be a non-empty (M, d) array, got shape {arr.shape}")
    return arr


def _check_dims(y: np.ndarray, pool: np.ndarray) -> None:
    if y.shape[0] != pool.shape[1]:
        raise DimensionError(
            f"observation has dimension {y.shape[0]} but samples have dimension {pool.shape[1]}"
        )


def pcp_score(y, pool) -> float:
    """Distance from ``y`` to the nearest sample."""
    y = as_point(y)
    pool = as_pool(pool)
    _check_dims(y, pool)
    return float(np.sqrt(((pool - y) ** 2).sum(axis=1)).min())


def residual_score(y, pool) -> float:
    """Distance from ``y`` to the sample mean."""
    y = as_point(y)
    pool = as_pool(pool)
    _check_dims(y, pool)
    return float(np.sqrt(((pool.mean(axis=0) - y) ** 2).sum()))


SCORE_FUNCTIONS = {"pcp": pcp_score, "residual": residual_score}


def region_centers(pool, score_kind: str = "pcp") -> np.ndarray:
    """Ball centres of the region induced by a score: every sample for
    ``pcp``, the sample mean alone for ``residual``."""
    pool = as_pool(pool)
    if score_kind == "pcp":
        return pool
    if score_kind == "residual":
        return pool.mean(axis=0, keepdims=True)
    raise ValueError(f"unknown score kind {score_kind!r}")


class ScoreSet:
    """Ascending multiset of non-conformity scores seeded with ``+inf``.

    The sentinel is never removed, so the largest order statistic is always
    infinite and high quantile levels give an all-covering region.
    """

    __slots__ = ("_scores",)

    def __init__(self, scores: Iterable[float] = ()):
        self._scores = [math.inf]
        for s in scores:
            self.add(s)

    def add(self, score: float) -> None:
        score = float(score)
        if math.isnan(score) or score < 0:
            raise ValueError(f"scores must be non-negative, got {score}")
        bisect.insort(self._scores, score)

    def __len__(self) -> int:
        return len(self._scores)

    def __iter__(self):
        return iter(self._scores)

    def __eq__(self, other) -> bool:
        return isinstance(other, ScoreSet) and self._scores == other._scores

    def __repr__(self) -> str:
        return f"ScoreSet(n={len(self)})"

    def sorted(self) -> list[float]:
        return list(self._scores)

    # the two methods below inline the module functions for the per-tick path

    def quantile(self, level: float) -> float:
        s = self._scores
        if level <= 0:
            return EMPTY
        k = math.ceil(level * len(s) - RANK_TOL)
        if k <= 0:
            return EMPTY
        return s[min(k, len(s)) - 1]

    def beta(self, s_obs: float) -> float:
        if not math.isfinite(s_obs):
            raise ValueError("observed score must be finite")
        s = self._scores
        return 1.0 - bisect.bisect_left(s, s_obs) / len(s)

    def to_list(self) -> list[float]:
        """Finite scores only; the sentinel is implicit."""
        return self._scores[:-1]

    @classmethod
    def from_list(cls, finite_scores: Sequence[float]) -> "ScoreSet":
        out = cls()
        out._scores = sorted(float(s) for s in finite_scores) + [math.inf]
        return out


def _ascending(scores, presorted: bool) -> Sequence[float]:
    if isinstance(scores, ScoreSet):
        return scores._scores
    s = scores if presorted else sorted(scores)
    if len(s) == 0:
        raise ValueError("score set is empty")
    return s


def quantile_rank(level: float, n: int) -> int:
    """1-based order-statistic index ``ceil(level * n)`` with float slack."""
    return math.ceil(level * n - RANK_TOL)


def empirical_quantile(scores, level: float, presorted: bool = False) -> float:
    """The ``ceil(level * n)``-th smallest score.

    ``level <= 0`` gives ``EMPTY``; a rank at or past the last element gives
    the largest score (``+inf`` for a seeded :class:`ScoreSet`).
    """
    s = _ascending(scores, presorted)
    n = len(s)
    if level <= 0:
        return EMPTY
    k = quantile_rank(level, n)
    if k <= 0:
        return EMPTY
    if k >= n:
        return s[-1]
    return s[k - 1]


def beta_for_observation(scores, s_obs: float, presorted: bool = False) -> float:
    """Largest threshold whose region still covers an observation with
    score ``s_obs``.

    With ``j`` the first 1-based index such that ``s_(j) >= s_obs`` this is
    ``1 - (j - 1) / n``.  Regions built at any smaller threshold cover the
    observation.
    """
    s = _ascending(scores, presorted)
    if not math.isfinite(s_obs):
        raise ValueError("observed score must be finite")
    n = len(s)
    j = bisect.bisect_left(s, s_obs) + 1
    if j > n:
        # only possible without the +inf sentinel
        raise ValueError("observed score exceeds every score in the set")
    return 1.0 - (j - 1) / n


@dataclass(frozen=True)
class PredictionRegion:
    """Union of closed balls of a common radius around ``centers``."""

    centers: np.ndarray
    radius: float

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def is_empty(self) -> bool:
        return self.radius == EMPTY

    @property
    def is_full(self) -> bool:
        return self.radius == math.inf

    def contains(self, y) -> bool:
        return region_contains(self, y)

    def measure(self, mc_samples: int = 100_000, rng_seed: int = 0) -> float:
        if self.is_empty:
            return 0.0
        if self.is_full:
            return math.inf
        if self.dim == 1:
            return region_measure_1d(self)
        if self.dim == 2:
            return region_measure_2d(self, mc_samples, rng_seed)
        raise ValueError("measure is only supported for d <= 2")


def build_region(pool, radius: float) -> PredictionRegion:
    radius = float(radius)
    if math.isnan(radius) or (radius < 0 and radius != EMPTY):
        raise ValueError(f"radius must be non-negative or a sentinel, got {radius}")
    return PredictionRegion(as_pool(pool), radius)


def region_contains(region: PredictionRegion, y) -> bool:
    y = as_point(y)
    _check_dims(y, region.centers)
    if region.radius == EMPTY:
        return False
    if region.radius == math.inf:
        return True
    return pcp_score(y, region.centers) <= region.radius


def region_components_1d(region: PredictionRegion) -> list[tuple[float, float]]:
    """Merged, disjoint closed intervals making up a 1-D region."""
    if region.dim != 1:
        raise DimensionError("region is not one-dimensional")
    if region.is_empty:
        return []
    r = region.radius
    if r == math.inf:
        return [(-math.inf, math.inf)]
    out: list[tuple[float, float]] = []
    for c in np.sort(region.centers[:, 0]):
        lo, hi = c - r, c + r
        if out and lo <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], hi))
        else:
            out.append((lo, hi))
    return out


def union_length(centers: np.ndarray, radius) -> np.ndarray | float:
    """Length of ``U [c - r, c + r]`` for sorted 1-D centres.

    Sweeping the sorted centres, each interval adds the part of ``2r`` not
    already covered by its left neighbour: ``min(gap, 2r)``.  ``radius`` may
    be an array of finite radii, giving one length per radius.
    """
    width = 2.0 * np.asarray(radius, dtype=float)
    gaps = np.diff(centers)
    if width.ndim == 0:
        return float(width + np.minimum(gaps, width).sum())
    return width + np.minimum(gaps[:, None], width[None, :]).sum(axis=0)


def region_measure_1d(region: PredictionRegion) -> float:
    """Exact length of a 1-D region (``inf`` for the all-covering one)."""
    if region.dim != 1:
        raise DimensionError("region is not one-dimensional")
    if region.is_empty:
        return 0.0
    if region.is_full:
        return math.inf
    return float(union_length(np.sort(region.centers[:, 0]), region.radius))


def region_measure_2d(region: PredictionRegion, mc_samples: int = 100_000, rng_seed: int = 0,
                      chunk: int = 1 << 16) -> float:
    """Seeded Monte Carlo estimate of the area of a union of disks.

    Points are drawn uniformly from the bounding box of all disks.
    """
    if region.dim != 2:
        raise DimensionError("region is not two-dimensional")
    if mc_samples <= 0:
        raise ValueError("mc_samples must be positive")
    if region.is_empty:
        return 0.0
    if region.is_full:
        return math.inf
    r = region.radius
    if r == 0:
        return 0.0
    centers = region.centers
    lo = centers.min(axis=0) - r
    hi = centers.max(axis=0) + r
    rng = np.random.default_rng(rng_seed)
    hits = 0
    r2 = r * r
    remaining = mc_samples
    while remaining:
        n = min(chunk, remaining)
        pts = lo + (hi - lo) * rng.random((n, 2))
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        hits += int((d2.min(axis=1) <= r2).sum())
        remaining -= n
    return float(np.prod(hi - lo) * hits / mc_samples)
