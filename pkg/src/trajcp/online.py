"""Per-stream online threshold updates.

One :class:`Calibrator` owns ``H`` horizon tracks.  Each tick runs

    resolve(t, y_t) -> candidate_intervals(t) -> [choose thresholds] -> issue(t, ...)

``resolve`` scores the ground truth against the region issued ``h`` ticks
ago for every horizon, moves that horizon's threshold by
``-eta * (err - alpha)`` and returns the outcomes.  ``candidate_intervals``
widens each threshold into ``[a - delta_t, a + delta_t]``; any threshold
picked inside that interval keeps the long-run miscoverage guarantee.
Thresholds are never clipped: a threshold ``<= 0`` maps to an all-covering
region and one ``>= 1`` to an empty region through the quantile sentinels.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import EMPTY, ScoreSet, as_point, pcp_score, region_centers
from .core import PredictionRegion

SCORE_KINDS = ("pcp", "residual")


class ContractViolation(RuntimeError):
    """A chosen threshold left its admissible interval."""


class StateCorruption(RuntimeError):
    """The issued-region bookkeeping does not match the tick being resolved."""


def delta_schedule(t: int, big_d: float) -> float:
    if t < 1:
        raise ValueError(f"time index must be >= 1, got {t}")
    return big_d / math.sqrt(t)


@dataclass
class CalibratorConfig:
    alpha_target: float
    eta: float = 0.05
    big_d: float = 0.1
    horizons: int = 1
    score_kind: str = "pcp"

    def __post_init__(self):
        if not 0 < self.alpha_target < 1:
            raise ValueError(f"alpha_target must lie in (0, 1), got {self.alpha_target}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not self.big_d >= 0:
            raise ValueError(f"big_d must be non-negative, got {self.big_d}")
        if int(self.horizons) != self.horizons or self.horizons < 1:
            raise ValueError(f"horizons must be a positive integer, got {self.horizons}")
        if self.score_kind not in SCORE_KINDS:
            raise ValueError(f"score_kind must be one of {SCORE_KINDS}, got {self.score_kind!r}")


@dataclass(frozen=True)
class ThresholdInterval:
    low: float
    high: float
    center: float
    radius: float

    @classmethod
    def around(cls, center: float, radius: float) -> "ThresholdInterval":
        return cls(center - radius, center + radius, center, radius)

    def __contains__(self, u: float) -> bool:
        return self.low <= u <= self.high


@dataclass(frozen=True)
class ResolutionOutcome:
    horizon: int
    issue_time: int
    err: int
    score: float
    beta: float
    alpha_star: float
    radius: float
    alpha_raw: float  # track value after this update
    centers: np.ndarray = field(repr=False, compare=False, default=None)


@dataclass
class IssuedRecord:
    issue_time: int
    centers: np.ndarray
    radius: float
    alpha_star: float

    def region(self) -> PredictionRegion:
        return PredictionRegion(self.centers, self.radius)


@dataclass
class HorizonTrack:
    alpha_raw: float
    score_set: ScoreSet = field(default_factory=ScoreSet)
    issued_queue: deque = field(default_factory=deque)


class Calibrator:
    """Threshold tracks, score sets and pending regions for one stream."""

    def __init__(self, config: CalibratorConfig):
        self.config = config
        self.tracks = [HorizonTrack(config.alpha_target) for _ in range(config.horizons)]
        self.time = 0  # last tick fully issued
        self._resolved = False

    @property
    def horizons(self) -> int:
        return self.config.horizons

    def _expect_tick(self, t: int) -> None:
        if t != self.time + 1:
            raise StateCorruption(f"expected tick {self.time + 1}, got {t}")

    def score(self, y, centers: np.ndarray) -> float:
        # both score kinds reduce to nearest-centre distance
        return pcp_score(y, centers)

    def resolve(self, t: int, y, scores=None) -> list[ResolutionOutcome]:
        """Score ``y_t`` against every matured region and update thresholds.

        ``scores`` optionally supplies precomputed scores indexed by
        ``h - 1``; several calibrators fed the same ensembles share them.
        """
        self._expect_tick(t)
        if self._resolved:
            raise StateCorruption(f"tick {t} already resolved")
        y = as_point(y)
        cfg = self.config
        out = []
        for h, track in enumerate(self.tracks, start=1):
            issue_time = t - h
            if issue_time <= 0:
                continue
            if not track.issued_queue or track.issued_queue[0].issue_time != issue_time:
                raise StateCorruption(f"no region issued at t={issue_time} for horizon {h}")
            rec = track.issued_queue.popleft()
            s = self.score(y, rec.centers) if scores is None else float(scores[h - 1])
            beta = track.score_set.beta(s)
            err = 0 if s <= rec.radius else 1
            track.score_set.add(s)
            track.alpha_raw = track.alpha_raw - cfg.eta * (err - cfg.alpha_target)
            out.append(ResolutionOutcome(h, issue_time, err, s, beta, rec.alpha_star,
                                         rec.radius, track.alpha_raw, rec.centers))
        self._resolved = True
        return out

    def candidate_intervals(self, t: int) -> list[ThresholdInterval]:
        self._expect_tick(t)
        delta = delta_schedule(t, self.config.big_d)
        return [ThresholdInterval.around(tr.alpha_raw, delta) for tr in self.tracks]

    def radius_for(self, h: int, alpha_star: float) -> float:
        return self.tracks[h - 1].score_set.quantile(1.0 - alpha_star)

    def issue(self, t: int, ensemble, chosen=None) -> list[PredictionRegion]:
        """Build and store one region per horizon from an ``(M, H[, d])``
        ensemble.  ``chosen=None`` uses the interval centres."""
        self._expect_tick(t)
        if not self._resolved:
            raise StateCorruption(f"tick {t} must be resolved before issuing")
        ens = np.asarray(ensemble, dtype=float)
        if ens.ndim == 2:
            ens = ens[:, :, None]
        if ens.ndim != 3 or ens.shape[1] != self.horizons:
            raise ValueError(f"ensemble must have shape (M, {self.horizons}, d), got {ens.shape}")
        delta = delta_schedule(t, self.config.big_d)
        if chosen is None:
            chosen = [tr.alpha_raw for tr in self.tracks]
        if len(chosen) != self.horizons:
            raise ValueError(f"expected {self.horizons} thresholds, got {len(chosen)}")
        # same bounds as candidate_intervals without building the objects
        for h, (u, tr) in enumerate(zip(chosen, self.tracks), start=1):
            low, high = tr.alpha_raw - delta, tr.alpha_raw + delta
            if not (low <= u <= high):
                raise ContractViolation(
                    f"threshold {u} for horizon {h} outside [{low}, {high}] at t={t}"
                )
        regions = []
        for h, (u, track) in enumerate(zip(chosen, self.tracks), start=1):
            centers = region_centers(ens[:, h - 1, :], self.config.score_kind)
            radius = track.score_set.quantile(1.0 - float(u))
            track.issued_queue.append(IssuedRecord(t, centers, radius, float(u)))
            regions.append(PredictionRegion(centers, radius))
        self.time = t
        self._resolved = False
        return regions

    # -- checkpointing -------------------------------------------------

    def snapshot(self) -> dict:
        """JSON-ready state; floats survive ``json`` round trips exactly."""
        return {
            "config": asdict(self.config),
            "time": self.time,
            "resolved": self._resolved,
            "tracks": [
                {
                    "alpha_raw": tr.alpha_raw,
                    "scores": tr.score_set.to_list(),
                    "queue": [
                        {
                            "issue_time": rec.issue_time,
                            "centers": rec.centers.tolist(),
                            "radius": rec.radius,
                            "alpha_star": rec.alpha_star,
                        }
                        for rec in tr.issued_queue
                    ],
                }
                for tr in self.tracks
            ],
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> "Calibrator":
        cal = cls(CalibratorConfig(**snap["config"]))
        cal.time = int(snap["time"])
        cal._resolved = bool(snap["resolved"])
        if len(snap["tracks"]) != cal.horizons:
            raise StateCorruption("snapshot track count does not match config")
        for tr, data in zip(cal.tracks, snap["tracks"]):
            tr.alpha_raw = float(data["alpha_raw"])
            tr.score_set = ScoreSet.from_list(data["scores"])
            tr.issued_queue = deque(
                IssuedRecord(int(q["issue_time"]), np.asarray(q["centers"], dtype=float),
                             float(q["radius"]), float(q["alpha_star"]))
                for q in data["queue"]
            )
        return cal


__all__ = [
    "EMPTY",
    "Calibrator",
    "CalibratorConfig",
    "ContractViolation",
    "HorizonTrack",
    "IssuedRecord",
    "ResolutionOutcome",
    "StateCorruption",
    "ThresholdInterval",
    "delta_schedule",
]
