"""Run calibration methods over streams and compute coverage metrics.

A run keeps one independent calibrator (and optimizer) per miscoverage
rate.  Scores do not depend on the rate, so they are computed once per
(tick, horizon) and shared.  Every resolved forecast yields one record::

    t, issue_time, h, rate, covered, radius, measure, alpha_star

``measure`` is the length (1-D) or Monte Carlo area (2-D) of the region
that was actually issued; all-covering warm-up regions have infinite
measure and are tallied apart from the finite mean.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .core import EMPTY, PredictionRegion, region_measure_2d, union_length
from .online import Calibrator, CalibratorConfig
from .optimizer import HorizonOptimizer, OptimizerConfig
from .streams import StreamRecord

METHODS = ("cptraj", "aci", "cptraj_rs")
DEFAULT_RATES = (0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
RECORD_COLUMNS = ("t", "issue_time", "h", "rate", "covered", "radius", "measure", "alpha_star")


def check_rates(rates: Sequence[float]) -> tuple[float, ...]:
    rates = tuple(float(r) for r in rates)
    if not rates:
        raise ValueError("need at least one miscoverage rate")
    if any(not 0 < r < 1 for r in rates):
        raise ValueError("miscoverage rates must lie strictly inside (0, 1)")
    if list(rates) != sorted(set(rates)):
        raise ValueError("miscoverage rates must be sorted and distinct")
    return rates


@dataclass
class RunConfig:
    method: str = "cptraj"
    rates: tuple = DEFAULT_RATES
    eta: float = 0.05
    big_d: float = 0.1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mc_samples: int = 20_000
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        self.rates = check_rates(self.rates)
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be positive")

    @property
    def score_kind(self) -> str:
        return "residual" if self.method == "cptraj_rs" else "pcp"

    @property
    def uses_optimizer(self) -> bool:
        return self.method != "aci"

    @property
    def effective_big_d(self) -> float:
        return 0.0 if self.method == "aci" else self.big_d


def _mc_seed(seed: int, issue_time: int, h: int) -> int:
    # same points for every rate, so areas are monotone in the radius
    return int(np.random.SeedSequence([seed, issue_time, h]).generate_state(1)[0])


class MethodRun:
    """One method on one stream across all rates; steppable and resumable."""

    def __init__(self, cfg: RunConfig, horizons: int):
        self.cfg = cfg
        self.horizons = horizons
        self.calibrators = [
            Calibrator(CalibratorConfig(rate, cfg.eta, cfg.effective_big_d, horizons,
                                        cfg.score_kind))
            for rate in cfg.rates
        ]
        self.optimizers = [
            HorizonOptimizer(cfg.optimizer, horizons, rate) if cfg.uses_optimizer else None
            for rate in cfg.rates
        ]
        self.tick = 0
        self.rows: list[tuple] = []

    def step(self, rec: StreamRecord) -> None:
        t = self.tick + 1
        ens = rec.ensemble
        if ens.shape[1] != self.horizons:
            raise ValueError(f"stream horizon {ens.shape[1]} != run horizon {self.horizons}")
        lead = self.calibrators[0]
        scores = [None] * self.horizons
        for h, track in enumerate(lead.tracks, start=1):
            if t - h > 0 and track.issued_queue:
                scores[h - 1] = lead.score(rec.y, track.issued_queue[0].centers)
        per_rate = [cal.resolve(t, rec.y, scores) for cal in self.calibrators]
        self._record(t, per_rate)
        for i, (cal, opt) in enumerate(zip(self.calibrators, self.optimizers)):
            chosen = None
            if opt is not None:
                opt.observe(per_rate[i])
                intervals = cal.candidate_intervals(t)
                chosen = opt.choose(intervals, rng_seed=_mc_seed(self.cfg.seed, t, i))
            cal.issue(t, ens, chosen)
        self.tick = t

    def _record(self, t: int, per_rate) -> None:
        if not per_rate[0]:
            return
        rates = self.cfg.rates
        for j, first in enumerate(per_rate[0]):
            centers = first.centers
            radii = np.array([outs[j].radius for outs in per_rate])
            measures = np.empty(len(rates))
            finite = np.isfinite(radii)
            measures[radii == math.inf] = math.inf
            measures[radii == EMPTY] = 0.0
            if finite.any():
                if centers.shape[1] == 1:
                    measures[finite] = union_length(np.sort(centers[:, 0]), radii[finite])
                elif centers.shape[1] == 2:
                    seed = _mc_seed(self.cfg.seed, first.issue_time, first.horizon)
                    for i in np.flatnonzero(finite):
                        measures[i] = region_measure_2d(PredictionRegion(centers, radii[i]),
                                                        self.cfg.mc_samples, seed)
                else:
                    measures[finite] = math.nan
            for i, outs in enumerate(per_rate):
                o = outs[j]
                self.rows.append((t, o.issue_time, o.horizon, rates[i], 1 - o.err, o.radius,
                                  float(measures[i]), o.alpha_star))

    def run(self, records: Iterable[StreamRecord], stop_after: int | None = None) -> "MethodRun":
        for k, rec in enumerate(records, start=1):
            if k <= self.tick:
                continue
            if stop_after is not None and self.tick >= stop_after:
                break
            self.step(rec)
        return self

    def records(self) -> pd.DataFrame:
        return records_frame(self.rows)

    def snapshot(self) -> dict:
        return {
            "run_config": _run_config_dict(self.cfg),
            "horizons": self.horizons,
            "tick": self.tick,
            "calibrators": [c.snapshot() for c in self.calibrators],
            "optimizers": [o.snapshot() if o else None for o in self.optimizers],
            "rows": [list(r) for r in self.rows],
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> "MethodRun":
        cfg = run_config_from_dict(snap["run_config"])
        run = cls(cfg, int(snap["horizons"]))
        run.tick = int(snap["tick"])
        run.calibrators = [Calibrator.from_snapshot(c) for c in snap["calibrators"]]
        for opt, data in zip(run.optimizers, snap["optimizers"]):
            if opt is not None:
                opt.restore(data)
        run.rows = [
            (int(r[0]), int(r[1]), int(r[2]), float(r[3]), int(r[4]), float(r[5]), float(r[6]),
             float(r[7]))
            for r in snap["rows"]
        ]
        return run


def _run_config_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["rates"] = list(cfg.rates)
    return d


def run_config_from_dict(d: Mapping) -> RunConfig:
    d = dict(d)
    d["optimizer"] = OptimizerConfig(**d["optimizer"])
    d["rates"] = tuple(d["rates"])
    return RunConfig(**d)


def records_frame(rows) -> pd.DataFrame:
    df = pd.DataFrame(list(rows), columns=list(RECORD_COLUMNS))
    return df.astype({"t": "int64", "issue_time": "int64", "h": "int64", "rate": "float64",
                      "covered": "int64", "radius": "float64", "measure": "float64",
                      "alpha_star": "float64"})


def run_method(stream: Sequence[StreamRecord], cfg: RunConfig) -> pd.DataFrame:
    """Every resolved coverage outcome of ``cfg.method`` on ``stream``."""
    if len(stream) == 0:
        return records_frame([])
    run = MethodRun(cfg, stream[0].ensemble.shape[1])
    run.run(stream)
    return run.records()


# -- metrics ------------------------------------------------------------


def coverage_by_rate(records: pd.DataFrame, h: int | None = None) -> pd.Series:
    df = records if h is None else records[records["h"] == h]
    return df.groupby("rate")["covered"].mean()


def calibration_score(records: pd.DataFrame, rates: Sequence[float], h: int) -> float:
    """Mean over rates of ``|coverage - (1 - rate)|`` at horizon ``h``;
    NaN if any rate has no records there."""
    cov = coverage_by_rate(records, h)
    gaps = []
    for r in rates:
        if r not in cov.index:
            return math.nan
        gaps.append(abs(cov[r] - (1 - r)))
    return float(np.mean(gaps))


def overall_calibration_score(records: pd.DataFrame, rates: Sequence[float]) -> float:
    hs = sorted(records["h"].unique())
    if not hs:
        return math.nan
    return float(np.mean([calibration_score(records, rates, h) for h in hs]))


@dataclass(frozen=True)
class WidthSummary:
    mean: float
    n_finite: int
    n_infinite: int


def avg_width(records: pd.DataFrame) -> WidthSummary:
    m = records["measure"].to_numpy()
    inf = np.isinf(m)
    finite = m[~inf]
    mean = float(finite.mean()) if finite.size else math.nan
    return WidthSummary(mean, int(finite.size), int(inf.sum()))


def horizon_scores(records: pd.DataFrame, rates: Sequence[float]) -> pd.Series:
    """Per issue time, the calibration score of the horizon-averaged
    coverage.  Only issue times with every horizon resolved count."""
    if records.empty:
        return pd.Series(dtype=float)
    H = int(records["h"].max())
    cov = records.groupby(["issue_time", "rate"])["covered"].agg(["mean", "size"])
    cov = cov[cov["size"] == H]["mean"].unstack("rate")
    cov = cov.dropna()
    missing = [r for r in rates if r not in cov.columns]
    if missing:
        return pd.Series(dtype=float)
    target = np.array([1 - r for r in rates])
    gaps = np.abs(cov[list(rates)].to_numpy() - target[None, :])
    return pd.Series(gaps.mean(axis=1), index=cov.index)


def horizon_coverage_quartiles(records: pd.DataFrame, rates: Sequence[float]):
    s = horizon_scores(records, rates)
    if s.empty:
        return (math.nan, math.nan, math.nan)
    p = np.percentile(s.to_numpy(), [25, 50, 75])
    return tuple(float(x) for x in p)


def per_horizon_table(records: pd.DataFrame, rates: Sequence[float],
                      focus_rate: float = 0.1) -> pd.DataFrame:
    """One row per horizon: calibration score, plus coverage and mean width
    of the ``1 - focus_rate`` regions."""
    rows = []
    for h in sorted(records["h"].unique()):
        sub = records[records["h"] == h]
        foc = sub[np.isclose(sub["rate"], focus_rate)]
        w = avg_width(foc) if len(foc) else WidthSummary(math.nan, 0, 0)
        rows.append({
            "h": int(h),
            "cs": calibration_score(records, rates, int(h)),
            "coverage": float(foc["covered"].mean()) if len(foc) else math.nan,
            "width": w.mean,
            "width_infinite": w.n_infinite,
        })
    return pd.DataFrame(rows, columns=["h", "cs", "coverage", "width", "width_infinite"])


def summarize(records: pd.DataFrame, rates: Sequence[float]) -> dict:
    w = avg_width(records)
    q = horizon_coverage_quartiles(records, rates)
    return {
        "cs": overall_calibration_score(records, rates),
        "width": w.mean,
        "width_finite": w.n_finite,
        "width_infinite": w.n_infinite,
        "hcs_p25": q[0],
        "hcs_p50": q[1],
        "hcs_p75": q[2],
        "n_records": int(len(records)),
    }


# -- reports ------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isnan(x):
            return ""
        return repr(x)
    return str(x)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(v) for v in r) + "\n")


def _json_safe(obj):
    if isinstance(obj, float) and (math.isnan(obj) or math.isinf(obj)):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def compare_report(runs: Mapping[tuple[str, str], pd.DataFrame], rates: Sequence[float],
                   out_dir, focus_rate: float = 0.1) -> dict:
    """Write per-(stream, method) metric tables, a method comparison table
    and ``summary.json`` into ``out_dir``; return the summary document.

    ``runs`` maps ``(stream, method)`` to records.  Every method must have
    been run on the same set of streams.
    """
    if not runs:
        raise ValueError("no runs to report")
    rates = check_rates(rates)
    streams_by_method: dict[str, set] = {}
    for stream, method in runs:
        streams_by_method.setdefault(method, set()).add(stream)
    stream_sets = {frozenset(s) for s in streams_by_method.values()}
    if len(stream_sets) != 1:
        raise ValueError(
            "methods were run on different streams: "
            + "; ".join(f"{m}: {sorted(s)}" for m, s in sorted(streams_by_method.items()))
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = sorted(streams_by_method)
    streams = sorted(next(iter(stream_sets)))

    per_run = {}
    for stream in streams:
        for method in methods:
            recs = runs[(stream, method)]
            summ = summarize(recs, rates)
            per_run[(stream, method)] = summ
            _write_csv(out / f"{stream}-{method}-summary.csv", ["metric", "value"],
                       [(k, v) for k, v in summ.items()])
            tab = per_horizon_table(recs, rates, focus_rate)
            _write_csv(out / f"{stream}-{method}-horizon.csv", list(tab.columns),
                       tab.itertuples(index=False, name=None))
            hs = horizon_scores(recs, rates)
            _write_csv(out / f"{stream}-{method}-hcs.csv", ["issue_time", "score"],
                       [(int(i), float(v)) for i, v in hs.items()])

    table = []
    for method in methods:
        for metric in ("cs", "width"):
            vals = np.array([per_run[(s, method)][metric] for s in streams], dtype=float)
            table.append((method, metric, float(np.mean(vals)), float(np.std(vals)), len(vals)))
    _write_csv(out / "comparison.csv", ["method", "metric", "mean", "std", "n_streams"], table)

    summary = {
        "rates": list(rates),
        "focus_rate": focus_rate,
        "streams": streams,
        "methods": methods,
        "runs": [
            {"stream": s, "method": m, **per_run[(s, m)]} for s in streams for m in methods
        ],
        "comparison": [
            {"method": m, "metric": k, "mean": mu, "std": sd, "n_streams": n}
            for m, k, mu, sd, n in table
        ],
    }
    with open(out / "summary.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_json_safe(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
