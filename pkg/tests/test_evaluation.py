import json
import math

import numpy as np
import pandas as pd
import pytest

from trajcp.core import build_region, region_contains
from trajcp.evaluation import (
    DEFAULT_RATES,
    MethodRun,
    RunConfig,
    avg_width,
    calibration_score,
    check_rates,
    compare_report,
    horizon_coverage_quartiles,
    overall_calibration_score,
    records_frame,
    run_method,
)
from trajcp.optimizer import OptimizerConfig
from trajcp.streams import MarkovARConfig, StreamRecord, generate_sequence


def stream(seed=0, length=80, horizon=4, m=8):
    return generate_sequence(MarkovARConfig(length=length, horizon=horizon, m_trajectories=m), seed)


def constant_records(covered, rates=DEFAULT_RATES, H=2, T=5, measure=1.0):
    rows = [(t + h, t, h, r, covered, 1.0, measure, r)
            for t in range(1, T + 1) for h in range(1, H + 1) for r in rates]
    return records_frame(rows)


def test_rate_validation():
    assert check_rates([0.1, 0.2]) == (0.1, 0.2)
    for bad in ([], [0.0, 0.5], [0.2, 0.1], [0.1, 0.1], [1.0]):
        with pytest.raises(ValueError):
            check_rates(bad)


def test_cs_extremes():
    assert sum(DEFAULT_RATES) == pytest.approx(4.57)
    always = constant_records(1)
    never = constant_records(0)
    assert calibration_score(always, DEFAULT_RATES, 1) == pytest.approx(4.57 / 11)
    assert overall_calibration_score(always, DEFAULT_RATES) == pytest.approx(0.4155, abs=5e-5)
    assert overall_calibration_score(never, DEFAULT_RATES) == pytest.approx(0.5845, abs=5e-5)


def test_cs_perfect_and_missing():
    rows = []
    # 10 outcomes per rate with exactly round(10 * (1 - r)) covered
    rates = (0.1, 0.5)
    for r in rates:
        k = round(10 * (1 - r))
        rows += [(i + 2, i + 1, 1, r, int(i < k), 1.0, 1.0, r) for i in range(10)]
    df = records_frame(rows)
    assert calibration_score(df, rates, 1) == pytest.approx(0.0)
    assert math.isnan(calibration_score(df, (0.1, 0.5, 0.9), 1))


def test_avg_width():
    rows = [(2, 1, 1, 0.1, 1, 1.0, 3.0, 0.1), (3, 2, 1, 0.1, 1, math.inf, math.inf, 0.1),
            (4, 3, 1, 0.1, 0, -math.inf, 0.0, 0.1)]
    w = avg_width(records_frame(rows))
    assert (w.mean, w.n_finite, w.n_infinite) == (1.5, 2, 1)
    assert avg_width(constant_records(1, measure=2.5)).mean == 2.5


def test_quartiles_hand_fixture():
    # H = 2, one rate 0.5, four issue times with horizon-mean coverage 1, 0.5, 0, 0.5
    cov = {1: (1, 1), 2: (1, 0), 3: (0, 0), 4: (0, 1)}
    rows = [(t + h, t, h, 0.5, c[h - 1], 1.0, 1.0, 0.5) for t, c in cov.items() for h in (1, 2)]
    # scores |cov - 0.5|: 0.5, 0, 0.5, 0 -> sorted 0, 0, 0.5, 0.5
    q = horizon_coverage_quartiles(records_frame(rows), (0.5,))
    assert q == pytest.approx((0.0, 0.25, 0.5))


def test_quartiles_constant_and_perfect():
    q = horizon_coverage_quartiles(constant_records(1, rates=(0.2,)), (0.2,))
    assert q == pytest.approx((0.2, 0.2, 0.2))


def test_empty_stream():
    assert run_method([], RunConfig()).empty


@pytest.mark.parametrize("method", ["cptraj", "aci", "cptraj_rs"])
def test_records_consistent_with_regions(method):
    s = stream(length=40)
    cfg = RunConfig(method=method, rates=(0.1, 0.5))
    run = MethodRun(cfg, 4)
    issued = {}
    for rec in s:
        run.step(rec)
        for i, cal in enumerate(run.calibrators):
            for h, tr in enumerate(cal.tracks, start=1):
                last = tr.issued_queue[-1]
                issued[(last.issue_time, h, cfg.rates[i])] = last.region()
    df = run.records()
    T = len(s)
    assert len(df) == sum(1 for t in range(1, T + 1) for h in range(1, 5) if t + h <= T) * 2
    for row in df.itertuples():
        y = s[row.t - 1].y
        assert row.covered == int(region_contains(issued[(row.issue_time, row.h, row.rate)], y))


def test_rate_sharing_gives_identical_score_sets():
    run = MethodRun(RunConfig(rates=(0.1, 0.3, 0.7)), 4)
    run.run(stream(length=40))
    sets = [[tr.score_set for tr in cal.tracks] for cal in run.calibrators]
    assert sets[0] == sets[1] == sets[2]


def test_aci_equals_cptraj_with_zero_d():
    s = stream(length=60)
    aci = run_method(s, RunConfig(method="aci"))
    cp0 = run_method(s, RunConfig(method="cptraj", big_d=0.0))
    pd.testing.assert_frame_equal(aci, cp0)


def test_resume_is_exact():
    s = stream(length=50)
    cfg = RunConfig(rates=(0.1, 0.4), optimizer=OptimizerConfig(history_size=10))
    full = MethodRun(cfg, 4).run(s).records()
    part = MethodRun(cfg, 4).run(s, stop_after=20)
    snap = json.loads(json.dumps(part.snapshot()))
    resumed = MethodRun.from_snapshot(snap).run(s).records()
    pd.testing.assert_frame_equal(full, resumed)


def test_two_dimensional_measures():
    rng = np.random.default_rng(0)
    recs = [StreamRecord(t, rng.normal(size=2), rng.normal(size=(5, 3, 2))) for t in range(1, 30)]
    df = run_method(recs, RunConfig(rates=(0.2,), mc_samples=2000))
    fin = df[np.isfinite(df["measure"])]
    assert len(fin) and (fin["measure"] >= 0).all()


def test_report_files_and_determinism(tmp_path):
    runs = {}
    for i in range(2):
        s = stream(seed=i, length=40)
        for m in ("cptraj", "aci"):
            runs[(f"seq{i}", m)] = run_method(s, RunConfig(method=m, rates=(0.1, 0.5)))
    compare_report(runs, (0.1, 0.5), tmp_path / "a")
    compare_report(runs, (0.1, 0.5), tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "comparison.csv" in names and "summary.json" in names
    assert "seq0-cptraj-horizon.csv" in names and "seq1-aci-hcs.csv" in names
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    horizon = pd.read_csv(tmp_path / "a" / "seq0-aci-horizon.csv")
    assert list(horizon["h"]) == [1, 2, 3, 4]
    comp = pd.read_csv(tmp_path / "a" / "comparison.csv")
    assert len(comp) == 4


def test_report_rejects_mismatched_streams(tmp_path):
    df = constant_records(1, rates=(0.1,))
    with pytest.raises(ValueError, match="different streams"):
        compare_report({("a", "aci"): df, ("b", "cptraj"): df}, (0.1,), tmp_path)


def test_cs_bounds_on_runs():
    df = run_method(stream(length=60), RunConfig())
    cs = overall_calibration_score(df, DEFAULT_RATES)
    assert 0 <= cs <= max(max(r, 1 - r) for r in DEFAULT_RATES)
