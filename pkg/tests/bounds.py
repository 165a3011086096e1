"""Deterministic long-run coverage bounds checked on synthetic streams.

Each case runs one calibrator for T ticks on a 1-D stream whose ensemble
has two fixed samples per horizon, picks thresholds with a given rule and
records, per horizon, the worst margin (value minus bound, so <= 0 means
the bound held) of

* ``long_run``: ``|mean(alpha - err)| <= (max(alpha, 1 - alpha) + eta + delta_n) / (n eta)``
  after every resolution count ``n``;
* ``band``: ``alpha_raw`` inside ``[-eta - delta_{t-1}, 1 + eta + delta_{t-1}]``;
* ``delayed``: ``alpha_raw`` inside
  ``[-k eta (1 - alpha) - delta_{t-k}, 1 + k eta alpha + delta_{t-k}]`` for horizon ``k``.
"""
from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np

from trajcp.online import Calibrator, CalibratorConfig
from trajcp.optimizer import HorizonOptimizer, OptimizerConfig

H = 4
T = 1000
SAMPLES = np.array([0.0, 0.5])
SAMPLES_F = tuple(float(v) for v in SAMPLES)
STREAMS = ("random", "cover", "miss", "alternate", "push")
CHOOSERS = ("center", "low", "high", "random", "adversarial", "optimizer")
ALPHAS = (0.1, 0.5)
ETAS = (0.005, 0.05)
DS = (0.0, 0.1)


def _observation(stream, t, rng, cal, alpha):
    far = 1000.0 * t  # beyond every earlier score, so only full regions cover it
    if stream == "random":
        return rng.normal()
    if stream == "cover":
        return 0.0
    if stream == "miss":
        return far
    if stream == "alternate":
        return 0.0 if (t // 7) % 2 else far
    if stream == "push":
        # cover while thresholds sit above target, miss otherwise
        mean = sum(tr.alpha_raw for tr in cal.tracks) / len(cal.tracks)
        return 0.0 if mean >= alpha else far
    raise ValueError(stream)


def _choose(chooser, cal, t, rng, opt):
    if chooser == "center":
        return None
    intervals = cal.candidate_intervals(t)
    if chooser == "low":
        return [iv.low for iv in intervals]
    if chooser == "high":
        return [iv.high for iv in intervals]
    if chooser == "random":
        return [rng.uniform(iv.low, iv.high) for iv in intervals]
    if chooser == "adversarial":
        return [iv.low if iv.center > 0.5 else iv.high for iv in intervals]
    if chooser == "optimizer":
        return list(opt.choose(intervals))
    raise ValueError(chooser)


def run_case(alpha, eta, big_d, stream, chooser, seed=0):
    rng = np.random.default_rng(seed)
    cal = Calibrator(CalibratorConfig(alpha, eta, big_d, H))
    opt = (HorizonOptimizer(OptimizerConfig(action_grid_k=3), H, alpha)
           if chooser == "optimizer" else None)
    ens = np.broadcast_to(SAMPLES[:, None, None], (SAMPLES.size, H, 1))
    total = [0.0] * H
    count = [0] * H
    # per tick, after resolution: alpha_raw, running sum of (alpha - err), count
    a_hist, s_hist, n_hist = [], [], []
    for t in range(1, T + 1):
        y = _observation(stream, t, rng, cal, alpha)
        s = min(abs(y - v) for v in SAMPLES_F)
        outs = cal.resolve(t, [y], [s] * H)
        for o in outs:
            total[o.horizon - 1] += alpha - o.err
            count[o.horizon - 1] += 1
        if opt is not None:
            opt.observe(outs)
        a_hist.append([tr.alpha_raw for tr in cal.tracks])
        s_hist.append(list(total))
        n_hist.append(list(count))
        cal.issue(t, ens, _choose(chooser, cal, t, rng, opt))
    return _margins(np.array(a_hist), np.array(s_hist), np.array(n_hist), alpha, eta, big_d)


def _margins(a, sums, n, alpha, eta, big_d):
    """Worst (value - bound) per horizon for each bound; rows are ticks."""
    t = np.arange(1, T + 1)[:, None]
    h = np.arange(1, H + 1)[None, :]
    delta = big_d / np.sqrt(np.arange(1, T + 1))  # delta[i] = delta_{i + 1}
    with np.errstate(invalid="ignore", divide="ignore"):
        bound = (max(alpha, 1 - alpha) + eta + delta[np.maximum(n, 1) - 1]) / (n * eta)
        run = np.where(n > 0, np.abs(sums / np.maximum(n, 1)) - bound, -np.inf)
    d = delta[np.maximum(t - 1, 1) - 1]
    band = np.where(t >= 2, np.maximum(-eta - d - a, a - (1 + eta + d)), -np.inf)
    dk = delta[np.maximum(t - h, 1) - 1]
    dly = np.maximum(-h * eta * (1 - alpha) - dk - a, a - (1 + h * eta * alpha + dk))
    return {"long_run": list(run.max(axis=0)), "band": list(band.max(axis=0)),
            "delayed": list(dly.max(axis=0))}


def cases():
    for alpha, eta, big_d, stream in itertools.product(ALPHAS, ETAS, DS, STREAMS):
        # with D = 0 every rule picks the single admissible threshold; the
        # optimizer is the slow rule and the others already span the interval
        choosers = ("center",) if big_d == 0 else CHOOSERS
        if eta != ETAS[-1]:
            choosers = tuple(c for c in choosers if c != "optimizer")
        for chooser in choosers:
            yield alpha, eta, big_d, stream, chooser


@lru_cache(maxsize=None)
def suite():
    """Margins for every case, keyed by the case tuple."""
    return {case: run_case(*case) for case in cases()}


def violations(kind, horizons=range(1, H + 1), alphas=ALPHAS, tol=0.0):
    out = []
    for case, worst in suite().items():
        if case[0] not in alphas:
            continue
        for h in horizons:
            if worst[kind][h - 1] > tol:
                out.append((case, h, worst[kind][h - 1]))
    return out
