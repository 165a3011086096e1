"""Synthetic Markov-switching AR(1) streams and the JSON-Lines stream format.

A stream is a sequence of :class:`StreamRecord`.  Record ``t`` carries the
ground truth ``y_t`` and the ensemble issued at ``t`` for targets
``t+1 .. t+H``.  On disk one record is one line::

    {"t": 1, "y": [0.3], "ensemble": [[[0.1], [0.2], ...], ...]}

with ``ensemble`` nested as ``M x H x d``.  Files ending in ``.gz`` are
gzip-compressed.
"""
from __future__ import annotations

import gzip
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np


class StreamParseError(ValueError):
    """A line that is not valid JSON."""


class StreamSchemaError(ValueError):
    """A record with missing fields or inconsistent shapes."""


@dataclass
class StreamRecord:
    t: int
    y: np.ndarray  # (d,)
    ensemble: np.ndarray  # (M, H, d)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, StreamRecord)
            and self.t == other.t
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.ensemble, other.ensemble)
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.ensemble.shape


@dataclass
class MarkovARConfig:
    n_states: int = 3
    stay_prob: float = 0.98
    phi: list[float] = field(default_factory=lambda: [0.9, 0.5, 0.9])
    mu: list[float] = field(default_factory=lambda: [-2.0, 0.0, 2.0])
    sigma: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    horizon: int = 32
    m_trajectories: int = 16
    length: int = 500
    n_sequences: int = 3
    seed: int = 0
    hidden_state: bool = False

    def __post_init__(self):
        if self.n_states < 1:
            raise ValueError("n_states must be a positive integer")
        if not 0 < self.stay_prob <= 1:
            raise ValueError(f"stay_prob must lie in (0, 1], got {self.stay_prob}")
        for name in ("phi", "mu", "sigma"):
            if len(getattr(self, name)) != self.n_states:
                raise ValueError(f"{name} needs one entry per state ({self.n_states})")
        if any(abs(p) >= 1 for p in self.phi):
            raise ValueError("every |phi| must be < 1")
        if any(s < 0 for s in self.sigma):
            raise ValueError("sigma must be non-negative")
        for name in ("horizon", "m_trajectories", "n_sequences"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.length < 0:
            raise ValueError("length must be non-negative")

    def transition_matrix(self) -> np.ndarray:
        n = self.n_states
        if n == 1:
            return np.ones((1, 1))
        P = np.full((n, n), (1 - self.stay_prob) / (n - 1))
        np.fill_diagonal(P, self.stay_prob)
        return P


def _switch(states: np.ndarray, cfg: MarkovARConfig, rng: np.random.Generator) -> np.ndarray:
    """Stay with ``stay_prob``, else move uniformly to one of the other states."""
    n = cfg.n_states
    if n == 1:
        return states
    move = rng.random(states.shape) >= cfg.stay_prob
    jump = rng.integers(1, n, size=states.shape)
    return np.where(move, (states + jump) % n, states)


def markov_ar_step(state: int, y: float, cfg: MarkovARConfig,
                   rng: np.random.Generator) -> tuple[int, float]:
    """Advance the latent chain one step, then draw the AR(1) observation
    under the new state."""
    s = int(_switch(np.array([state]), cfg, rng)[0])
    eps = rng.standard_normal()
    mu = cfg.mu[s]
    return s, mu + cfg.phi[s] * (y - mu) + cfg.sigma[s] * eps


def markov_ar_forecast(state: int, y: float, cfg: MarkovARConfig,
                       rng: np.random.Generator) -> np.ndarray:
    """``(M, H)`` independent rollouts of the true dynamics from ``(state, y)``.

    In hidden-state mode the starting state of each rollout is drawn from
    the chain's stationary distribution (uniform for the symmetric chain)
    instead of the true one.
    """
    M, H = cfg.m_trajectories, cfg.horizon
    phi = np.asarray(cfg.phi)
    mu = np.asarray(cfg.mu)
    sigma = np.asarray(cfg.sigma)
    if cfg.hidden_state:
        states = rng.integers(0, cfg.n_states, size=M)
    else:
        states = np.full(M, state)
    cur = np.full(M, float(y))
    out = np.empty((M, H))
    for h in range(H):
        states = _switch(states, cfg, rng)
        eps = rng.standard_normal(M)
        m = mu[states]
        cur = m + phi[states] * (cur - m) + sigma[states] * eps
        out[:, h] = cur
    return out


def generate_sequence(cfg: MarkovARConfig, seed) -> list[StreamRecord]:
    """One stream of ``cfg.length`` records.  Truth and forecasts use
    separate child generators so the truth path does not depend on M or H."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    truth_ss, fc_ss = ss.spawn(2)
    truth_rng = np.random.default_rng(truth_ss)
    fc_rng = np.random.default_rng(fc_ss)
    s = int(truth_rng.integers(0, cfg.n_states))
    y = float(cfg.mu[s])
    out = []
    for t in range(1, cfg.length + 1):
        s, y = markov_ar_step(s, y, cfg, truth_rng)
        ens = markov_ar_forecast(s, y, cfg, fc_rng)
        out.append(StreamRecord(t, np.array([y]), ens[:, :, None]))
    return out


def generate_stream(cfg: MarkovARConfig) -> list[list[StreamRecord]]:
    """``cfg.n_sequences`` independent streams from spawned sub-seeds."""
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_sequences)
    return [generate_sequence(cfg, child) for child in children]


# -- JSON Lines ---------------------------------------------------------


def _open(path, mode: str):
    path = Path(path)
    if path.suffix == ".gz":
        if "w" in mode:
            # fixed mtime keeps compressed bytes reproducible
            raw = open(path, "wb")
            gz = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
            return _ClosingText(gz, raw)
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, mode, encoding="utf-8", newline="\n")


class _ClosingText(io.TextIOWrapper):
    def __init__(self, gz, raw):
        super().__init__(gz, encoding="utf-8", newline="\n")
        self._raw = raw

    def close(self):
        super().close()
        self._raw.close()


def record_to_json(rec: StreamRecord) -> str:
    return json.dumps(
        {"t": int(rec.t), "y": rec.y.tolist(), "ensemble": rec.ensemble.tolist()},
        separators=(",", ":"),
    )


def _parse_record(obj, lineno: int) -> StreamRecord:
    if not isinstance(obj, dict):
        raise StreamSchemaError(f"line {lineno}: record must be a JSON object")
    for key in ("t", "y", "ensemble"):
        if key not in obj:
            raise StreamSchemaError(f"line {lineno}: record missing {key!r}")
    extra = set(obj) - {"t", "y", "ensemble"}
    if extra:
        raise StreamSchemaError(f"line {lineno}: unexpected keys {sorted(extra)}")
    t = obj["t"]
    if not isinstance(t, int) or isinstance(t, bool):
        raise StreamSchemaError(f"line {lineno}: 't' must be an integer")
    try:
        y = np.asarray(obj["y"], dtype=float)
        ens = np.asarray(obj["ensemble"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise StreamSchemaError(f"line {lineno}: non-numeric or ragged arrays ({exc})") from None
    if y.ndim != 1 or y.size == 0:
        raise StreamSchemaError(f"line {lineno}: 'y' must be a non-empty list of numbers")
    if ens.ndim != 3 or 0 in ens.shape:
        raise StreamSchemaError(f"line {lineno}: 'ensemble' must be nested M x H x d")
    if ens.shape[2] != y.size:
        raise StreamSchemaError(
            f"line {lineno}: ensemble dimension {ens.shape[2]} != observation dimension {y.size}"
        )
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(ens))):
        raise StreamSchemaError(f"line {lineno}: non-finite values")
    return StreamRecord(t, y, ens)


def iter_stream(path) -> Iterator[StreamRecord]:
    shape = None
    prev_t = None
    with _open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StreamParseError(f"{path}: line {lineno}: {exc.msg}") from None
            try:
                rec = _parse_record(obj, lineno)
            except StreamSchemaError as exc:
                raise StreamSchemaError(f"{path}: {exc}") from None
            if shape is None:
                shape = rec.shape
            elif rec.shape != shape:
                raise StreamSchemaError(
                    f"{path}: line {lineno}: ensemble shape {rec.shape} differs from {shape}"
                )
            if prev_t is not None and rec.t != prev_t + 1:
                raise StreamSchemaError(
                    f"{path}: line {lineno}: t={rec.t} does not follow t={prev_t}"
                )
            prev_t = rec.t
            yield rec


def load_stream(path) -> list[StreamRecord]:
    return list(iter_stream(path))


def write_stream(records: Iterable[StreamRecord], path) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        os.makedirs(path.parent, exist_ok=True)
    with _open(path, "w") as fh:
        for rec in records:
            fh.write(record_to_json(rec))
            fh.write("\n")
