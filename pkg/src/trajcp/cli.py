"""Command line entry point.

    trajcp generate  [--config C] [--seed N] [--gzip] --out DIR
    trajcp calibrate [--config C] [--method M ...] [--rates a,b] [--seed N]
                     [--parallel N] [--checkpoint DIR] [--stop-after T]
                     [--resume DIR] [--self-check] --out DIR STREAM ...
    trajcp report    [--focus-rate R] --out DIR RECORDS_DIR

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import pandas as pd

from . import __version__
from .evaluation import (
    DEFAULT_RATES,
    METHODS,
    RECORD_COLUMNS,
    MethodRun,
    RunConfig,
    _fmt,
    _run_config_dict,
    check_rates,
    compare_report,
    records_frame,
)
from .online import ContractViolation, StateCorruption
from .optimizer import OptimizerConfig
from .streams import (
    MarkovARConfig,
    StreamParseError,
    StreamSchemaError,
    generate_stream,
    load_stream,
    write_stream,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# -- configuration ------------------------------------------------------

CALIBRATOR_KEYS = {"eta": 0.05, "big_d": 0.1}
RUN_KEYS = {"methods": ["cptraj", "aci"], "rates": list(DEFAULT_RATES), "mc_samples": 20_000,
            "seed": 0}
SECTIONS = ("stream", "calibrator", "optimizer", "run")


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {', '.join(unknown)}")


def _build(section: str, cls, values: dict):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from None


def load_config(path) -> dict:
    """Resolved configuration with every default filled in."""
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    _check_keys("top level", raw, SECTIONS)
    stream = raw.get("stream", {})
    _check_keys("stream", stream, _field_names(MarkovARConfig))
    cal = raw.get("calibrator", {})
    _check_keys("calibrator", cal, CALIBRATOR_KEYS)
    opt = raw.get("optimizer", {})
    _check_keys("optimizer", opt, _field_names(OptimizerConfig))
    run = raw.get("run", {})
    _check_keys("run", run, RUN_KEYS)
    cfg = {
        "stream": dataclasses.asdict(_build("stream", MarkovARConfig, stream)),
        "calibrator": {**CALIBRATOR_KEYS, **cal},
        "optimizer": dataclasses.asdict(_build("optimizer", OptimizerConfig, opt)),
        "run": {**RUN_KEYS, **run},
    }
    _validate_run(cfg)
    return cfg


def _validate_run(cfg: dict) -> None:
    run = cfg["run"]
    methods = run["methods"]
    if not isinstance(methods, list) or not methods:
        raise ConfigError("run.methods must be a non-empty list")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"run.methods: unknown method(s) {bad}; choose from {list(METHODS)}")
    try:
        run["rates"] = list(check_rates(run["rates"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"run.rates: {exc}") from None
    # validates eta, big_d and mc_samples through the real constructors
    for m in methods:
        run_config(cfg, m)


def run_config(cfg: dict, method: str) -> RunConfig:
    try:
        return RunConfig(
            method=method,
            rates=tuple(cfg["run"]["rates"]),
            eta=cfg["calibrator"]["eta"],
            big_d=cfg["calibrator"]["big_d"],
            optimizer=OptimizerConfig(**cfg["optimizer"]),
            mc_samples=cfg["run"]["mc_samples"],
            seed=cfg["run"]["seed"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid run config: {exc}") from None


def config_digest(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, seed: int, inputs, extra=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "tool": "trajcp",
        "version": __version__,
        "command": command,
        "config": cfg,
        "config_digest": config_digest(cfg),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "out_dir": str(out),
    }
    if extra:
        doc.update(extra)
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- generate -----------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["stream"]["seed"] = args.seed
    scfg = _build("stream", MarkovARConfig, cfg["stream"])
    out = Path(args.out)
    write_manifest(out, "generate", cfg, scfg.seed, [args.config] if args.config else [])
    suffix = ".jsonl.gz" if args.gzip else ".jsonl"
    for i, seq in enumerate(generate_stream(scfg)):
        path = out / f"seq{i}{suffix}"
        write_stream(seq, path)
        print(f"wrote {path} ({len(seq)} records)")
    return EXIT_OK


# -- calibrate ----------------------------------------------------------


def stream_name(path) -> str:
    name = Path(path).name
    for ext in (".gz", ".jsonl", ".json"):
        if name.endswith(ext):
            name = name[: -len(ext)]
    return name


def _load(path):
    try:
        return load_stream(path)
    except OSError as exc:
        raise DataError(f"cannot read stream {path}: {exc.strerror}") from None
    except (StreamParseError, StreamSchemaError) as exc:
        raise DataError(str(exc)) from None


def _run_job(job):
    """Worker body; returns rows and an optional snapshot."""
    path, method, rc, snapshot, stop_after = job
    records = _load(path)
    if not records:
        return [], None, 0
    horizons = records[0].ensemble.shape[1]
    if snapshot is not None:
        run = MethodRun.from_snapshot(snapshot)
        if run.horizons != horizons:
            raise ConfigError(f"checkpoint horizon {run.horizons} does not match {path}")
    else:
        run = MethodRun(rc, horizons)
    run.run(records, stop_after=stop_after)
    return run.rows, run.snapshot(), run.tick


def _execute(jobs, parallel: int):
    if parallel <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(_run_job, jobs))


def write_records(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(RECORD_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(v) for v in r) + "\n")


def _checkpoint_path(root: Path, stream: str, method: str) -> Path:
    return root / f"{stream}-{method}.json"


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    if args.method:
        cfg["run"]["methods"] = list(dict.fromkeys(args.method))
    if args.rates:
        try:
            cfg["run"]["rates"] = [float(x) for x in args.rates.split(",")]
        except ValueError:
            raise ConfigError("--rates must be a comma separated list of numbers") from None
    _validate_run(cfg)
    if args.parallel < 1:
        raise ConfigError("--parallel must be >= 1")
    if args.stop_after is not None and args.stop_after < 0:
        raise ConfigError("--stop-after must be non-negative")
    if not args.streams:
        raise ConfigError("no stream files given")
    names = [stream_name(p) for p in args.streams]
    if len(set(names)) != len(names):
        raise ConfigError("stream file names must be distinct")
    out = Path(args.out)
    write_manifest(out, "calibrate", cfg, cfg["run"]["seed"], args.streams,
                   {"resume": args.resume, "stop_after": args.stop_after})

    methods = cfg["run"]["methods"]
    jobs = []
    for path, name in zip(args.streams, names):
        for method in methods:
            rc = run_config(cfg, method)
            snap = None
            if args.resume:
                snap = _read_checkpoint(_checkpoint_path(Path(args.resume), name, method))
                if snap["run_config"] != json.loads(json.dumps(_run_config_dict(rc))):
                    raise ConfigError(f"checkpoint for {name}/{method} was made with a "
                                      "different configuration")
            jobs.append((str(path), method, rc, snap, args.stop_after))
    results = _execute(jobs, args.parallel)

    rec_dir = out / "records"
    rec_dir.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else None
    if ckpt:
        ckpt.mkdir(parents=True, exist_ok=True)
    rates = cfg["run"]["rates"]
    by_stream = {}
    for (path, method, _, _, _), (rows, snap, tick) in zip(jobs, results):
        name = stream_name(path)
        df = records_frame(rows)
        by_stream.setdefault(name, {})[method] = df
        for rate in rates:
            sel = [r for r in rows if r[3] == rate]
            write_records(rec_dir / f"{name}-{method}-{rate!r}.csv", sel)
        if ckpt and snap is not None:
            with open(_checkpoint_path(ckpt, name, method), "w", encoding="utf-8") as fh:
                json.dump(snap, fh, sort_keys=True)
        print(f"{name} {method}: {tick} ticks, {len(rows)} records")

    if args.self_check:
        return _self_check(cfg, args.streams, names)
    return EXIT_OK


def _read_checkpoint(path: Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt checkpoint {path}: {exc}") from None


def _self_check(cfg: dict, paths, names) -> int:
    """CPTRAJ with D = 0 must reproduce ACI exactly."""
    base = run_config(cfg, "aci")
    zero_d = dataclasses.replace(run_config(cfg, "cptraj"), big_d=0.0)
    for path, name in zip(paths, names):
        records = _load(path)
        if not records:
            continue
        H = records[0].ensemble.shape[1]
        a = MethodRun(base, H).run(records).rows
        b = MethodRun(zero_d, H).run(records).rows
        if a != b:
            print(f"self-check FAILED on {name}: D=0 cptraj differs from aci", file=sys.stderr)
            return EXIT_INTERNAL
        print(f"self-check ok on {name}: D=0 cptraj matches aci ({len(a)} records)")
    return EXIT_OK


# -- report -------------------------------------------------------------


def read_records(path: Path) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except (OSError, ValueError, pd.errors.ParserError) as exc:
        raise DataError(f"cannot read record file {path}: {exc}") from None
    if list(df.columns) != list(RECORD_COLUMNS):
        raise DataError(f"record file {path} has columns {list(df.columns)}, "
                        f"expected {list(RECORD_COLUMNS)}")
    try:
        return records_frame(df.itertuples(index=False, name=None))
    except (ValueError, TypeError) as exc:
        raise DataError(f"record file {path} has malformed values: {exc}") from None


def cmd_report(args) -> int:
    rec_dir = Path(args.records)
    if (rec_dir / "records").is_dir():
        rec_dir = rec_dir / "records"
    if not rec_dir.is_dir():
        raise DataError(f"records directory {rec_dir} does not exist")
    files = sorted(rec_dir.glob("*.csv"))
    if not files:
        raise DataError(f"no record files in {rec_dir}")
    out = Path(args.out)
    write_manifest(out, "report", {"focus_rate": args.focus_rate}, None,
                   [str(f) for f in files])
    parts: dict = {}
    rates = set()
    for f in files:
        try:
            stream, method, rate_s = f.stem.rsplit("-", 2)
            rate = float(rate_s)
        except ValueError:
            raise DataError(f"record file {f} is not named STREAM-METHOD-RATE.csv") from None
        df = read_records(f)
        if len(df) and not (df["rate"] == rate).all():
            raise DataError(f"record file {f} holds rates other than {rate}")
        parts.setdefault((stream, method), []).append(df)
        rates.add(rate)
    runs = {key: pd.concat(dfs, ignore_index=True).sort_values(
                ["t", "h", "rate"], kind="stable").reset_index(drop=True)
            for key, dfs in parts.items()}
    try:
        summary = compare_report(runs, sorted(rates), out, args.focus_rate)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    for row in summary["comparison"]:
        print(f"{row['method']:<10} {row['metric']:<6} mean={_num(row['mean'])} "
              f"std={_num(row['std'])} n={row['n_streams']}")
    return EXIT_OK


def _num(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6g}"


# -- entry point --------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trajcp", description="Online conformal calibration of forecast "
                                           "trajectory ensembles.")
    p.add_argument("--version", action="version", version=f"trajcp {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write synthetic Markov-switching AR streams")
    g.add_argument("--config", help="JSON configuration file")
    g.add_argument("--seed", type=int, help="override stream.seed")
    g.add_argument("--gzip", action="store_true", help="write .jsonl.gz files")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("calibrate", help="run calibration methods over stream files")
    c.add_argument("streams", nargs="*", help="JSON-Lines stream files")
    c.add_argument("--config", help="JSON configuration file")
    c.add_argument("--method", action="append", choices=METHODS,
                   help="method to run; repeat for several (default from config)")
    c.add_argument("--rates", help="comma separated miscoverage rates")
    c.add_argument("--seed", type=int, help="override run.seed")
    c.add_argument("--parallel", type=int, default=1, help="worker processes")
    c.add_argument("--checkpoint", help="directory for end-of-run snapshots")
    c.add_argument("--stop-after", type=int, help="stop each run after this many ticks")
    c.add_argument("--resume", help="checkpoint directory to continue from")
    c.add_argument("--self-check", action="store_true",
                   help="verify that cptraj with D=0 reproduces aci")
    c.add_argument("--out", required=True, help="output directory")
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("report", help="build metric tables from record files")
    r.add_argument("records", help="records directory (or a calibrate output directory)")
    r.add_argument("--focus-rate", type=float, default=0.1,
                   help="rate for the per-horizon coverage and width table")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"trajcp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"trajcp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContractViolation, StateCorruption) as exc:
        print(f"trajcp: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
