import json

import pytest

from trajcp.cli import config_digest, load_config, main

SMALL = {"stream": {"length": 40, "horizon": 3, "m_trajectories": 5, "n_sequences": 2},
         "run": {"rates": [0.1, 0.5]}}


@pytest.fixture
def small(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "gen")]) == 0
    streams = [str(tmp_path / "gen" / f"seq{i}.jsonl") for i in range(2)]
    return tmp_path, cfg, streams


def read_dir(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_generate_defaults(tmp_path):
    out = tmp_path / "new" / "dir"
    assert main(["generate", "--out", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == ["manifest.json", "seq0.jsonl", "seq1.jsonl", "seq2.jsonl"]
    assert len((out / "seq0.jsonl").read_text().splitlines()) == 500
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_digest"] == config_digest(manifest["config"])
    assert manifest["seed"] == 0


def test_generate_gzip_and_seed(tmp_path):
    assert main(["generate", "--seed", "3", "--gzip", "--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "seq0.jsonl.gz").exists()
    assert main(["generate", "--seed", "3", "--gzip", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "seq1.jsonl.gz").read_bytes() == \
           (tmp_path / "b" / "seq1.jsonl.gz").read_bytes()


def test_invalid_field_is_named(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"stream": {"stay_prob": 1.5}}))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "stay_prob" in capsys.readouterr().err


@pytest.mark.parametrize("doc", [{"streams": {}}, {"run": {"speed": 1}},
                                 {"optimizer": {"lam": -1}}, {"run": {"methods": ["x"]}}])
def test_config_rejections(tmp_path, doc):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["calibrate"])
    assert exc.value.code == 1


def test_calibrate_and_report(small, capsys):
    tmp, cfg, streams = small
    cal = tmp / "cal"
    rc = main(["calibrate", "--config", str(cfg), "--method", "cptraj", "--method", "aci",
               "--self-check", "--out", str(cal), *streams])
    assert rc == 0
    assert "self-check ok" in capsys.readouterr().out
    names = sorted(p.name for p in (cal / "records").iterdir())
    assert names == sorted(f"seq{i}-{m}-{r}.csv" for i in range(2) for m in ("aci", "cptraj")
                           for r in ("0.1", "0.5"))
    manifest = json.loads((cal / "manifest.json").read_text())
    assert manifest["inputs"] == streams and manifest["config"]["run"]["rates"] == [0.1, 0.5]

    assert main(["report", str(cal), "--out", str(tmp / "r1")]) == 0
    assert main(["report", str(cal), "--out", str(tmp / "r2")]) == 0
    r1, r2 = read_dir(tmp / "r1"), read_dir(tmp / "r2")
    r1.pop("manifest.json"), r2.pop("manifest.json")
    assert r1 == r2
    summary = json.loads(r1["summary.json"])
    assert summary["methods"] == ["aci", "cptraj"]


def test_rates_flag(small):
    tmp, cfg, streams = small
    assert main(["calibrate", "--config", str(cfg), "--rates", "0.2,0.4", "--method", "aci",
                 "--out", str(tmp / "c"), streams[0]]) == 0
    assert sorted(p.name for p in (tmp / "c" / "records").iterdir()) == \
           ["seq0-aci-0.2.csv", "seq0-aci-0.4.csv"]
    assert main(["calibrate", "--rates", "0.5,0.2", "--out", str(tmp / "d"), streams[0]]) == 1


def test_resume_is_bit_exact(small):
    tmp, cfg, streams = small
    base = ["calibrate", "--config", str(cfg), "--method", "cptraj"]
    assert main(base + ["--out", str(tmp / "full"), *streams]) == 0
    assert main(base + ["--stop-after", "15", "--checkpoint", str(tmp / "ck"),
                        "--out", str(tmp / "half"), *streams]) == 0
    assert main(base + ["--resume", str(tmp / "ck"), "--out", str(tmp / "rest"), *streams]) == 0
    assert read_dir(tmp / "full" / "records") == read_dir(tmp / "rest" / "records")


def test_resume_rejects_other_config(small):
    tmp, cfg, streams = small
    assert main(["calibrate", "--config", str(cfg), "--method", "aci", "--stop-after", "5",
                 "--checkpoint", str(tmp / "ck"), "--out", str(tmp / "a"), streams[0]]) == 0
    assert main(["calibrate", "--config", str(cfg), "--method", "aci", "--seed", "9",
                 "--resume", str(tmp / "ck"), "--out", str(tmp / "b"), streams[0]]) == 1


def test_parallel_matches_serial(small):
    tmp, cfg, streams = small
    args = ["calibrate", "--config", str(cfg), "--method", "cptraj", "--method", "aci"]
    assert main(args + ["--out", str(tmp / "s"), *streams]) == 0
    assert main(args + ["--parallel", "3", "--out", str(tmp / "p"), *streams]) == 0
    assert read_dir(tmp / "s" / "records") == read_dir(tmp / "p" / "records")


def test_data_errors(small, tmp_path, capsys):
    tmp, cfg, streams = small
    bad = tmp / "bad.jsonl"
    bad.write_text('{"t":1,"y":[0]}\n')
    assert main(["calibrate", "--out", str(tmp / "x"), str(bad)]) == 2
    assert "line 1" in capsys.readouterr().err
    (tmp / "empty").mkdir()
    assert main(["report", str(tmp / "empty"), "--out", str(tmp / "y")]) == 2

    assert main(["calibrate", "--config", str(cfg), "--method", "aci",
                 "--out", str(tmp / "c"), streams[0]]) == 0
    victim = tmp / "c" / "records" / "seq0-aci-0.1.csv"
    victim.write_text("garbage\n1,2\n")
    capsys.readouterr()
    assert main(["report", str(tmp / "c"), "--out", str(tmp / "z")]) == 2
    assert "seq0-aci-0.1.csv" in capsys.readouterr().err


def test_load_config_defaults():
    cfg = load_config(None)
    assert cfg["stream"]["horizon"] == 32 and cfg["calibrator"]["eta"] == 0.05
    assert cfg["run"]["methods"] == ["cptraj", "aci"]
