import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from embshift import formats
from embshift.cli import main
from embshift.synthetic import toy_fixture_dir, write_toy_fixture

TOY = Path(str(toy_fixture_dir()))
FAST = ["--epochs", "200", "--lr", "0.01", "--quiet"]


def run(*argv):
    return main([str(a) for a in argv])


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture
def chain(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    p = {k: tmp_path / v for k, v in {"ds": "pairs.ebpd", "dir": "dir.bdir", "mod": "mod.abcm",
                                      "out": "out.ebin", "rep": "eval.json"}.items()}
    assert run("ingest", "--neutral", TOY / "neutral.txt", "--biased", TOY / "biased.txt",
               "--manifest", TOY / "manifest.json", "--bias-label", "toy", "--out", p["ds"]) == 0
    assert run("direction", "--dataset", p["ds"], "--out", p["dir"], "--stats", tmp_path / "stats.json") == 0
    assert run("train", "--dataset", p["ds"], "--direction", p["dir"], "--out", p["mod"], *FAST) == 0
    assert run("inject", "--module", p["mod"], "--direction", p["dir"], "--in", TOY / "users.ebin",
               "--out", p["out"]) == 0
    assert run("eval", "--module", p["mod"], "--direction", p["dir"], "--dataset", p["ds"],
               "--out", p["rep"]) == 0
    return p


def test_full_chain(chain):
    ds = formats.read_dataset(chain["ds"])
    assert ds.n == 4 and (ds.d, ds.l) == (8, 6) and ds.meta["created"] == "1970-01-01T00:00:00Z"
    direction = formats.read_direction(chain["dir"]).direction
    expected = np.array(json.loads((TOY / "direction.json").read_text()), dtype=np.float32)
    assert direction.tobytes() == expected.tobytes()
    out = formats.read_batch(chain["out"])
    users = formats.read_batch(TOY / "users.ebin")
    assert out.data.shape == users.data.shape and out.meta == users.meta
    rep = json.loads(chain["rep"].read_text())
    assert rep["n"] == 4 and rep["mean_adaptive_residual"] <= rep["mean_fixed_residual"]
    for s in rep["attention"].values():
        assert 0 < s["mean"] < 1
    train_rep = json.loads(Path(f"{chain['mod']}.report.json").read_text())
    assert len(train_rep["losses"]) == 201


def test_chain_idempotent(chain, tmp_path):
    again = tmp_path / "again"
    again.mkdir()
    run("ingest", "--neutral", TOY / "neutral.txt", "--biased", TOY / "biased.txt",
        "--manifest", TOY / "manifest.json", "--bias-label", "toy", "--out", again / "pairs.ebpd")
    run("direction", "--dataset", again / "pairs.ebpd", "--out", again / "dir.bdir", "--stats", again / "s.json")
    run("train", "--dataset", again / "pairs.ebpd", "--direction", again / "dir.bdir",
        "--out", again / "mod.abcm", *FAST)
    for name, key in (("pairs.ebpd", "ds"), ("dir.bdir", "dir"), ("mod.abcm", "mod")):
        assert (again / name).read_bytes() == chain[key].read_bytes()


def test_inject_no_adapt_gain_zero_byte_identical(chain, tmp_path):
    out = tmp_path / "same.ebin"
    assert run("inject", "--no-adapt", "--gain", "0", "--direction", chain["dir"],
               "--in", TOY / "users.ebin", "--out", out) == 0
    assert out.read_bytes() == (TOY / "users.ebin").read_bytes()


def test_gain_requires_no_adapt(chain, tmp_path, capsys):
    code = run("inject", "--module", chain["mod"], "--direction", chain["dir"], "--gain", "0.5",
               "--in", TOY / "users.ebin", "--out", tmp_path / "x.ebin")
    assert code == 2 and _err(capsys)["error"] == "usage"


def test_usage_errors(chain, tmp_path, capsys):
    assert run("train", "--dataset", chain["ds"], "--direction", chain["dir"], "--out",
               tmp_path / "m.abcm", "--epochs", "0") == 2
    assert _err(capsys)["error"] == "usage"
    assert run("train", "--dataset", chain["ds"]) == 2
    assert run("bogus") == 2
    assert run("direction", "--dataset", tmp_path / "missing.ebpd", "--out", tmp_path / "d") == 2
    assert run("train", "--dataset", chain["ds"], "--direction", chain["dir"], "--out",
               tmp_path / "m.abcm", "--r", "7") == 2


def test_format_error(tmp_path, chain, capsys):
    bad = tmp_path / "bad.ebpd"
    raw = bytearray(chain["ds"].read_bytes())
    raw[0:4] = b"XXXX"
    bad.write_bytes(bytes(raw))
    assert run("direction", "--dataset", bad, "--out", tmp_path / "d.bdir") == 3
    assert _err(capsys)["error"] == "format"
    flipped = bytearray(chain["ds"].read_bytes())
    flipped[-3] ^= 0x01
    bad.write_bytes(bytes(flipped))
    assert run("inspect", bad) == 0  # header only, payload is not checked
    assert run("direction", "--dataset", bad, "--out", tmp_path / "d.bdir") == 3


def test_dimension_error(chain, tmp_path, capsys):
    other = tmp_path / "other.bdir"
    formats.write_direction(other, formats.DirectionFile(np.zeros((6, 8), np.float32)))
    assert run("train", "--dataset", chain["ds"], "--direction", other, "--out", tmp_path / "m") == 4
    assert _err(capsys)["error"] == "dimension"
    assert run("inject", "--module", chain["mod"], "--direction", other, "--in", TOY / "users.ebin",
               "--out", tmp_path / "o.ebin") == 4


def test_provider_errors(tmp_path, capsys):
    (tmp_path / "n.txt").write_text("A woman waters a plant.\n")
    (tmp_path / "b.txt").write_text("A prompt nobody encoded.\n")
    assert run("ingest", "--neutral", tmp_path / "n.txt", "--biased", tmp_path / "b.txt",
               "--manifest", TOY / "manifest.json", "--out", tmp_path / "x.ebpd") == 5
    err = _err(capsys)
    assert err["error"] == "provider" and "pair 0" in err["message"]
    assert run("ingest", "--neutral", tmp_path / "n.txt", "--biased", tmp_path / "b.txt",
               "--provider", "http", "--endpoint", "http://127.0.0.1:9", "--out", tmp_path / "x.ebpd") == 5
    assert not (tmp_path / "x.ebpd").exists()


def test_divergence_exit_code(tmp_path, capsys):
    rng = np.random.default_rng(0)
    neutral = rng.integers(-8, 8, (4, 3, 3)) / 4.0
    biased = neutral + 0.25 + 1e-6 * rng.standard_normal((4, 3, 3))
    formats.write_dataset(tmp_path / "p.ebpd", formats.PairDataset(neutral, biased))
    formats.write_direction(tmp_path / "d.bdir", formats.DirectionFile(np.ones((3, 3), np.float32)))
    code = run("train", "--dataset", tmp_path / "p.ebpd", "--direction", tmp_path / "d.bdir",
               "--out", tmp_path / "m.abcm", "--lr", "1000", "--r", "1", "--quiet")
    assert code == 6 and _err(capsys)["error"] == "divergence"
    assert not (tmp_path / "m.abcm").exists()
    assert json.loads((tmp_path / "m.abcm.report.json").read_text())["status"] == "diverged"


def test_config_file_flags_win(chain, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dataset": str(chain["ds"]), "direction": str(chain["dir"]),
                               "epochs": 3, "lr": 0.5, "quiet": True}))
    out = tmp_path / "m.abcm"
    assert run("train", "--config", cfg, "--lr", "0.01", "--out", out) == 0
    rep = json.loads(Path(f"{out}.report.json").read_text())
    assert rep["config"]["epochs"] == 3 and rep["config"]["lr"] == 0.01
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert run("train", "--config", cfg) == 2


def test_inspect(chain, capsys):
    for key, magic in (("ds", "EBPD"), ("dir", "BDIR"), ("mod", "ABCM"), ("out", "EBIN")):
        assert run("inspect", chain[key]) == 0
        head = json.loads(capsys.readouterr().out)
        assert head["magic"] == magic and head["version"] == 1
    assert run("inspect", chain["mod"]) == 0
    head = json.loads(capsys.readouterr().out)
    assert head["d"] == 8 and head["l"] == 6


def test_direction_stats_to_stdout_and_subsample(chain, tmp_path, capsys):
    assert run("direction", "--dataset", chain["ds"], "--out", tmp_path / "d.bdir",
               "--subsample", "2", "--seed", "1") == 0
    stats = json.loads(capsys.readouterr().out)
    assert len(stats["residual_norms"]) == 2
    assert run("direction", "--dataset", chain["ds"], "--out", tmp_path / "d.bdir", "--subsample", "9") == 2


def test_instruct(tmp_path, capsys):
    assert run("instruct", "--bias", "negative emotion") == 0
    text = capsys.readouterr().out
    assert "negative emotion" in text and "200" in text
    assert run("instruct", "--bias", "negative emotion", "--count", "5", "--out", tmp_path / "i.txt") == 0
    assert "5" in (tmp_path / "i.txt").read_text()


def test_eval_transfer(chain, tmp_path):
    out = tmp_path / "t.json"
    assert run("eval", "--module", chain["mod"], "--direction", chain["dir"], "--dataset", chain["ds"],
               "--target", chain["ds"], "--out", out) == 0
    rep = json.loads(out.read_text())
    assert rep["source"] == rep["target"]


def test_fixture_regenerates_identically(tmp_path):
    write_toy_fixture(tmp_path)
    for f in TOY.iterdir():
        assert (tmp_path / f.name).read_bytes() == f.read_bytes(), f.name


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "embshift", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "inject" in res.stdout
