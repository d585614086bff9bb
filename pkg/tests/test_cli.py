import csv
import hashlib
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from robust_detect import cli

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
G0 = {"kind": "gaussian", "mean": -2, "var": 4}
G1 = {"kind": "gaussian", "mean": 0, "var": 16}


def band_doc(command="lfd", n=3001, **extra):
    doc = {"schema_version": 1, "command": command, "grid": {"x_min": -30, "x_max": 30, "n": n},
           "sets": [{"type": "band", "nominal": G0, "a": 0.75, "b": 1.2},
                    {"type": "band", "nominal": G1, "a": 0.75, "b": 1.2}]}
    doc.update(extra)
    return doc


def run_doc(tmp_path, doc, name="cfg", seed=None):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(doc))
    out = tmp_path / f"out_{name}"
    args = [doc["command"], "--config", str(path), "--out", str(out), "--quiet"]
    if seed is not None:
        args += ["--seed", str(seed)]
    return cli.main(args), out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# lfd / breakdown / roc


def test_lfd_bundle_and_reproducibility(tmp_path):
    code, out = run_doc(tmp_path, band_doc(), "a")
    code2, out2 = run_doc(tmp_path, band_doc(), "b")
    assert code == code2 == 0
    for name in ("lfds.csv", "scalars.json"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes()
    m1 = json.loads((out / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m1["files"] == m2["files"]
    for name, digest in m1["files"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    assert m1["rng_algorithm"].startswith("numpy.random.Philox")
    scalars = json.loads((out / "scalars.json").read_text())
    assert set(scalars) >= {"c0", "c1", "breakdown"} and scalars["breakdown"] is False
    rows = read_csv(out / "lfds.csv")
    assert rows[0] == ["x", "q0", "q1", "llr", "region_label"]
    assert len(rows) == 3002


def test_csv_format_lf_and_round_trip_digits(tmp_path):
    code, out = run_doc(tmp_path, band_doc())
    raw = (out / "lfds.csv").read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    from robust_detect.lfd import solve_lfds
    cfg = cli.parse_config(band_doc())
    _, (s0, s1) = cli.build_sets(cfg)
    pair = solve_lfds(s0, s1)
    rows = read_csv(out / "lfds.csv")[1:]
    # 17 significant digits reproduce every double exactly
    assert np.array_equal(np.array([float(r[1]) for r in rows]), pair.q0.values)
    assert np.array_equal(np.array([float(r[3]) for r in rows]), pair.llr.values)


def test_format_value():
    assert cli.format_value(0.1) == "0.10000000000000001"
    assert cli.format_value(np.float64(1 / 3)) == "0.33333333333333331"
    assert cli.format_value(math.inf) == "inf" and cli.format_value(-math.inf) == "-inf"
    assert cli.format_value(np.int64(7)) == "7" and cli.format_value(True) == "1"
    assert cli.format_value("UPPER0") == "UPPER0"


def test_breakdown_command(tmp_path):
    doc = band_doc("breakdown", n=6001)
    doc["sets"] = [{"type": "contamination", "nominal": G0, "eps": 0.0},
                   {"type": "contamination", "nominal": G1, "eps": 0.0}]
    code, out = run_doc(tmp_path, doc)
    assert code == 0
    eps = json.loads((out / "scalars.json").read_text())["eps_star"]
    assert 0.26 <= eps <= 0.30


def test_lfd_breakdown_exit_code(tmp_path):
    doc = band_doc()
    doc["sets"] = [{"type": "contamination", "nominal": G0, "eps": 0.4},
                   {"type": "contamination", "nominal": G1, "eps": 0.4}]
    code, out = run_doc(tmp_path, doc)
    assert code == cli.EXIT_BREAKDOWN
    assert json.loads((out / "scalars.json").read_text())["breakdown"] is True
    assert json.loads((out / "manifest.json").read_text())["exit_code"] == cli.EXIT_BREAKDOWN


def test_roc_command(tmp_path):
    code, out = run_doc(tmp_path, band_doc("roc", n=1201, options={"n": [1, 3]}))
    assert code == 0
    for n in (1, 3):
        rows = read_csv(out / f"roc_{n}.csv")
        assert rows[0] == ["alpha", "power", "log_threshold", "gamma"]
        a = np.array([float(r[0]) for r in rows[1:]])
        p = np.array([float(r[1]) for r in rows[1:]])
        assert np.all(np.diff(a) >= 0) and np.all(np.diff(p) >= 0)
        assert a[0] == 0 and p[-1] == pytest.approx(1.0)
    for h in (0, 1):
        rows = read_csv(out / f"llr_dist{h}.csv")
        assert rows[0] == ["kind", "lo", "hi", "mass"]
        assert sum(float(r[3]) for r in rows[1:]) == pytest.approx(1.0, abs=1e-8)


# ---------------------------------------------------------------------------
# verify


def _corrupt(src: Path, dst: Path):
    rows = read_csv(src)
    for r in rows[1:]:
        r[3] = cli.format_value(float(r[3]) + 0.5 * math.sin(float(r[0])))
    with open(dst, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def test_verify_accepts_solver_output_and_rejects_corrupted_llr(tmp_path):
    code, out = run_doc(tmp_path, band_doc(), "solve")
    assert code == 0
    good = band_doc("verify", options={"lfd_file": str(out / "lfds.csv"), "n_samples": 100}, seed=3)
    code, vout = run_doc(tmp_path, good, "good")
    assert code == 0
    assert all(r[4] == "1" for r in read_csv(vout / "criteria.csv")[1:])

    bad_file = tmp_path / "corrupted.csv"
    _corrupt(out / "lfds.csv", bad_file)
    bad = band_doc("verify", options={"lfd_file": "corrupted.csv", "n_samples": 100}, seed=3)
    code, bout = run_doc(tmp_path, bad, "bad")
    assert code == cli.EXIT_VERIFY
    rows = {r[0]: r for r in read_csv(bout / "criteria.csv")[1:]}
    assert rows["3"][4] == "0" and float(rows["3"][1]) > 1e-2
    assert rows["llr"][4] == "0"


def test_verify_rejects_mismatched_file(tmp_path):
    code, out = run_doc(tmp_path, band_doc(n=1001), "small")
    doc = band_doc("verify", options={"lfd_file": str(out / "lfds.csv")}, seed=1)
    code, _ = run_doc(tmp_path, doc, "v")
    assert code == cli.EXIT_CONFIG


# ---------------------------------------------------------------------------
# sequential


def sprt_doc(command, **options):
    n0, n1 = {"kind": "gaussian", "mean": 0, "var": 1}, {"kind": "gaussian", "mean": 1, "var": 1}
    return {"schema_version": 1, "command": command, "grid": {"x_min": -8, "x_max": 9, "n": 171},
            "sets": [{"type": "density", "density": n0}, {"type": "density", "density": n0},
                     {"type": "density", "density": n1}],
            "options": {"lambda": [20, 300], "zgrid": {"L": 10, "m": 61}, **options}, "seed": 5}


def test_seq_design_command(tmp_path):
    code, out = run_doc(tmp_path, sprt_doc("seq-design"))
    assert code == 0
    rows = read_csv(out / "policy.csv")
    assert rows[0] == ["log_z2", "rho", "stop", "decision"]
    assert len(rows) == 63  # zero node plus m log-spaced nodes
    d = json.loads((out / "design.json").read_text())
    assert d["free_hypotheses"] == [2] and len(d["rho"]) == 62


def test_seq_simulate_reproducible_and_seeded(tmp_path):
    doc = sprt_doc("seq-simulate", runs=300, horizon=500)
    c1, o1 = run_doc(tmp_path, doc, "a")
    c2, o2 = run_doc(tmp_path, doc, "b")
    c3, o3 = run_doc(tmp_path, doc, "c", seed=6)
    assert c1 == c2 == c3 == 0
    t1 = (o1 / "trajectories.csv").read_bytes()
    assert t1 == (o2 / "trajectories.csv").read_bytes()
    assert t1 != (o3 / "trajectories.csv").read_bytes()
    rows = read_csv(o1 / "trajectories.csv")
    assert rows[0] == ["truth", "run", "tau", "decision"] and len(rows) == 601
    summary = json.loads((o1 / "summary.json").read_text())
    assert summary["seed"] == 5 and len(summary["error_rates"]) == 2
    assert json.loads((o3 / "manifest.json").read_text())["seed"] == 6


# ---------------------------------------------------------------------------
# config handling


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.name)
def test_shipped_configs_round_trip(path):
    cfg = cli.load_config(path)
    again = cli.parse_config(json.loads(cfg.to_json()))
    assert again == cfg
    assert again.to_json() == cfg.to_json()


def test_round_trip_fills_defaults_once():
    cfg = cli.parse_config(band_doc("roc"))
    assert cfg.options == cli.OPTION_DEFAULTS["roc"]
    assert cli.parse_config(cfg.to_dict()) == cfg


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(schema_version=2),
    lambda d: d.update(command="nope"),
    lambda d: d.update(extra=1),
    lambda d: d["grid"].update(n=2.5),
    lambda d: d["sets"].pop(),
    lambda d: d["sets"][0].update(type="ball"),
    lambda d: d["sets"][0].pop("a"),
    lambda d: d.update(options={"bogus": 1}),
], ids=["schema", "command", "key", "grid-n", "set-count", "set-type", "band-keys", "option"])
def test_structural_config_errors(mutate):
    doc = band_doc()
    mutate(doc)
    with pytest.raises(cli.ConfigError):
        cli.parse_config(doc)


def test_stochastic_commands_need_seed():
    with pytest.raises(cli.ConfigError):
        cli.parse_config(band_doc("verify"))
    assert cli.parse_config(band_doc("verify"), seed=4).seed == 4
    with pytest.raises(cli.ConfigError):
        cli.parse_config(band_doc("lfd", seed=-1))


@pytest.mark.parametrize("doc", [
    band_doc(sets=[{"type": "band", "nominal": G0, "a": 1.5, "b": 1.2},
                   {"type": "band", "nominal": G1, "a": 0.75, "b": 1.2}]),
    band_doc(sets=[{"type": "band", "nominal": {"kind": "gaussian", "mean": 0, "var": -1}, "a": 0.5, "b": 2},
                   {"type": "band", "nominal": G1, "a": 0.75, "b": 1.2}]),
    band_doc(sets=[{"type": "contamination", "nominal": G0, "eps": 0.7},
                   {"type": "contamination", "nominal": G1, "eps": 0.1}]),
], ids=["band-a", "variance", "eps"])
def test_numeric_config_errors_exit_2(tmp_path, doc):
    code, out = run_doc(tmp_path, doc)
    assert code == cli.EXIT_CONFIG
    assert json.loads((out / "manifest.json").read_text())["exit_code"] == cli.EXIT_CONFIG


def test_command_mismatch_and_bad_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(band_doc()))
    assert cli.main(["roc", "--config", str(path), "--out", str(tmp_path / "o"), "--quiet"]) == cli.EXIT_CONFIG
    path.write_text("{not json")
    assert cli.main(["lfd", "--config", str(path), "--out", str(tmp_path / "o"), "--quiet"]) == cli.EXIT_CONFIG


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    path = tmp_path / "c.json"
    path.write_text(json.dumps(band_doc()))
    assert cli.main(["lfd", "--config", str(path), "--out", str(blocker / "sub"), "--quiet"]) == cli.EXIT_IO


def test_threads_env(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(band_doc("breakdown", n=601)))
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    assert cli.main(["breakdown", "--config", str(path), "--out", str(tmp_path / "o"), "--quiet"]) == cli.EXIT_CONFIG
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    assert cli.main(["breakdown", "--config", str(path), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["threads"] == "1"


def test_console_entry_point(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(band_doc("breakdown", n=601)))
    res = subprocess.run([sys.executable, "-m", "robust_detect.cli", "breakdown", "--config", str(path),
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "breakdown ok" in res.stderr
