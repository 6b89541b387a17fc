import csv
import json

import pytest
import yaml

from bosemix import cli

SMALL = {
    "system": {"n_a": 2, "n_b": 2, "e_max": 10, "parity": "even", "truncation": "component"},
    "couplings": {"g_a": 3.0, "g_b": 3.0, "g_ab": 5.0},
    "stages": ["spectrum", "stats", "eth"],
    "eth": {"window": [100, 250]},
}


def _write(tmp_path, cfg, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return p


def _run(tmp_path, cfg, out="out", extra=()):
    return cli.main(["run", "--config", str(_write(tmp_path, cfg)), "--out", str(tmp_path / out),
                     "--threads", "1", *extra])


def test_validate_and_schema_errors(tmp_path, capsys):
    assert cli.main(["validate", "--config", str(_write(tmp_path, SMALL))]) == cli.EXIT_OK
    effective = json.loads(capsys.readouterr().out)
    assert effective["stats"]["poly_degree"] == 10 and effective["cache"]["policy"] == "use"
    bad = {**SMALL, "system": {**SMALL["system"], "parity": "sideways"}}
    assert cli.main(["validate", "--config", str(_write(tmp_path, bad))]) == cli.EXIT_CONFIG
    assert _run(tmp_path, bad, out="bad") == cli.EXIT_CONFIG
    assert not (tmp_path / "bad").exists()
    typo = {**SMALL, "stagez": ["spectrum"]}
    assert _run(tmp_path, typo, out="typo") == cli.EXIT_CONFIG
    both = {**SMALL, "system": {**SMALL["system"], "target_dimension": 100}}
    assert cli.main(["validate", "--config", str(_write(tmp_path, both))]) == cli.EXIT_CONFIG


def test_run_report_and_cache(tmp_path, capsys, monkeypatch):
    cache = tmp_path / "cache"
    assert _run(tmp_path, SMALL, extra=("--cache-dir", str(cache))) == cli.EXIT_OK
    out = tmp_path / "out"
    man = json.loads((out / "manifest.json").read_text())
    assert man["cache"][0]["hit"] is False
    res = man["results"]["gA3_gB3_gAB5"]
    assert res["stats"]["fittable"] in (True, False)
    assert "retained_kurtosis" in res["eth"]
    assert man["effective_config"]["eth"]["window"] == [100, 250]
    assert (out / "effective_config.json").exists() and not (out / ".lock").exists()

    capsys.readouterr()
    assert cli.main(["report", str(out)]) == cli.EXIT_OK
    text = capsys.readouterr().out
    assert "inverse kurtosis" in text and "beta" in text and "stage quench   absent" in text

    # stats-only rerun must not diagonalize
    def boom(*a, **k):
        raise AssertionError("diagonalize called")

    monkeypatch.setattr(cli, "diagonalize", boom)
    stats_only = {**SMALL, "stages": ["stats"]}
    assert _run(tmp_path, stats_only, out="out2", extra=("--cache-dir", str(cache))) == cli.EXIT_OK
    man2 = json.loads((tmp_path / "out2" / "manifest.json").read_text())
    assert man2["cache"][0]["hit"] is True
    assert man2["system"]["stages"]["eth"] == "absent"
    a = {x["path"]: x["sha256"] for x in man["artifacts"] if x["stage"] == "stats"}
    b = {x["path"]: x["sha256"] for x in man2["artifacts"] if x["stage"] == "stats"}
    assert a == b

    # different couplings never hit the cache
    other = {**SMALL, "couplings": {"g_a": 3.0, "g_b": 3.0, "g_ab": 5.5}}
    monkeypatch.undo()
    assert _run(tmp_path, other, out="out3", extra=("--cache-dir", str(cache))) == cli.EXIT_OK
    assert json.loads((tmp_path / "out3" / "manifest.json").read_text())["cache"][0]["hit"] is False


def test_determinism(tmp_path):
    cfg = {**SMALL, "cache": {"policy": "off"}}
    assert _run(tmp_path, cfg, out="a") == cli.EXIT_OK
    assert _run(tmp_path, cfg, out="b") == cli.EXIT_OK
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["artifacts"] == mb["artifacts"]
    assert ma["results"] == mb["results"]


def test_report_flags_tampering_and_missing(tmp_path, capsys):
    assert _run(tmp_path, SMALL) == cli.EXIT_OK
    target = tmp_path / "out" / "points" / "gA3_gB3_gAB5" / "brody_fit.json"
    target.write_text(target.read_text() + " ")
    assert cli.main(["report", str(tmp_path / "out" / "manifest.json")]) == cli.EXIT_CHECKSUM
    assert "CHECKSUM MISMATCH" in capsys.readouterr().out
    assert cli.main(["report", str(tmp_path / "nowhere")]) == cli.EXIT_MANIFEST


def test_corrupt_cache_and_lock(tmp_path):
    cache = tmp_path / "cache"
    cfg = {**SMALL, "stages": ["spectrum"]}
    assert _run(tmp_path, cfg, extra=("--cache-dir", str(cache))) == cli.EXIT_OK
    entry = next(cache.glob("spectrum_*.bin"))
    raw = bytearray(entry.read_bytes())
    raw[-1] ^= 0xFF
    entry.write_bytes(bytes(raw))
    assert _run(tmp_path, cfg, out="c", extra=("--cache-dir", str(cache))) == cli.EXIT_CACHE
    (tmp_path / "locked").mkdir()
    (tmp_path / "locked" / ".lock").write_text("1")
    assert _run(tmp_path, cfg, out="locked") == cli.EXIT_LOCKED


def test_stage_failure_exit_code(tmp_path):
    cfg = {**SMALL, "eth": {"window": [100, 5000]}}
    assert _run(tmp_path, cfg) == cli.EXIT_STAGE


def test_grid_run_emits_heatmap_csvs(tmp_path):
    cfg = {**SMALL, "couplings": {"g_a": [0.0, 4.0], "g_b": [0.0, 2.0], "g_ab": 5.0}, "cache": {"policy": "off"}}
    assert _run(tmp_path, cfg) == cli.EXIT_OK
    with open(tmp_path / "out" / "brody_grid.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(float(r["g_A"]), float(r["g_B"])) for r in rows] == [(0, 0), (0, 2), (4, 0), (4, 2)]
    with open(tmp_path / "out" / "inverse_kurtosis_grid.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and all(0 < float(r["inverse_kurtosis"]) < 1 for r in rows)


def test_quench_stage(tmp_path, capsys):
    cfg = {
        "system": {"n_a": 2, "n_b": 2, "e_max": 10, "parity": "even", "truncation": "component"},
        "couplings": {"g_a": 2.5, "g_b": 0.0, "g_ab": 4.0},
        "stages": ["quench"],
        "quench": {"t_max": 20, "dt": 0.1, "t_window": [5, 20], "n_x": 41, "n_k": 31,
                   "pairs_a": [[i, 9 - i, 1.0] for i in range(5)]},
        "cache": {"policy": "off"},
    }
    assert _run(tmp_path, cfg) == cli.EXIT_OK
    q = tmp_path / "out" / "points" / "gA2.5_gB0_gAB4" / "quench"
    assert (q / "quench_series.csv").exists() and (q / "density_B.npy").exists() and (q / "grid_k.csv").exists()
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["results"]["gA2.5_gB0_gAB4"]["quench"]["N_mc"] > 0
    capsys.readouterr()
    assert cli.main(["report", str(tmp_path / "out")]) == cli.EXIT_OK
    assert "N_mc" in capsys.readouterr().out


def test_scan_and_self_check(tmp_path, capsys):
    out = tmp_path / "scan.csv"
    assert cli.main(["scan", "--e-min", "19", "--e-max", "21", "--target", "6050", "--out", str(out)]) == 0
    assert "20.0,6050" in out.read_text()
    assert cli.main(["scan", "--e-min", "2", "--e-max", "4", "--target", "6050"]) == cli.EXIT_STAGE
    assert cli.main(["validate", "--config", str(_write(tmp_path, SMALL)), "--self-check", "--seed", "3"]) == 0


def test_target_dimension_config(tmp_path):
    cfg = {**SMALL, "system": {"n_a": 2, "n_b": 2, "target_dimension": 6050, "parity": "even",
                               "truncation": "component"}}
    assert cli._resolve_e_max(cli.load_config(_write(tmp_path, cfg)).system) == 20.0
