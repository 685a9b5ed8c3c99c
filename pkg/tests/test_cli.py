import json
import shutil

import numpy as np
import pytest
import yaml

from homlab import cli, config
from homlab.tagstream import read_tags

FAST = {
    "sources": [
        {"pair_rate_per_s": 4e5, "wavefunction": {"profile": "gaussian", "width_ns": 0.85}, "transmittance_signal": 1.0, "transmittance_idler": 1.0}
    ]
    * 2,
    "detectors": [{"efficiency": 1.0, "dead_time_ns": 50.0, "jitter_ns": 0.2, "dark_rate_per_s": 100.0}] * 4,
    "beam_splitter": {"transmittance": 0.5, "reflectance": 0.5},
    "indistinguishability": 1.0,
    "duration_s": 3.0,
    "seed": 11,
    "analysis": {"hom_min_events": 100, "rate_duration_s": 0.1},
}


def write_cfg(tmp_path, d, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(d))
    return str(p)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_cfg(tmp, FAST)
    out = tmp / "out"
    assert cli.main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    return out


def test_simulate_writes_files_and_manifest(run):
    m = json.loads((run / "manifest.json").read_text())
    assert m["format"] == "homlab-manifest/1" and m["layout"] == "hom"
    assert [c["path"] for c in m["channels"]] == ["spd1.ttag", "spd2.ttag", "spd3.ttag", "spd4.ttag"]
    for k, c in enumerate(m["channels"]):
        s = read_tags(run / c["path"])
        assert s.channel == k and len(s) == c["count"] and c["sha256"] == cli.sha256_file(run / c["path"])
    assert config.from_dict(m["config"]).seed == 11


def test_simulate_same_seed_is_byte_identical(run, tmp_path):
    out = tmp_path / "again"
    assert cli.main(["simulate", "--config", write_cfg(tmp_path, FAST), "--out", str(out)]) == 0
    for k in range(1, 5):
        assert (out / f"spd{k}.ttag").read_bytes() == (run / f"spd{k}.ttag").read_bytes()
    other = tmp_path / "other"
    assert cli.main(["simulate", "--config", write_cfg(tmp_path, FAST), "--out", str(other), "--seed", "12"]) == 0
    assert (other / "spd1.ttag").read_bytes() != (run / "spd1.ttag").read_bytes()


def test_simulate_bad_beam_splitter_exits_2(tmp_path, capsys):
    d = dict(FAST, beam_splitter={"transmittance": 0.6, "reflectance": 0.6})
    code = cli.main(["simulate", "--config", write_cfg(tmp_path, d), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "beam_splitter" in capsys.readouterr().err


def test_simulate_unknown_key_exits_2(tmp_path):
    d = dict(FAST, laser=1)
    assert cli.main(["simulate", "--config", write_cfg(tmp_path, d), "--out", str(tmp_path / "x")]) == 2


def test_missing_config_exits_3(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "x")]) == 3


def test_source_layout(tmp_path):
    out = tmp_path / "src"
    assert cli.main(["simulate", "--config", write_cfg(tmp_path, FAST), "--out", str(out), "--layout", "source", "--duration", "0.2"]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert len(m["channels"]) == 2
    assert cli.main(["analyze", "hom", "--manifest", str(out / "manifest.json")]) == 3


def test_analyze_empty_streams_exits_4(tmp_path, capsys):
    d = json.loads(json.dumps(FAST))
    for s in d["sources"]:
        s["pair_rate_per_s"] = 0.0
    for x in d["detectors"]:
        x["dark_rate_per_s"] = 0.0
    out = tmp_path / "empty"
    assert cli.main(["simulate", "--config", write_cfg(tmp_path, d), "--out", str(out), "--duration", "0.01"]) == 0
    assert cli.main(["analyze", "g2", "--manifest", str(out / "manifest.json")]) == 4
    assert "insufficient statistics" in capsys.readouterr().err


def test_analyze_hom_table(run, capsys):
    assert cli.main(["analyze", "hom", "--manifest", str(run / "manifest.json")]) == 0
    res = json.loads((run / "results" / "hom.json").read_text())
    x = np.array([r[0] for r in res["rows"]])
    assert np.allclose(np.diff(x), 0.4)
    assert x[0] - 0.2 <= -3.5 and x[-1] + 0.2 >= 3.5
    assert res["summary"]["events"] >= 100
    assert 0 < res["summary"]["visibility"] <= 1
    out = capsys.readouterr().out
    assert "delay_ns" in out and "visibility=" in out


def test_analyze_rates_has_rows_per_scale(run):
    assert cli.main(["analyze", "rates", "--manifest", str(run / "manifest.json")]) == 0
    res = json.loads((run / "results" / "rates.json").read_text())
    assert [r[0] for r in res["rows"]] == [1.0, 2.0, 3.0, 4.0, 5.0]
    assert cli.main(["analyze", "rates", "--manifest", str(run / "manifest.json"), "--scales", "1", "2"]) == 2


@pytest.fixture(scope="module")
def analyzed(run):
    for est in ("g2", "heralded-g2", "cs", "hom"):
        assert cli.main(["analyze", est, "--manifest", str(run / "manifest.json")]) == 0
    return run


def test_report_rows_and_reproducibility(analyzed, tmp_path):
    m = str(analyzed / "manifest.json")
    assert cli.main(["report", "--manifest", m, "--out", str(tmp_path / "r1")]) == 0
    assert cli.main(["report", "--manifest", m, "--out", str(tmp_path / "r2")]) == 0
    a = (tmp_path / "r1" / "report.txt").read_bytes()
    assert a == (tmp_path / "r2" / "report.txt").read_bytes()
    text = a.decode()
    for key in ("visibility", "heralded_g2", "fwhm_ns", "coherence_time_1e2_ns", "purity", "cauchy_schwarz_R"):
        assert key in text
    assert (tmp_path / "r1" / "plot-hom.dat").exists()


def test_report_detects_tampering(analyzed, tmp_path, capsys):
    copy = tmp_path / "copy"
    shutil.copytree(analyzed, copy)
    data = bytearray((copy / "spd2.ttag").read_bytes())
    data[-1] ^= 1
    (copy / "spd2.ttag").write_bytes(bytes(data))
    assert cli.main(["report", "--manifest", str(copy / "manifest.json")]) == 3
    assert "checksum mismatch" in capsys.readouterr().err


def test_report_missing_results(run, tmp_path, capsys):
    copy = tmp_path / "fresh"
    shutil.copytree(run, copy)
    m = json.loads((copy / "manifest.json").read_text())
    m["results"] = {}
    (copy / "manifest.json").write_text(json.dumps(m))
    assert cli.main(["report", "--manifest", str(copy / "manifest.json")]) == 3
    err = capsys.readouterr().err
    assert "missing results" in err and "hom" in err


def test_defaults_prints_yaml(capsys):
    assert cli.main(["defaults"]) == 0
    assert config.loads(capsys.readouterr().out) == config.paper_defaults()
