from __future__ import annotations

import csv
import io
import json
import shutil
import subprocess

import numpy as np
import pytest

from leocombine import bench
from leocombine.cli import main
from leocombine.errors import DomainError

SPEC = {
    "config": {"sf": 9},
    "pass": {"max_elevation_deg": 90, "tau_s": 2.5, "n_transmissions": 8, "pass_duration_s": 20},
    "rgr_sweep_db": [-10],
    "seeds": [1],
    "methods": ["b2lora", "lora-baseline"],
}
HEADER = "method,rgr_db,max_elevation_deg,n_combined,ser,prr,detected,snr_gain_db,seed,config_hash"


def _spec_file(tmp_path, name="spec.json", **kw):
    rec = {**SPEC, **kw}
    p = tmp_path / name
    p.write_text(json.dumps(rec))
    return p


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture(scope="module")
def capture(tmp_path_factory):
    d = tmp_path_factory.mktemp("cap")
    spec = _spec_file(d)
    out = d / "pass.cf32"
    assert main(["gen", "--spec", str(spec), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def noise_capture(tmp_path_factory):
    d = tmp_path_factory.mktemp("noise")
    spec = _spec_file(d, **{"pass": {**SPEC["pass"], "n_transmissions": 0}})
    out = d / "noise.cf32"
    assert main(["gen", "--spec", str(spec), "--out", str(out)]) == 0
    return out


# ---------------------------------------------------------------------------
# gen


def test_gen_writes_capture_and_manifest(capture):
    n = int(20 * 250e3)
    assert capture.stat().st_size == 8 * n
    doc = json.loads(capture.with_suffix(".manifest").read_text())
    assert doc["n_samples"] == n
    assert doc["config"]["sample_rate_hz"] == 250e3
    assert len(doc["arrival_times_s"]) == 8
    assert len(doc["payload_symbols"]) == 20
    assert doc["seed"] == 1 and doc["rgr_db"] == -10
    assert len(doc["impairments"]["cfo_per_packet_hz"]) == 8
    assert "rgr_note" in doc


def test_gen_is_deterministic(tmp_path, capture):
    spec = _spec_file(tmp_path)
    out = tmp_path / "again.cf32"
    assert main(["gen", "--spec", str(spec), "--out", str(out)]) == 0
    assert out.read_bytes() == capture.read_bytes()
    assert out.with_suffix(".manifest").read_text() == capture.with_suffix(".manifest").read_text()


def test_gen_rejects_bad_specs(tmp_path):
    overlap = _spec_file(tmp_path, "o.json", **{"pass": {**SPEC["pass"], "tau_s": 0.05}})
    assert main(["gen", "--spec", str(overlap), "--out", str(tmp_path / "o.cf32")]) == 5
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["gen", "--spec", str(bad), "--out", str(tmp_path / "b.cf32")]) == 5
    unknown = _spec_file(tmp_path, "u.json", methods=["xcopy"])
    assert main(["gen", "--spec", str(unknown), "--out", str(tmp_path / "u.cf32")]) == 5
    empty = _spec_file(tmp_path, "e.json", seeds=[])
    assert main(["gen", "--spec", str(empty), "--out", str(tmp_path / "e.cf32")]) == 5
    assert main(["gen", "--spec", str(tmp_path / "missing.json"), "--out", str(tmp_path / "m.cf32")]) == 4
    ok = _spec_file(tmp_path, "ok.json")
    assert main(["gen", "--spec", str(ok), "--out", str(tmp_path / "no" / "dir.cf32")]) == 4
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--spec"])
    assert exc.value.code == 5


# ---------------------------------------------------------------------------
# run


def test_run_high_rgr_decodes(capture, capsys, tmp_path):
    out = tmp_path / "row.csv"
    assert main(["run", "--capture", str(capture), "--method", "b2lora", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "method b2lora" in text
    rows = _rows(out.read_text())
    assert out.read_text().startswith(HEADER)
    assert len(rows) == 1
    r = rows[0]
    assert float(r["ser"]) == 0.0 and float(r["prr"]) == 1.0
    assert int(r["n_combined"]) == 8 and r["seed"] == "1"


def test_run_exit_codes(capture, noise_capture, tmp_path):
    assert main(["run", "--capture", str(noise_capture)]) == 2
    assert main(["run", "--capture", str(tmp_path / "nothing.cf32")]) == 4
    broken = tmp_path / "broken.cf32"
    shutil.copy(capture, broken)
    with open(broken, "r+b") as f:
        f.truncate(8 * 1000)
    shutil.copy(capture.with_suffix(".manifest"), broken.with_suffix(".manifest"))
    assert main(["run", "--capture", str(broken)]) == 4
    with pytest.raises(SystemExit) as exc:
        main(["run", "--capture", str(capture), "--method", "xcopy"])
    assert exc.value.code == 5


def test_run_row_matches_sweep_row(capture, tmp_path, capsys):
    # every row carries its config hash and seed, so it can be re-run alone
    spec = _spec_file(tmp_path, methods=["b2lora"])
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--spec", str(spec), "--out", str(out)]) == 0
    swept = _rows(out.read_text())[0]
    capsys.readouterr()
    assert main(["run", "--capture", str(capture), "--method", "b2lora"]) == 0
    ran = _rows(capsys.readouterr().out.split("\n", 2)[2])[0]
    for k in ("method", "rgr_db", "ser", "prr", "detected", "n_combined", "seed", "config_hash"):
        assert ran[k] == swept[k], k


def test_console_script_runs(capture):
    exe = shutil.which("leocombine")
    if exe is None:
        pytest.skip("console script not installed")
    res = subprocess.run([exe, "run", "--capture", str(capture), "--method", "lora-baseline"],
                         capture_output=True, text=True, timeout=300)
    assert res.returncode == 0, res.stderr
    assert HEADER in res.stdout


# ---------------------------------------------------------------------------
# inspect


def test_inspect_writes_heatmap_and_peaks(capture, tmp_path):
    d = tmp_path / "insp"
    assert main(["inspect", "--capture", str(capture), "--out", str(d)]) == 0
    heat = list(csv.reader(open(d / "heatmap.csv")))
    assert len(heat) - 1 == 8
    peaks = list(csv.reader(open(d / "peaks.csv")))
    assert peaks[0] == ["time_s", "peak_mag", "peak_freq_hz"]
    d2 = tmp_path / "insp2"
    assert main(["inspect", "--capture", str(capture), "--out", str(d2), "--stride", "128"]) == 0
    peaks2 = list(csv.reader(open(d2 / "peaks.csv")))
    assert abs((len(peaks2) - 1) - 2 * (len(peaks) - 1)) <= 1


def test_inspect_noise_only_is_no_detection(noise_capture, tmp_path):
    assert main(["inspect", "--capture", str(noise_capture), "--out", str(tmp_path / "n")]) == 2
    assert (tmp_path / "n" / "heatmap.csv").exists()


# ---------------------------------------------------------------------------
# sweep


def test_sweep_csv_summary_and_determinism(tmp_path):
    spec = _spec_file(tmp_path, rgr_sweep_db=[-10, -40], seeds=[1, 2])
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["sweep", "--spec", str(spec), "--out", str(a)]) == 0
    assert main(["sweep", "--spec", str(spec), "--out", str(b), "--jobs", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()
    text = a.read_text()
    assert text.splitlines()[0] == HEADER + ",error"
    rows = _rows(text)
    # methods x rgr x seeds, in spec order
    assert [(r["rgr_db"], r["seed"], r["method"]) for r in rows] == [
        (g, s, m) for g in ("-10", "-40") for s in ("1", "2") for m in ("b2lora", "lora-baseline")]
    # hopeless cells are recorded and the sweep goes on
    lost = [r for r in rows if r["rgr_db"] == "-40"]
    assert all(r["error"] == "no-detection" and float(r["ser"]) == 1.0 for r in lost)
    summ = json.loads((tmp_path / "a.summary.json").read_text())
    th = {t["method"]: t for t in summ["thresholds"]}
    assert th["b2lora"]["decoding_threshold_db"] == -10


def test_thresholds_need_every_higher_rgr():
    def row(rgr, ser, prr=1.0):
        return bench.MetricsRow("m", rgr, 90, 1, ser, prr, 1, None, 0, "h")
    rows = [row(0, 0.0), row(-5, 0.0), row(-10, 0.5, 0.4), row(-15, 0.0, 0.6)]
    (t,) = bench.thresholds(rows)
    assert t["decoding_threshold_db"] == -5
    assert t["detection_threshold_db"] == -5
    (t,) = bench.thresholds([row(0, 0.2)])
    assert t["decoding_threshold_db"] is None


def test_metrics_row_validates():
    with pytest.raises(DomainError):
        bench.MetricsRow("m", 0, 90, 1, 1.5, 0.0, 0, None, 0, "h")


def test_spec_validation():
    rec = dict(SPEC)
    with pytest.raises(DomainError):
        bench.ExperimentSpec.from_record({**rec, "rgr_sweep_db": []})
    with pytest.raises(DomainError):
        bench.ExperimentSpec.from_record({**rec, "methods": []})
    with pytest.raises(DomainError):
        bench.ExperimentSpec.from_record({**rec, "colour": "red"})
    with pytest.raises(DomainError):
        bench.ExperimentSpec.from_record({**rec, "vary": {"gain": [1]}})
    s = bench.ExperimentSpec.from_record(rec)
    assert bench.ExperimentSpec.from_record(s.to_record()) == s


def test_config_hash_tracks_config_not_sweep_axes():
    s = bench.ExperimentSpec.from_record(SPEC)
    s2 = bench.ExperimentSpec.from_record({**SPEC, "rgr_sweep_db": [-3], "seeds": [9]})
    assert bench.config_hash(s.config, s) == bench.config_hash(s2.config, s2)
    s3 = bench.ExperimentSpec.from_record({**SPEC, "config": {"sf": 10}})
    assert bench.config_hash(s3.config, s3) != bench.config_hash(s.config, s)


# ---------------------------------------------------------------------------
# method behaviour


def test_baseline_embedding():
    s = bench.ExperimentSpec.from_record({**SPEC, "rgr_sweep_db": [-16]})
    pc = bench.synthesize(s, s.config, -16, 1)
    kw = dict(payload=pc.payload, n_transmissions=8)
    base = bench.run_method(pc.capture, s.config, 2.5, "lora-baseline", **kw)
    emb = bench.run_method(pc.capture, s.config, 2.5, "b2lora", max_packets=1, block_chirps=1.0, **kw)
    h = bench.config_hash(s.config, s)
    a = bench.row_for("x", -16, 1, s.pass_, h, base)
    b = bench.row_for("x", -16, 1, s.pass_, h, emb)
    assert a.to_csv_fields() == b.to_csv_fields()
    assert np.array_equal(base.decoded, emb.decoded)


def test_sf_sweep_lowers_ser():
    s = bench.ExperimentSpec.from_record({
        "config": {"sf": 9},
        "pass": {"max_elevation_deg": 90, "tau_s": 2, "n_transmissions": 8, "pass_duration_s": 16},
        "rgr_sweep_db": [-18], "seeds": [0, 1], "methods": ["lora-baseline"], "vary": {"sf": [9, 12]}})
    rows = bench.sweep(s)
    by_sf = {}
    for r, c in zip(rows, [c for c in s.configs() for _ in range(2)]):
        by_sf.setdefault(c.sf, []).append(r.ser)
    assert np.mean(by_sf[12]) < np.mean(by_sf[9])


def test_pl_sweep_raises_prr():
    s = bench.ExperimentSpec.from_record({
        **SPEC, "pass": {"max_elevation_deg": 90, "tau_s": 5, "n_transmissions": 8, "pass_duration_s": 40},
        "rgr_sweep_db": [-27], "seeds": [0, 1], "methods": ["b2lora"], "vary": {"pl": [8, 20]}})
    rows = bench.sweep(s)
    prr8 = np.mean([r.prr for r in rows[:2]])
    prr20 = np.mean([r.prr for r in rows[2:]])
    assert prr20 > prr8


def test_cr_sweep_changes_nothing_measurable():
    s = bench.ExperimentSpec.from_record({
        **SPEC, "rgr_sweep_db": [-20], "seeds": [0], "methods": ["lora-baseline"], "vary": {"cr": [1, 4]}})
    rows = bench.sweep(s)
    assert rows[0].config_hash != rows[1].config_hash
    assert abs(rows[0].ser - rows[1].ser) < 0.02


DESK = {
    "config": {"sf": 11},
    "pass": {"max_elevation_deg": 90, "tau_s": 30, "n_transmissions": 8, "pass_duration_s": 240},
    "rgr_sweep_db": [-25], "seeds": [3],
    "methods": ["b2lora", "combine-no-freq-align", "lora-baseline"],
}


@pytest.fixture(scope="module")
def desk_rows():
    rows = bench.sweep(bench.ExperimentSpec.from_record(DESK))
    return {r.method: r for r in rows}


def test_weak_pass_baseline_fails_where_b2lora_decodes(desk_rows):
    # directional: the single-packet receiver gets nothing, combining keeps SER near or below one half
    assert desk_rows["lora-baseline"].ser >= 0.9
    assert desk_rows["b2lora"].ser <= 0.65


def test_no_freq_align_is_worse_on_high_doppler_pass(desk_rows):
    assert desk_rows["combine-no-freq-align"].ser > desk_rows["b2lora"].ser
