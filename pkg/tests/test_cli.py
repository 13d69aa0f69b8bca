import csv
import json
import math

import numpy as np
import pytest

from pgrefine.cli import _digest, main, manifest_path
from pgrefine.dataset import read_samples, synthetic_city
from pgrefine.geodata import save_elevation
from pgrefine.sounder import (
    CalibrationParams,
    SounderConfig,
    over_the_air_power,
    read_trace,
    reference_waveform,
    synthesize_capture,
    write_iq,
)
from pgrefine.unet import init_params, load_params

SMALL = ["--tile-px", "16", "--map-px", "44"]
NET = ["--base-width", "2", "--depth", "2", "--batch-size", "2"]


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--random-scenarios", "5", "--seed", "7", "--augment", "2", *SMALL, "--out", str(root / "ds")]) == 0
    return root / "ds"


def test_gen_is_reproducible(ds, tmp_path):
    assert main(["gen", "--random-scenarios", "5", "--seed", "7", "--augment", "2", *SMALL, "--out", str(tmp_path / "again")]) == 0
    assert _digest(tmp_path / "again") == _digest(ds)
    assert len(read_samples(ds)) == 10


def test_gen_writes_manifest(ds):
    man = json.loads(manifest_path(ds).read_text())
    assert man["command"] == "gen" and man["seed"] == 7
    assert man["arguments"]["random_scenarios"] == 5
    assert man["tool_version"] and man["started_utc"] <= man["finished_utc"]


def test_gen_from_map_and_tx_file(tmp_path):
    emap = synthetic_city(np.random.default_rng(0), size_px=40)
    save_elevation(emap, tmp_path / "city.asc")
    (tmp_path / "tx.csv").write_text("x_m,y_m\n38.0,38.0\n45.5,40.1\n")
    rc = main(["gen", "--map", str(tmp_path / "city.asc"), "--tx-file", str(tmp_path / "tx.csv"), "--augment", "100", "--tile-px", "12", "--out", str(tmp_path / "ds")])
    assert rc == 0
    samples = read_samples(tmp_path / "ds")
    assert len(samples) == 200
    assert {s.scenario_id for s in samples} == {0, 1}
    digests = json.loads(manifest_path(tmp_path / "ds").read_text())["input_digests"]
    assert set(digests) == {"map", "tx_file"}


def test_gen_missing_map_exit_2(tmp_path, capsys):
    missing = tmp_path / "nope.asc"
    rc = main(["gen", "--map", str(missing), "--tx-file", str(tmp_path / "tx.csv"), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert str(missing) in capsys.readouterr().err


def test_gen_bad_tx_file_exit_2(tmp_path, capsys):
    emap = synthetic_city(np.random.default_rng(0), size_px=40)
    save_elevation(emap, tmp_path / "city.asc")
    (tmp_path / "tx.csv").write_text("x,y\n1,2\n")
    rc = main(["gen", "--map", str(tmp_path / "city.asc"), "--tx-file", str(tmp_path / "tx.csv"), "--out", str(tmp_path / "o")])
    assert rc == 2 and "x_m,y_m" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "o")]) == 2
    assert main(["train"]) == 2
    assert main(["bogus"]) == 2
    assert main(["gen", "--random-scenarios", "1", "--threads", "0", "--out", str(tmp_path / "o")]) == 2


def test_domain_error_exit_3(ds, tmp_path, capsys):
    rc = main(["train", "--samples", str(ds), "--ratio", "0.99", "--out", str(tmp_path / "m.unet"), *NET])
    assert rc == 3
    assert "train" in capsys.readouterr().err


def test_train_zero_epochs_is_init(ds, tmp_path):
    out = tmp_path / "m.unet"
    assert main(["train", "--samples", str(ds), "--epochs", "0", "--seed", "4", "--out", str(out), *NET]) == 0
    p = load_params(out)
    ref = init_params(4, base_width=2, depth=2, tile_px=16)
    for k in ref.arrays:
        assert p.arrays[k].tobytes() == ref.arrays[k].tobytes()
    rows = list(csv.reader(out.with_name("m.unet.history.csv").open()))
    assert rows == [["epoch", "train_loss"]]


def test_train_rerun_identical_bytes(ds, tmp_path):
    args = ["train", "--samples", str(ds), "--ratio", "0.6", "--seed", "1", "--epochs", "2", *NET]
    assert main([*args, "--out", str(tmp_path / "a.unet")]) == 0
    assert main([*args, "--out", str(tmp_path / "b.unet"), "--threads", "1"]) == 0
    assert (tmp_path / "a.unet").read_bytes() == (tmp_path / "b.unet").read_bytes()


def test_commands_do_not_mutate_inputs(ds, tmp_path):
    before = _digest(ds)
    assert main(["train", "--samples", str(ds), "--epochs", "1", "--out", str(tmp_path / "m.unet"), *NET]) == 0
    model_before = _digest(tmp_path / "m.unet")
    assert main(["predict", "--model", str(tmp_path / "m.unet"), "--samples", str(ds), "--out", str(tmp_path / "p")]) == 0
    assert main(["refine", "--model", str(tmp_path / "m.unet"), "--samples", str(ds), "--holdout", "0.6", "--epochs", "1", *NET, "--out", str(tmp_path / "r")]) == 0
    assert _digest(ds) == before
    assert _digest(tmp_path / "m.unet") == model_before


@pytest.fixture(scope="module")
def model(ds, tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "m.unet"
    assert main(["train", "--samples", str(ds), "--epochs", "2", "--out", str(out), *NET]) == 0
    return out


def test_predict_time_prints_ms(ds, model, tmp_path, capsys):
    assert main(["predict", "--model", str(model), "--samples", str(ds), "--time", "--out", str(tmp_path / "p")]) == 0
    out = capsys.readouterr().out
    assert out.count(" ms") == 10
    assert len(list((tmp_path / "p").glob("*.png"))) == 10
    assert len(list((tmp_path / "p").glob("*.pgt"))) == 10


def test_predict_from_map_reports_rough_time(model, tmp_path, capsys):
    emap = synthetic_city(np.random.default_rng(1), size_px=40)
    save_elevation(emap, tmp_path / "city.asc")
    rc = main(["predict", "--model", str(model), "--map", str(tmp_path / "city.asc"), "--tx", "38.5,38.5", "--time", "--out", str(tmp_path / "p")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "predict" in out and "rough_estimate" in out
    assert (tmp_path / "p" / "tile.png").is_file()
    assert main(["predict", "--model", str(model), "--map", str(tmp_path / "city.asc"), "--tx", "oops", "--out", str(tmp_path / "q")]) == 2


def test_eval_identical_is_zero(ds, model, tmp_path):
    assert main(["predict", "--model", str(model), "--samples", str(ds), "--out", str(tmp_path / "p")]) == 0
    assert main(["eval", "--pred", str(tmp_path / "p"), "--truth", str(tmp_path / "p"), "--out", str(tmp_path / "e")]) == 0
    assert json.loads((tmp_path / "e" / "report.json").read_text())["nrmse"] == 0.0
    assert main(["eval", "--pred", str(ds), "--truth", str(ds), "--out", str(tmp_path / "e2")]) == 0
    assert json.loads((tmp_path / "e2" / "report.json").read_text())["nrmse"] == 0.0


def test_eval_model_against_samples(ds, model, tmp_path):
    assert main(["eval", "--model", str(model), "--samples", str(ds), "--out", str(tmp_path / "e")]) == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert set(rep) == {"model", "baseline", "improvement_ratio"}
    for name in ("ecdf_model.csv", "ecdf_rough.csv", "ecdf.png"):
        assert (tmp_path / "e" / name).is_file()
    assert main(["eval", "--model", str(model), "--out", str(tmp_path / "x")]) == 2


def test_eval_pred_matches_predict_truth(ds, model, tmp_path):
    assert main(["predict", "--model", str(model), "--samples", str(ds), "--out", str(tmp_path / "p")]) == 0
    assert main(["eval", "--pred", str(tmp_path / "p"), "--truth", str(ds), "--out", str(tmp_path / "e")]) == 0
    assert main(["eval", "--model", str(model), "--samples", str(ds), "--out", str(tmp_path / "e2")]) == 0
    a = json.loads((tmp_path / "e" / "report.json").read_text())
    b = json.loads((tmp_path / "e2" / "report.json").read_text())["model"]
    # heatmaps are stored as float32, so agreement is to storage precision
    assert a["nrmse"] == pytest.approx(b["nrmse"], rel=1e-4)
    assert a["n_pixels"] == b["n_pixels"]


def test_sweep_csv(ds, tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--samples", str(ds), "--ratios", "0.05,0.6", "--repeats", "1", "--epochs", "1", *NET, "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["ratio"] for r in rows] == ["0.05", "0.6"]
    assert rows[0]["skipped"] == "1" and rows[1]["skipped"] == "0"
    assert main(["sweep", "--samples", str(ds), "--ratios", "a,b", "--out", str(out)]) == 2


def test_refine_outputs(ds, model, tmp_path):
    assert main(["refine", "--model", str(model), "--samples", str(ds), "--holdout", "0.6", "--epochs", "1", *NET, "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    assert rep["before"]["n_pixels"] == rep["after"]["n_pixels"]
    assert load_params(tmp_path / "r" / "refined.unet").meta["training_epochs"] == 3


N = 16383
CHIP_RATE = 3 * N
FS = 4 * N


def test_sound_round_trip(tmp_path):
    cal = CalibrationParams(p_tx_dbm=0.0, g_amp_db=38.0, g_ant_db=16.0, l_cable_db=2.0, l_att_db=60.0, p_rx_otc_dbm=-24.0)
    (tmp_path / "cal.json").write_text(json.dumps(cal.__dict__))
    ref = reference_waveform(SounderConfig(chip_rate_hz=CHIP_RATE, calibration=cal), FS)
    pg = -104.0
    p_total = 10 ** (over_the_air_power(pg, cal) / 10)
    w = np.array([1.0, 0.4, 0.1])
    taps = [(d, math.sqrt(p_total * wi / w.sum()) * np.exp(1j * ph)) for d, wi, ph in zip([20, 70, 210], w, [0.1, 2.0, -1.0])]
    iq = synthesize_capture(ref, [taps] * 3, FS, snr_db=20, rng=np.random.default_rng(5))
    write_iq(tmp_path / "cap.bin", iq, FS, 910e6, 500.0)
    (tmp_path / "log.csv").write_text("t_unix_s,lat_deg,lon_deg\n500,1,1\n501,1,2\n502,1,3\n")
    rc = main([
        "sound", "--iq", str(tmp_path / "cap.bin"), "--gps", str(tmp_path / "log.csv"), "--cal", str(tmp_path / "cal.json"),
        "--chip-rate", str(CHIP_RATE), "--window", "3", "--out", str(tmp_path / "trace.csv"),
    ])
    assert rc == 0
    trace = read_trace(tmp_path / "trace.csv")
    assert len(trace) == 3
    np.testing.assert_allclose(trace.pg_db, pg, atol=0.5)
    digests = json.loads(manifest_path(tmp_path / "trace.csv").read_text())["input_digests"]
    assert set(digests) == {"iq", "gps", "cal"}


def test_sound_noise_only_exit_3(tmp_path, capsys):
    ref = reference_waveform(SounderConfig(chip_rate_hz=CHIP_RATE), FS)
    iq = synthesize_capture(ref, [[]], FS, snr_db=0, rng=np.random.default_rng(0))
    write_iq(tmp_path / "n.bin", iq, FS, 910e6, 0.0)
    (tmp_path / "log.csv").write_text("t_unix_s,lat_deg,lon_deg\n0,0,0\n")
    rc = main(["sound", "--iq", str(tmp_path / "n.bin"), "--gps", str(tmp_path / "log.csv"), "--chip-rate", str(CHIP_RATE), "--out", str(tmp_path / "t.csv")])
    assert rc == 3
    assert "no usable seconds" in capsys.readouterr().err
