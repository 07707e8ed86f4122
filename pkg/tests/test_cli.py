import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from fxslv.cli import main


def write_config(path, **sections):
    path.write_text(yaml.safe_dump(sections), encoding="utf-8")
    return path


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def market_section(folder):
    return {"spot": 1.0, "quotes": str(folder / "quotes.csv"), "dom_curve": str(folder / "dom_curve.csv"),
            "fgn_curve": str(folder / "fgn_curve.csv")}


@pytest.fixture(scope="module")
def flat_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("flat")
    cfg = write_config(root / "gen.yaml", synthetic={"kind": "flat", "vol": 0.2, "horizon": 1.0})
    assert main(["gen-market", "--config", str(cfg), "--out", str(root / "market")]) == 0
    return root


@pytest.fixture(scope="module")
def smiled_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("smiled")
    cfg = write_config(root / "gen.yaml", synthetic={"kind": "smiled", "horizon": 0.5})
    assert main(["gen-market", "--config", str(cfg), "--out", str(root / "market")]) == 0
    return root


LV_GRID = {"slice_spacing": 0.1, "n_strikes": 21, "stdev_span": 2.0}


def lv_config(root, sigma=0.0, paths=2000, horizon=0.5, **extra):
    return write_config(
        root / "lv.yaml", market=market_section(root / "market"), horizon=horizon, lv_grid=LV_GRID,
        rates={"dom": {"a": 0.03, "sigma": sigma}, "fgn": {"a": 0.03, "sigma": sigma}},
        correlation={"S_d": 0.166, "S_f": 0.551, "d_f": 0.3}, mc={"paths": paths, "max_dt": 0.02, "seed": 7},
        **extra)


def test_gen_market_outputs(flat_dir, capsys):
    names = sorted(p.name for p in (flat_dir / "market").iterdir())
    assert names == ["dom_curve.csv", "fgn_curve.csv", "manifest.json", "quotes.csv"]


def test_lv2sr_flat_market_and_determinism(flat_dir, capsys):
    cfg = lv_config(flat_dir)
    assert main(["calibrate-lv2sr", "--config", str(cfg), "--out", str(flat_dir / "a")]) == 0
    assert "local vol" in capsys.readouterr().out
    vals = np.array([float(r["sigma_lv"]) for r in read_csv(flat_dir / "a" / "local_vol.csv")])
    assert vals.min() >= 0.199 and vals.max() <= 0.201
    assert main(["calibrate-lv2sr", "--config", str(cfg), "--out", str(flat_dir / "b")]) == 0
    assert (flat_dir / "a" / "local_vol.csv").read_bytes() == (flat_dir / "b" / "local_vol.csv").read_bytes()
    manifest = json.loads((flat_dir / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["outputs"] == ["local_vol.csv"]
    assert len(manifest["config_hash"]) == 64 and manifest["inputs"]
    assert main(["calibrate-lv2sr", "--config", str(flat_dir / "a" / "manifest.json"),
                 "--out", str(flat_dir / "c")]) == 0
    assert (flat_dir / "a" / "local_vol.csv").read_bytes() == (flat_dir / "c" / "local_vol.csv").read_bytes()


def test_overrides_change_manifest(flat_dir):
    cfg = lv_config(flat_dir)
    assert main(["calibrate-lv2sr", "--config", str(cfg), "--out", str(flat_dir / "o"), "--seed", "11",
                 "--paths", "500", "--threads", "2"]) == 0
    manifest = json.loads((flat_dir / "o" / "manifest.json").read_text())
    assert manifest["seed"] == 11 and manifest["config"]["mc"]["paths"] == 500


def test_missing_quotes_leaves_nothing(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.yaml", market={"spot": 1.0, "quotes": "nope.csv", "dom_curve": "x.csv",
                                                      "fgn_curve": "y.csv"}, horizon=1.0,
                       rates={"dom": {"a": 0.03, "sigma": 0.01}, "fgn": {"a": 0.03, "sigma": 0.01}})
    assert main(["calibrate-lv2sr", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 2
    assert "not found" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()
    assert not list(tmp_path.glob(".staging-*"))


def test_bad_numeric_field(flat_dir, capsys):
    cfg = lv_config(flat_dir, horizon="soon")
    assert main(["calibrate-lv2sr", "--config", str(cfg), "--out", str(flat_dir / "bad")]) == 2
    assert "horizon" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["price", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path / "o")]) == 2


def test_no_real_local_vol_exit_code(tmp_path, capsys):
    gen = write_config(tmp_path / "gen.yaml", synthetic={"kind": "flat", "vol": 0.05, "horizon": 1.0})
    assert main(["gen-market", "--config", str(gen), "--out", str(tmp_path / "market")]) == 0
    cfg = write_config(
        tmp_path / "lv.yaml", market=market_section(tmp_path / "market"), horizon=1.0, lv_grid=LV_GRID,
        rates={"dom": {"a": 0.03, "sigma": 0.05}, "fgn": {"a": 0.03, "sigma": 0.05}},
        correlation={"S_d": 0.2, "S_f": -0.2, "d_f": -0.8}, mc={"paths": 2000, "max_dt": 0.02, "seed": 1})
    assert main(["calibrate-lv2sr", "--config", str(cfg), "--out", str(tmp_path / "lv")]) == 3
    err = capsys.readouterr().err
    assert "no real local volatility at K=" in err and "T=" in err
    assert not (tmp_path / "lv").exists()


def test_full_pipeline(smiled_dir, capsys):
    root = smiled_dir
    market = market_section(root / "market")
    common = {"market": market, "horizon": 0.5, "lv_grid": LV_GRID,
              "rates": {"dom": {"a": 0.03, "sigma": 0.006}, "fgn": {"a": 0.03, "sigma": 0.004}},
              "correlation": {"S_d": 0.166, "S_f": 0.551, "d_f": 0.3},
              "mc": {"paths": 2000, "max_dt": 0.02, "seed": 3}}
    cfg = write_config(root / "lv.yaml", **common)
    assert main(["calibrate-lv2sr", "--config", str(cfg), "--out", str(root / "lv")]) == 0

    cfg = write_config(root / "h.yaml", market=market,
                       heston_calibration={"times": [0.25, 0.5], "max_iter": 200, "restarts": 0})
    assert main(["calibrate-heston", "--config", str(cfg), "--out", str(root / "heston")]) == 0
    params = read_csv(root / "heston" / "heston.csv")
    assert len(params) == 2
    assert all(2 * float(r["kappa"]) * float(r["theta"]) > float(r["xi"]) ** 2 for r in params)

    heston = {"file": str(root / "heston" / "heston.csv")}
    cfg = write_config(root / "dr.yaml", heston=heston, estimator={"kind": "binning", "bins": 10}, **common)
    assert main(["calibrate-slv2dr", "--config", str(cfg), "--out", str(root / "dr")]) == 0
    inputs = {"local_vol": str(root / "lv" / "local_vol.csv"),
              "local_vol_det": str(root / "dr" / "local_vol_det.csv"),
              "leverage_slv2dr": str(root / "dr" / "leverage.csv")}
    cfg = write_config(root / "sr.yaml", heston=heston, inputs=inputs, **common)
    assert main(["calibrate-slv2sr", "--config", str(cfg), "--out", str(root / "sr")]) == 0
    inputs["leverage_slv2sr"] = str(root / "sr" / "leverage.csv")
    lev_dr = read_csv(root / "dr" / "leverage.csv")
    lv_rows = read_csv(root / "lv" / "local_vol.csv")
    assert len(read_csv(root / "sr" / "leverage.csv")) == len(lev_dr) == len(lv_rows) + LV_GRID["n_strikes"]

    pricing = {"models": ["lv2dr", "lv2sr", "slv2dr", "slv2sr", "heston"], "maturities": [0.5],
               "stdevs": [-1.0, 0.0, 1.0]}
    cfg = write_config(root / "p.yaml", heston=heston, inputs=inputs, pricing=pricing, **common)
    assert main(["price", "--config", str(cfg), "--out", str(root / "p")]) == 0
    rows = read_csv(root / "p" / "prices.csv")
    assert len(rows) == 15 and {r["model"] for r in rows} == {"LV2DR", "LV2SR", "SLV2DR", "SLV2SR", "HESTON"}

    report = {"model": "lv2sr", "maturities": [0.3, 0.5], "stdevs": [-1.0, 0.0, 1.0]}
    cfg = write_config(root / "r.yaml", inputs=inputs, report=report, **common)
    assert main(["report", "--config", str(cfg), "--out", str(root / "r")]) == 0
    assert "max |diff|/SE" in capsys.readouterr().out
    rows = read_csv(root / "r" / "report.csv")
    assert list(rows[0]) == ["t", "K", "mc_price", "mc_se", "bs_price", "diff", "iv_mc", "iv_lo", "iv_hi"]
    assert len(rows) == 6

    barrier = {"kind": "barrier", "maturity": 0.5, "barrier": 1.1}
    cfg = write_config(root / "b.yaml", heston=heston, inputs=inputs, report=barrier, **common)
    assert main(["report", "--config", str(cfg), "--out", str(root / "b")]) == 0
    rows = read_csv(root / "b" / "barrier.csv")
    assert [r["model"] for r in rows] == ["Analytical (BS)", "LV2DR", "LV2SR", "SLV2DR", "SLV2SR"]


def test_bs2sr_analysis(tmp_path):
    gen = write_config(tmp_path / "gen.yaml", synthetic={"kind": "flat", "vol": 0.05, "horizon": 1.0})
    assert main(["gen-market", "--config", str(gen), "--out", str(tmp_path / "market")]) == 0
    cfg = write_config(tmp_path / "bs.yaml", market=market_section(tmp_path / "market"),
                       bs2sr={"rho_df": [-0.8, 0.3], "rate_vols": [0.005, 0.05], "rho_sd": 0.2, "rho_sf": -0.2,
                              "maturities": [0.5, 1.0], "stdevs": [-1.0, 0.0, 1.0]})
    assert main(["analyze-bs2sr", "--config", str(cfg), "--out", str(tmp_path / "bs")]) == 0
    rows = read_csv(tmp_path / "bs" / "bs2sr_analysis.csv")
    assert len(rows) == 2 * 2 * 2 * 3
    def flags(rho, vol):
        return {r["calibratable"] for r in rows if (r["rho_df"], r["rate_vol"]) == (rho, vol)}

    assert flags("0.3", "0.005") == {"1"}
    assert "0" in flags("-0.8", "0.05")


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "fxslv.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in ("gen-market", "calibrate-lv2sr", "analyze-bs2sr"):
        assert name in out.stdout
