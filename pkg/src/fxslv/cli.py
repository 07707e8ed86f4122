"""Batch front end: YAML config in, CSV surfaces and reports plus a JSON manifest out."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .analytic import Bs2srSpec, bs2sr_min_tiv, bs_barrier_up_out
from .dupire import LvGridSpec, NoRealLocalVol, calibrate_lv2sr, deterministic_lv_surface
from .engine import CorrelationSpec, McConfig, ModelSpec, Variant
from .heston import HestonParams, SimplexConfig, calibrate_heston, quotes_from_surface
from .leverage import EstimatorSpec, calibrate_leverage_slv2dr, calibrate_leverage_slv2sr
from .marketdata import (TivGridSpec, build_tiv_surface, read_curve_csv, read_quotes_csv,
                         write_curve_csv, write_quotes_csv)
from .pricing import Monitoring, price_barrier_uo_mc, price_vanilla_mc, reprice_report
from .rates import G1ppParams
from .surfaces import SliceSurface, SurfaceKind
from .synthetic import flat_market, skewed_market, ssvi_market

EXIT_CONFIG = 2
EXIT_NO_LOCAL_VOL = 3


class ConfigError(Exception):
    pass


class Run:
    """Resolved config plus a staging directory; outputs appear only on success."""

    def __init__(self, config: dict, base: Path, out: Path, command: str):
        self.config = config
        self.base = base
        self.out = out
        self.command = command
        self.timings = {}
        self.inputs = {}
        self.stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=_ensure_parent(out)))
        self.files = []

    def section(self, name, required=True):
        val = self.config.get(name)
        if val is None:
            if required:
                raise ConfigError(f"config is missing the '{name}' section")
            return {}
        if not isinstance(val, dict):
            raise ConfigError(f"config section '{name}' must be a mapping")
        return val

    def path(self, value, what):
        if value is None:
            raise ConfigError(f"no path given for {what}")
        p = Path(value)
        p = p if p.is_absolute() else self.base / p
        if not p.is_file():
            raise ConfigError(f"{what} file not found: {p}")
        self.inputs[str(value)] = hashlib.sha256(p.read_bytes()).hexdigest()
        return p

    def target(self, name):
        self.files.append(name)
        return self.stage / name

    def timed(self, label, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            self.timings[label] = round(time.perf_counter() - t0, 6)

    def commit(self):
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "base_dir": str(self.base),
            "seed": self.config.get("mc", {}).get("seed"),
            "inputs": self.inputs,
            "outputs": sorted(self.files),
            "timings_s": self.timings,
        }
        with (self.stage / "manifest.json").open("w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
        self.out.mkdir(parents=True, exist_ok=True)
        for name in self.files + ["manifest.json"]:
            (self.stage / name).replace(self.out / name)
        self.discard()

    def discard(self):
        shutil.rmtree(self.stage, ignore_errors=True)


def _ensure_parent(out: Path):
    parent = out.resolve().parent
    parent.mkdir(parents=True, exist_ok=True)
    return parent


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=_jsonable).encode()
    return hashlib.sha256(blob).hexdigest()


# --- config readers ---------------------------------------------------------

def _num(section, key, default=None, positive=False, kind=float):
    val = section.get(key, default)
    if val is None:
        raise ConfigError(f"missing numeric field '{key}'")
    try:
        val = kind(val)
    except (TypeError, ValueError):
        raise ConfigError(f"field '{key}' must be numeric, got {val!r}") from None
    if positive and val <= 0:
        raise ConfigError(f"field '{key}' must be positive")
    return val


def load_market(run: Run):
    m = run.section("market")
    spot = _num(m, "spot", positive=True)
    dom = read_curve_csv(run.path(m.get("dom_curve"), "domestic curve"))
    fgn = read_curve_csv(run.path(m.get("fgn_curve"), "foreign curve"))
    quotes = read_quotes_csv(run.path(m.get("quotes"), "quotes"))
    g = run.section("tiv_grid", required=False)
    grid = TivGridSpec(_num(g, "slice_spacing", 0.05, True), _num(g, "n_points", 100, True, int),
                       _num(g, "stdev_span", 3.5, True))
    tiv = run.timed("tiv_surface", build_tiv_surface, quotes, dom, fgn, spot, grid)
    return spot, dom, fgn, tiv


def load_rates(run: Run, dom_curve, fgn_curve, zero=False):
    r = run.section("rates", required=not zero)
    out = []
    for name, curve in (("dom", dom_curve), ("fgn", fgn_curve)):
        spec = r.get(name, {}) if not zero else {}
        starts = np.atleast_1d(np.asarray(spec.get("starts", [0.0]), dtype=float))
        a = np.atleast_1d(np.asarray(spec.get("a", 0.0), dtype=float))
        sigma = np.atleast_1d(np.asarray(spec.get("sigma", 0.0), dtype=float))
        try:
            out.append(G1ppParams(starts, a, sigma, curve))
        except ValueError as exc:
            raise ConfigError(f"rates.{name}: {exc}") from None
    return tuple(out)


def load_corr(run: Run):
    c = run.section("correlation", required=False)
    try:
        return CorrelationSpec({str(k): float(v) for k, v in c.items()})
    except ValueError as exc:
        raise ConfigError(f"correlation: {exc}") from None


def load_mc(run: Run, args):
    m = run.section("mc", required=False)
    return McConfig(_num(m, "paths", 10000, True, int), _num(m, "max_dt", 0.01, True),
                    _num(m, "seed", 0, kind=int), (), args.threads or 1)


def load_lv_grid(run: Run):
    g = run.section("lv_grid", required=False)
    return LvGridSpec(_num(g, "slice_spacing", 0.05, True), _num(g, "n_strikes", 200, True, int),
                      _num(g, "stdev_span", 3.0, True))


def load_heston(run: Run):
    h = run.section("heston")
    if "file" in h:
        return read_heston_csv(run.path(h["file"], "Heston parameters"))
    try:
        return HestonParams.constant(_num(h, "v0"), _num(h, "rho"), _num(h, "kappa"), _num(h, "theta"),
                                     _num(h, "xi"), _num(h, "horizon", run.config.get("horizon", 1.0)))
    except ValueError as exc:
        raise ConfigError(f"heston: {exc}") from None


def load_surface(run: Run, key, kind):
    inputs = run.section("inputs")
    try:
        return SliceSurface.from_csv(run.path(inputs.get(key), f"inputs.{key}"), kind)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def write_heston_csv(path, params: HestonParams):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "kappa", "theta", "xi", "v0", "rho"])
        for row in zip(params.times, params.kappa, params.theta, params.xi):
            w.writerow([repr(float(x)) for x in row] + [repr(float(params.v0)), repr(float(params.rho))])


def read_heston_csv(path) -> HestonParams:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path}: no Heston rows")
    col = {k: np.array([float(r[k]) for r in rows]) for k in ("t", "kappa", "theta", "xi", "v0", "rho")}
    return HestonParams(float(col["v0"][0]), float(col["rho"][0]), col["t"], col["kappa"], col["theta"], col["xi"])


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


# --- commands -----------------------------------------------------------------

def cmd_gen_market(run: Run, args):
    m = run.section("synthetic")
    kind = m.get("kind", "smiled")
    params = {k: v for k, v in m.items() if k != "kind"}
    makers = {"flat": flat_market, "skewed": skewed_market, "smiled": ssvi_market}
    if kind not in makers:
        raise ConfigError(f"synthetic.kind must be one of {sorted(makers)}")
    try:
        mk = makers[kind](**params)
    except TypeError as exc:
        raise ConfigError(f"synthetic: {exc}") from None
    write_quotes_csv(run.target("quotes.csv"), mk.quotes)
    write_curve_csv(run.target("dom_curve.csv"), mk.dom)
    write_curve_csv(run.target("fgn_curve.csv"), mk.fgn)
    return f"{kind} market: {len(mk.quotes.expiries)} expiries, spot {mk.spot}"


def cmd_calibrate_lv2sr(run: Run, args):
    spot, dom_c, fgn_c, tiv = load_market(run)
    dom, fgn = load_rates(run, dom_c, fgn_c)
    horizon = _num(run.config, "horizon", positive=True)
    res = run.timed("calibration", calibrate_lv2sr, tiv, dom, fgn, load_corr(run), load_mc(run, args),
                    horizon, load_lv_grid(run))
    res.surface.to_csv(run.target("local_vol.csv"))
    vals = np.concatenate(res.surface.values)
    return f"local vol: {len(res.surface)} slices, range [{vals.min():.6f}, {vals.max():.6f}], " \
           f"flagged points {sum(res.flagged)}"


def cmd_calibrate_heston(run: Run, args):
    spot, dom_c, fgn_c, tiv = load_market(run)
    h = run.section("heston_calibration")
    times = [float(t) for t in h.get("times", [])]
    if not times:
        raise ConfigError("heston_calibration.times must list the slice times")
    quotes = quotes_from_surface(tiv, times, _num(h, "n_strikes", 7, True, int), _num(h, "stdev_span", 1.0, True))
    cfg = SimplexConfig(max_iter=_num(h, "max_iter", 2000, True, int), penalty=_num(h, "penalty", 1e3, True))
    fit = run.timed("calibration", calibrate_heston, quotes, cfg, _num(h, "restarts", 2, kind=int))
    write_heston_csv(run.target("heston.csv"), fit.params)
    _write_rows(run.target("heston_fit.csv"), ["t", "objective", "feller_projected"],
                [(float(t), float(e), int(p)) for t, e, p in zip(times, fit.slice_errors, fit.feller_projected)])
    return f"heston: v0={fit.params.v0:.6g} rho={fit.params.rho:.4f}, worst slice objective {max(fit.slice_errors):.3e}"


def _estimator(run: Run):
    e = run.section("estimator", required=False)
    try:
        return EstimatorSpec(e.get("kind", "regression"), _num(e, "bins", 20, True, int), _num(e, "degree", 2, True, int))
    except ValueError as exc:
        raise ConfigError(f"estimator: {exc}") from None


def cmd_calibrate_slv2dr(run: Run, args):
    spot, dom_c, fgn_c, tiv = load_market(run)
    horizon = _num(run.config, "horizon", positive=True)
    lv = run.timed("local_vol", deterministic_lv_surface, tiv, horizon, load_lv_grid(run)).surface
    res = run.timed("calibration", calibrate_leverage_slv2dr, lv, load_heston(run), dom_c, fgn_c, spot,
                    load_mc(run, args), _estimator(run))
    lv.to_csv(run.target("local_vol_det.csv"))
    res.surface.to_csv(run.target("leverage.csv"))
    return f"leverage: {len(res.surface)} slices, floored points {sum(res.floored)}"


def cmd_calibrate_slv2sr(run: Run, args):
    spot, dom_c, fgn_c, tiv = load_market(run)
    dom, fgn = load_rates(run, dom_c, fgn_c)
    lv = load_surface(run, "local_vol", SurfaceKind.LOCAL_VOL)
    degree = _estimator(run).degree
    res = run.timed("calibration", calibrate_leverage_slv2sr, lv, load_heston(run), dom, fgn, load_corr(run),
                    spot, load_mc(run, args), degree)
    res.surface.to_csv(run.target("leverage.csv"))
    return f"leverage: {len(res.surface)} slices, floored points {sum(res.floored)}"


def _model_factory(run: Run, name, spot, dom_c, fgn_c, tiv):
    """``T -> ModelSpec`` for one of the supported model names."""
    name = name.lower()
    corr = load_corr(run)
    if name == "lv2dr":
        lv = load_surface(run, "local_vol_det", SurfaceKind.LOCAL_VOL)
        return lambda T: ModelSpec(Variant.LV2SR_TFWD, spot, dom_c, fgn_c, surface=lv, horizon=T)
    if name == "lv2sr":
        dom, fgn = load_rates(run, dom_c, fgn_c)
        lv = load_surface(run, "local_vol", SurfaceKind.LOCAL_VOL)
        return lambda T: ModelSpec(Variant.LV2SR_TFWD, spot, dom_c, fgn_c, dom, fgn, surface=lv, corr=corr, horizon=T)
    if name == "slv2dr":
        lev = load_surface(run, "leverage_slv2dr", SurfaceKind.LEVERAGE)
        hp = load_heston(run)
        return lambda T: ModelSpec(Variant.SLV2DR_DRN, spot, dom_c, fgn_c, heston=hp, surface=lev)
    if name == "slv2sr":
        dom, fgn = load_rates(run, dom_c, fgn_c)
        lev = load_surface(run, "leverage_slv2sr", SurfaceKind.LEVERAGE)
        hp = load_heston(run)
        return lambda T: ModelSpec(Variant.SLV2SR_TFWD, spot, dom_c, fgn_c, dom, fgn, heston=hp, surface=lev,
                                   corr=corr, horizon=T)
    if name == "heston":
        hp = load_heston(run)
        return lambda T: ModelSpec(Variant.HESTON_DRN, spot, dom_c, fgn_c, heston=hp)
    if name == "bs2sr":
        dom, fgn = load_rates(run, dom_c, fgn_c)
        vol = _num(run.section("pricing"), "flat_vol", positive=True)
        return lambda T: ModelSpec(Variant.BS2SR_TFWD, spot, dom_c, fgn_c, dom, fgn, flat_vol=vol, corr=corr, horizon=T)
    raise ConfigError(f"unknown model {name!r}")


def _strike_grid(p, tiv):
    grid = {}
    for T in [float(t) for t in p.get("maturities", [])]:
        if "strikes" in p:
            grid[T] = np.asarray(p["strikes"], dtype=float)
        else:
            stdevs = np.asarray(p.get("stdevs", np.linspace(-2.0, 2.0, 9)), dtype=float)
            grid[T] = float(tiv.forward(T)) * np.exp(stdevs * float(tiv.atm_vol(T)) * np.sqrt(T))
    if not grid:
        raise ConfigError("pricing.maturities must list at least one maturity")
    return grid


def _model_label(name):
    return name.upper()


def cmd_price(run: Run, args):
    spot, dom_c, fgn_c, tiv = load_market(run)
    p = run.section("pricing")
    cfg = load_mc(run, args)
    grid = _strike_grid(p, tiv)
    models = p.get("models") or [p.get("model", "lv2sr")]
    barrier = p.get("barrier")
    monitoring = Monitoring(str(p.get("monitoring", "BRIDGE")).upper())
    rows = []
    for name in models:
        make = _model_factory(run, name, spot, dom_c, fgn_c, tiv)
        for T, K in grid.items():
            model = make(T)
            if barrier is None:
                est = run.timed(f"{name}_T{T}", price_vanilla_mc, model, K, T, cfg)
                level = ""
            else:
                level = float(barrier) * float(tiv.forward(T)) if p.get("barrier_relative", True) else float(barrier)
                est = run.timed(f"{name}_T{T}", price_barrier_uo_mc, model, K, level, T, cfg, monitoring)
            for k, pr, se in zip(K, est.price, est.se):
                rows.append((_model_label(name), float(T), float(k), level, float(pr), float(se), est.convention))
    _write_rows(run.target("prices.csv"), ["model", "t", "K", "barrier", "price", "se", "convention"], rows)
    return f"priced {len(rows)} options"


def _vanilla_report(run: Run, args, spot, dom_c, fgn_c, tiv, p):
    name = p.get("model", "lv2sr")
    make = _model_factory(run, name, spot, dom_c, fgn_c, tiv)
    rows = run.timed("report", reprice_report, make, _strike_grid(p, tiv), load_mc(run, args), tiv)
    cols = ["t", "K", "mc_price", "mc_se", "bs_price", "diff", "iv_mc", "iv_lo", "iv_hi"]
    _write_rows(run.target("report.csv"), cols, [[r[c] for c in cols] for r in rows])
    z = max(abs(r["diff"]) / r["mc_se"] if r["mc_se"] > 0 else (0.0 if r["diff"] == 0 else np.inf) for r in rows)
    return f"{_model_label(name)} report: {len(rows)} points, max |diff|/SE = {z:.2f}"


def _barrier_report(run: Run, args, spot, dom_c, fgn_c, tiv, p):
    T = _num(p, "maturity", 5.0, True)
    fwd = float(tiv.forward(T))
    K = float(p.get("strike", fwd))
    B = _num(p, "barrier", 1.25, True) * fwd
    vol = float(p.get("flat_vol", tiv.implied_vol(K, T)))
    r_d = -float(dom_c.log_df(T)) / T
    r_f = -float(fgn_c.log_df(T)) / T
    rows = [("Analytical (BS)", bs_barrier_up_out(spot, K, B, vol, r_d, r_f, T), "")]
    cfg = load_mc(run, args)
    monitoring = Monitoring(str(p.get("monitoring", "BRIDGE")).upper())
    for name in p.get("models", ["lv2dr", "lv2sr", "slv2dr", "slv2sr"]):
        est = run.timed(f"barrier_{name}", price_barrier_uo_mc, _model_factory(run, name, spot, dom_c, fgn_c, tiv)(T),
                        [K], B, T, cfg, monitoring)
        rows.append((_model_label(name), float(est.price[0]), float(est.se[0])))
    _write_rows(run.target("barrier.csv"), ["model", "price", "error"], rows)
    bench = rows[0][1]
    parts = [f"{m}: {(pr - bench) / se:+.2f} SE" for m, pr, se in rows[1:] if se]
    return f"barrier T={T} B={B:.6f} K={K:.6f} vs BS {bench:.6f}; " + ", ".join(parts)


def cmd_report(run: Run, args):
    spot, dom_c, fgn_c, tiv = load_market(run)
    p = run.section("report")
    if p.get("kind", "vanilla") == "barrier":
        return _barrier_report(run, args, spot, dom_c, fgn_c, tiv, p)
    return _vanilla_report(run, args, spot, dom_c, fgn_c, tiv, p)


def cmd_analyze_bs2sr(run: Run, args):
    spot, dom_c, fgn_c, tiv = load_market(run)
    a = run.section("bs2sr")
    rates = run.section("rates", required=False)
    mean_rev = {n: float(rates.get(n, {}).get("a", 0.03)) for n in ("dom", "fgn")}
    rows = []
    n_below = 0
    for rho_df in [float(x) for x in a.get("rho_df", [0.3])]:
        for level in [float(x) for x in a.get("rate_vols", [0.01])]:
            try:
                spec = Bs2srSpec(0.0, G1ppParams.constant(mean_rev["dom"], level, dom_c),
                                 G1ppParams.constant(mean_rev["fgn"], level, fgn_c),
                                 float(a.get("rho_sd", 0.0)), float(a.get("rho_sf", 0.0)), rho_df)
            except ValueError as exc:
                raise ConfigError(f"bs2sr: {exc}") from None
            for T in [float(t) for t in a.get("maturities", [1.0])]:
                floor = bs2sr_min_tiv(spec, T)
                fwd = float(tiv.forward(T))
                sd = float(tiv.atm_vol(T)) * np.sqrt(T)
                for K in fwd * np.exp(np.asarray(a.get("stdevs", np.linspace(-2, 2, 9)), dtype=float) * sd):
                    w = float(tiv.total_variance(tiv.log_moneyness(K, T), T))
                    ok = w >= floor
                    n_below += not ok
                    rows.append((rho_df, level, T, float(K), w, floor, int(ok)))
    _write_rows(run.target("bs2sr_analysis.csv"),
                ["rho_df", "rate_vol", "t", "K", "market_tiv", "min_tiv", "calibratable"], rows)
    return f"bs2sr analysis: {len(rows)} points, {n_below} below the attainable minimum"


COMMANDS = {
    "gen-market": cmd_gen_market,
    "calibrate-lv2sr": cmd_calibrate_lv2sr,
    "calibrate-heston": cmd_calibrate_heston,
    "calibrate-slv2dr": cmd_calibrate_slv2dr,
    "calibrate-slv2sr": cmd_calibrate_slv2sr,
    "price": cmd_price,
    "report": cmd_report,
    "analyze-bs2sr": cmd_analyze_bs2sr,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="fxslv", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="YAML run configuration")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, help="override mc.seed")
        p.add_argument("--paths", type=int, help="override mc.paths (antithetic pairs)")
        p.add_argument("--threads", type=int, default=1, help="RNG worker threads")
    return parser


def read_config(path: Path, args):
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        config = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(config, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    base = path.resolve().parent
    if "config_hash" in config and isinstance(config.get("config"), dict):
        # replaying a manifest: its stored config already carries any overrides
        base = Path(config.get("base_dir", base))
        config = config["config"]
    mc = dict(config.get("mc") or {})
    if args.seed is not None:
        mc["seed"] = args.seed
    if args.paths is not None:
        mc["paths"] = args.paths
    if mc:
        config["mc"] = mc
    return config, base


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    run = None
    try:
        config, base = read_config(args.config, args)
        run = Run(config, base, args.out, args.command)
        summary = COMMANDS[args.command](run, args)
        run.commit()
    except NoRealLocalVol as exc:
        if run:
            run.discard()
        print(f"error: calibration aborted, no real local volatility at K={exc.K:.6g}, T={exc.T:.6g}",
              file=sys.stderr)
        return EXIT_NO_LOCAL_VOL
    except (ConfigError, OSError, ValueError) as exc:
        if run:
            run.discard()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BaseException:
        if run:
            run.discard()
        raise
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
