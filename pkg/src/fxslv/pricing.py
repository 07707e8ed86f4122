"""Monte Carlo repricing of vanilla and up-and-out calls, and repricing reports."""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .analytic import black, implied_vol
from .engine import McConfig, ModelSpec, simulate
from .marketdata import TivSurface

_TIME_TOL = 1e-9


class Monitoring(str, Enum):
    DISCRETE = "DISCRETE"
    BRIDGE = "BRIDGE"


@dataclass
class McEstimate:
    price: np.ndarray
    se: np.ndarray
    n_paths: int
    convention: str


def _pair_stats(payoff, n_pairs):
    pm = 0.5 * (payoff[..., :n_pairs] + payoff[..., n_pairs:])
    mean = pm.mean(axis=-1)
    se = pm.std(axis=-1, ddof=1) / np.sqrt(n_pairs) if n_pairs > 1 else np.zeros_like(mean)
    return mean, se


def _discount(model: ModelSpec, T):
    if model.variant.t_forward:
        if abs(model.horizon - T) > _TIME_TOL:
            raise ValueError(f"T-forward model has horizon {model.horizon}, cannot price maturity {T}")
        return float(model.dom_curve.df(T)), "P_d(0,T) * E^T[payoff]"
    return float(model.dom_curve.df(T)), "exp(-int r_d) * E[payoff]"


def _estimate(model, ST, strikes, T, cfg, weights=None):
    disc, conv = _discount(model, T)
    K = np.atleast_1d(np.asarray(strikes, dtype=float))
    payoff = np.maximum(ST[None, :] - K[:, None], 0.0)
    if weights is not None:
        payoff = payoff * weights[None, :]
    mean, se = _pair_stats(payoff, cfg.n_paths)
    return McEstimate(disc * mean, disc * se, 2 * cfg.n_paths, conv)


def price_vanilla_mc(model: ModelSpec, strikes, T, cfg: McConfig) -> McEstimate:
    _discount(model, T)
    run = McConfig(cfg.n_paths, cfg.max_dt, cfg.seed, (float(T),), cfg.workers)
    ST = simulate(model, run).at(T)["S"]
    return _estimate(model, ST, strikes, T, cfg)


def price_barrier_uo_mc(model: ModelSpec, strikes, barrier, T, cfg: McConfig,
                        monitoring=Monitoring.BRIDGE) -> McEstimate:
    """Up-and-out call monitored on every simulation step.

    ``BRIDGE`` also multiplies by the Brownian-bridge survival probability
    between grid points, using the diffusion level at the start of each step.
    """
    monitoring = Monitoring(monitoring)
    K = np.atleast_1d(np.asarray(strikes, dtype=float))
    disc, conv = _discount(model, T)
    if barrier <= model.spot:
        z = np.zeros(K.size)
        return McEstimate(z, z.copy(), 2 * cfg.n_paths, conv)
    alive = np.ones(2 * cfg.n_paths)
    log_b = np.log(barrier)

    def monitor(t0, t1, s_old, s_new, vol):
        nonlocal alive
        below = s_new < barrier
        alive = alive * below
        if monitoring is Monitoring.BRIDGE:
            var = vol * vol * (t1 - t0)
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                a = log_b - np.log(s_old)
                b = log_b - np.log(np.where(below, s_new, barrier))
                cross = np.where(var > 0.0, np.exp(-2.0 * a * b / var), 0.0)
            alive = alive * np.where(below, 1.0 - cross, 0.0)

    run = McConfig(cfg.n_paths, cfg.max_dt, cfg.seed, (float(T),), cfg.workers)
    ST = simulate(model, run, on_step=monitor).at(T)["S"]
    return _estimate(model, ST, K, T, cfg, alive)


def reprice_report(model_for, strikes_by_T, cfg: McConfig, tiv: TivSurface, n_se=2.0):
    """Reprice a strike x maturity grid and compare with the market.

    ``model_for(T)`` returns the model to price maturity ``T`` with (T-forward
    models need their horizon set to ``T``); a plain ModelSpec is accepted and
    re-horizoned as needed. Implied-vol inversion failures are reported as NaN.
    """
    rows = []
    for T, strikes in strikes_by_T.items():
        T = float(T)
        model = model_for(T) if callable(model_for) else _rehorizon(model_for, T)
        est = price_vanilla_mc(model, strikes, T, cfg)
        fwd = float(tiv.forward(T))
        pd = float(tiv.dom.df(T))
        for K, p, se in zip(np.atleast_1d(strikes), est.price, est.se):
            mkt_vol = float(tiv.implied_vol(K, T))
            bs = float(black(fwd, K, mkt_vol, T, pd))
            ivs = [_safe_iv(x, fwd, K, T, pd) for x in (p, p - n_se * se, p + n_se * se)]
            rows.append({
                "t": T, "K": float(K), "mc_price": float(p), "mc_se": float(se), "bs_price": bs,
                "diff": float(p - bs), "market_vol": mkt_vol,
                "iv_mc": ivs[0], "iv_lo": ivs[1], "iv_hi": ivs[2],
            })
    return rows


def _rehorizon(model, T):
    if model.variant.t_forward:
        return replace(model, horizon=T)
    return model


def _safe_iv(price, fwd, K, T, pd):
    try:
        return float(implied_vol(price, fwd, K, T, pd))
    except ValueError:
        return float("nan")


def band_contains(row):
    """True when the market vol lies inside the recovered ``[iv_lo, iv_hi]`` band."""
    lo = row["iv_lo"] if np.isfinite(row["iv_lo"]) else 0.0
    hi = row["iv_hi"]
    return bool(np.isfinite(hi) and lo <= row["market_vol"] <= hi)
