"""Local volatility from the implied-vol surface.

Deterministic rates use the closed-form Dupire expression in total implied
variance. With G1++ rates the fixed-strike time derivative of the call picks
up a correction ``Pd(0,T) E^T[(K r^d_T - S_T r^f_T) 1{S_T > K}]`` that is
estimated by Monte Carlo under the T-forward measure, so the surface is built
slice by slice, each slice re-simulated with the slices already known.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analytic import bs_call_tiv, call_dT_fixed_strike
from .engine import CorrelationSpec, McConfig, ModelSpec, Variant, simulate
from .marketdata import TivSurface
from .rates import G1ppParams
from .surfaces import SliceSurface, SurfaceKind


class NoRealLocalVol(ValueError):
    """The local variance numerator is negative: no real local vol exists."""

    def __init__(self, K, T, numerator):
        super().__init__(f"no real local volatility at K={K:.6g}, T={T:.6g} "
                         f"(numerator {numerator:.3e})")
        self.K, self.T, self.numerator = float(K), float(T), float(numerator)


@dataclass(frozen=True)
class LvGridSpec:
    slice_spacing: float = 0.05
    n_strikes: int = 200
    stdev_span: float = 3.0


@dataclass
class ExpectationEstimate:
    mean: np.ndarray
    se: np.ndarray
    n_paths: int


def strike_grid(tiv: TivSurface, T, n_points=200, stdev_span=3.0):
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    fwd = float(tiv.forward(T))
    sd = np.sqrt(max(float(tiv.total_variance(0.0, T)), 0.0))
    return fwd * np.exp(np.linspace(-stdev_span, stdev_span, n_points) * sd)


def dupire_denominator(y, w, wy, wyy):
    """``1 - y wy / w + wyy / 2 + wy^2 (-1/4 - 1/w + y^2 / w^2) / 4``."""
    return 1.0 - y * wy / w + 0.5 * wyy + 0.25 * wy * wy * (-0.25 - 1.0 / w + y * y / (w * w))


def local_vol_det_tiv(tiv: TivSurface, y, T):
    """Deterministic-rates local vol; NaN where numerator or denominator is not positive."""
    y = np.asarray(y, dtype=float)
    w, wy, wyy, wT = tiv.eval(y, T)
    den = dupire_denominator(y, w, wy, wyy)
    # round-off leaves w_T ~ 1e-17 on calendar-flat surfaces; treat that as zero
    ok = (wT > 1e-12) & (den > 0.0) & (w > 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(ok, np.sqrt(np.where(ok, wT / den, 1.0)), np.nan)


def fill_flagged(values):
    """Replace NaNs by the nearest valid neighbour; returns ``(filled, n_flagged)``."""
    values = np.asarray(values, dtype=float).copy()
    bad = ~np.isfinite(values)
    if bad.all():
        raise ValueError("no valid local volatility on slice")
    if bad.any():
        good = np.flatnonzero(~bad)
        idx = np.arange(values.size)
        pos = np.clip(np.searchsorted(good, idx), 1, good.size - 1) if good.size > 1 else np.zeros_like(idx)
        if good.size > 1:
            left, right = good[pos - 1], good[pos]
            nearest = np.where(idx - left <= right - idx, left, right)
        else:
            nearest = np.full_like(idx, good[0])
        values[bad] = values[nearest[bad]]
    return values, int(bad.sum())


def local_vol_det_call(price, K, T, dom, fgn, rel_step=1e-4, time_step=1e-4):
    """Dupire local vol from a call-price function ``price(K, T)`` by central differences."""
    K = np.asarray(K, dtype=float)
    hk = rel_step * K
    c = price(K, T)
    c_T = (price(K, T + time_step) - price(K, T - time_step)) / (2.0 * time_step)
    c_up, c_dn = price(K + hk, T), price(K - hk, T)
    c_K = (c_up - c_dn) / (2.0 * hk)
    c_KK = (c_up - 2.0 * c + c_dn) / (hk * hk)
    if np.any(c_KK <= 0.0):
        raise ValueError("non-positive risk-neutral density")
    rd, rf = float(dom.fwd_rate(T)), float(fgn.fwd_rate(T))
    num = c_T + (rd - rf) * K * c_K + rf * c
    return np.sqrt(num / (0.5 * K * K * c_KK))


def _pair_sums(keys, vals, thresholds, above):
    """Sums of ``vals`` columns over entries with key > (or <=) each threshold."""
    order = np.argsort(keys, kind="stable")
    k_sorted = keys[order]
    cum = np.vstack([np.zeros(vals.shape[1]), np.cumsum(vals[order], axis=0)])
    pos = np.searchsorted(k_sorted, thresholds, side="right")
    below = cum[pos]
    return cum[-1] - below if above else below


def stoch_rate_expectation(S, rd, rf, K, exact_total=None, paired=True) -> ExpectationEstimate:
    """Estimate ``E[(K rd - S rf) 1{S > K}]`` for each strike in ``K``.

    With ``paired`` the arrays hold N originals then their N antithetic mates
    and the standard error is taken over pair means. If ``exact_total`` gives
    ``E[K rd - S rf]`` per strike, strikes where most paths finish in the money
    are estimated through the complementary event ``S <= K`` instead, which has
    far fewer contributing paths and hence lower variance.
    """
    S, rd, rf = (np.asarray(a, dtype=float).ravel() for a in (S, rd, rf))
    K = np.atleast_1d(np.asarray(K, dtype=float))
    n_all = S.size
    if n_all == 0:
        raise ValueError("empty slice")
    if paired and n_all % 2:
        raise ValueError("paired estimation needs an even number of paths")
    use_comp = np.zeros(K.size, dtype=bool)
    if exact_total is not None:
        frac_itm = 1.0 - np.searchsorted(np.sort(S), K, side="right") / n_all
        use_comp = frac_itm > 0.5
    srf = S * rf
    singles = np.column_stack([rd, srf, rd * rd, rd * srf, srf * srf])
    mean = np.empty(K.size)
    se = np.empty(K.size)
    for comp in (False, True):
        sel = use_comp == comp
        if not sel.any():
            continue
        k = K[sel]
        s1 = _pair_sums(S, singles, k, above=not comp)
        tot = k * s1[:, 0] - s1[:, 1]
        sq = k * k * s1[:, 2] - 2.0 * k * s1[:, 3] + s1[:, 4]
        if paired:
            n = n_all // 2
            a, b = slice(0, n), slice(n, None)
            key = np.minimum(S[a], S[b]) if not comp else np.maximum(S[a], S[b])
            cross_vals = np.column_stack([rd[a] * rd[b], rd[a] * srf[b] + rd[b] * srf[a], srf[a] * srf[b]])
            c = _pair_sums(key, cross_vals, k, above=not comp)
            cross = k * k * c[:, 0] - k * c[:, 1] + c[:, 2]
            m = tot / n_all
            sum_m2 = 0.25 * (sq + 2.0 * cross)
            var = (sum_m2 - n * m * m) / max(n - 1, 1)
            count = n
        else:
            m = tot / n_all
            var = (sq - n_all * m * m) / max(n_all - 1, 1)
            count = n_all
        err = np.sqrt(np.maximum(var, 0.0) / count)
        if comp:
            m = np.asarray(exact_total, dtype=float)[sel] - m
        mean[sel] = m
        se[sel] = err
    return ExpectationEstimate(mean, se, n_all)


def local_vol_stoch(tiv: TivSurface, y, T, estimate: ExpectationEstimate):
    """Stochastic-rates local vol and its MC error at log-moneyness ``y``.

    Returns ``(sigma, d_sigma, numerator, denominator)``; points with a
    non-positive denominator come back as NaN. Raises :class:`NoRealLocalVol`
    at the first negative numerator.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    w, wy, wyy, wT = tiv.eval(y, T)
    _, c_w, _, _ = bs_call_tiv(T, y, w, tiv.dom, tiv.fgn, tiv.spot)
    c_dT = call_dT_fixed_strike(T, y, w, wy, wT, tiv.dom, tiv.fgn, tiv.spot)
    pd = float(tiv.dom.df(T))
    den = c_w * dupire_denominator(y, w, wy, wyy)
    num = c_dT - pd * np.asarray(estimate.mean)
    valid = den > 0.0
    neg = np.flatnonzero(valid & (num < 0.0))
    if neg.size:
        i = neg[0]
        raise NoRealLocalVol(float(tiv.forward(T)) * np.exp(y[i]), T, num[i])
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma = np.where(valid, np.sqrt(np.where(valid, num / den, 1.0)), np.nan)
        d_sigma = np.where(valid & (sigma > 0.0),
                           np.abs(pd * np.asarray(estimate.se) / (2.0 * sigma * den)), np.nan)
    d_sigma = np.where(valid & (sigma == 0.0), np.inf, d_sigma)
    return sigma, d_sigma, num, den


def slice_times(horizon, spacing):
    n = int(np.floor(horizon / spacing + 1e-9))
    return spacing * np.arange(1, n + 1)


@dataclass
class LvCalibration:
    surface: SliceSurface
    flagged: list = field(default_factory=list)


def deterministic_lv_surface(tiv: TivSurface, horizon, grid: LvGridSpec = LvGridSpec()) -> LvCalibration:
    """Closed-form local vol on every slice (deterministic rates)."""
    surf = SliceSurface(SurfaceKind.LOCAL_VOL)
    flagged = []
    for t in slice_times(horizon, grid.slice_spacing):
        K = strike_grid(tiv, t, grid.n_strikes, grid.stdev_span)
        vals, nbad = fill_flagged(local_vol_det_tiv(tiv, tiv.log_moneyness(K, t), t))
        surf = surf.with_slice(t, K, vals)
        flagged.append(nbad)
    return LvCalibration(surf, flagged)


def calibrate_lv2sr(tiv: TivSurface, dom: G1ppParams, fgn: G1ppParams, corr: CorrelationSpec,
                    cfg: McConfig, horizon, grid: LvGridSpec = LvGridSpec(), progress=None) -> LvCalibration:
    """Bootstrap the local-vol surface under two stochastic G1++ rates.

    The first slice is closed form. Slice ``t_j`` is obtained by simulating the
    T-forward system with horizon ``t_j`` on the slices built so far.
    """
    times = slice_times(horizon, grid.slice_spacing)
    if times.size == 0:
        raise ValueError("horizon shorter than one slice")
    surf = SliceSurface(SurfaceKind.LOCAL_VOL)
    flagged = []
    for j, t in enumerate(times):
        K = strike_grid(tiv, t, grid.n_strikes, grid.stdev_span)
        y = tiv.log_moneyness(K, t)
        if j == 0:
            vals, nbad = fill_flagged(local_vol_det_tiv(tiv, y, t))
            errs = np.zeros_like(vals)
        else:
            model = ModelSpec(Variant.LV2SR_TFWD, tiv.spot, tiv.dom, tiv.fgn, dom, fgn,
                              surface=surf, corr=corr, horizon=float(t))
            run_cfg = McConfig(cfg.n_paths, cfg.max_dt, cfg.seed, (float(t),), cfg.workers)
            state = simulate(model, run_cfg).at(t)
            rd = state["xd"] + float(dom.phi(t))
            rf = state["xf"] + float(fgn.phi(t))
            exact = K * float(tiv.dom.fwd_rate(t)) - float(tiv.forward(t)) * float(tiv.fgn.fwd_rate(t))
            est = stoch_rate_expectation(state["S"], rd, rf, K, exact_total=exact)
            try:
                sig, dsig, _, _ = local_vol_stoch(tiv, y, t, est)
            except NoRealLocalVol as exc:
                raise NoRealLocalVol(exc.K, exc.T, exc.numerator) from None
            vals, nbad = fill_flagged(sig)
            errs, _ = fill_flagged(dsig)
        surf = surf.with_slice(float(t), K, vals, errs)
        flagged.append(nbad)
        if progress is not None:
            progress(j, float(t))
    return LvCalibration(surf, flagged)
