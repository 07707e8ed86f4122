"""Closed-form pricers.

Black-Scholes in total-variance coordinates, Black implied-vol inversion, the
constant-parameter up-and-out call, and the total implied variance of a
flat-vol FX model driven by two Gaussian short rates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .marketdata import DiscountCurve, forward
from .rates import G1ppParams, b_factor

_GL64_X, _GL64_W = np.polynomial.legendre.leggauss(64)


def _d1(y, w):
    sw = np.sqrt(w)
    return -y / sw + 0.5 * sw


def bs_call_tiv(T, y, w, dom: DiscountCurve, fgn: DiscountCurve, spot):
    """Call price in ``(T, y, w)`` coordinates and its partial derivatives.

    Returns ``(C, dC/dw, dC/dy, dC/dT)`` where every partial holds the other
    two coordinates fixed. For ``w <= 0`` only the intrinsic limit of ``C`` is
    defined and the partials raise.
    """
    T = float(T)
    if T <= 0.0:
        raise ValueError("T must be positive")
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    pd = float(dom.df(T))
    fwd = float(forward(spot, dom, fgn, T))
    if np.any(w <= 0.0):
        if np.all(w <= 0.0) and np.ndim(w) == 0:
            return pd * fwd * max(1.0 - float(np.exp(y)), 0.0), None, None, None
        raise ValueError("total variance must be positive for partial derivatives")
    d1 = _d1(y, w)
    d2 = d1 - np.sqrt(w)
    ey = np.exp(y)
    price = pd * fwd * (norm.cdf(d1) - ey * norm.cdf(d2))
    c_w = 0.5 * pd * fwd * ey * norm.pdf(d2) / np.sqrt(w)
    c_y = -pd * fwd * ey * norm.cdf(d2)
    c_T = -float(fgn.fwd_rate(T)) * price
    return price, c_w, c_y, c_T


def call_dT_fixed_strike(T, y, w, w_y, w_T, dom, fgn, spot):
    """``dC/dT`` at fixed strike for a smile ``w(y, T)``.

    Combines the fixed-coordinate partials with ``dy/dT = f^f - f^d`` and
    ``dw/dT = w_T + w_y dy/dT``.
    """
    price, c_w, c_y, c_T = bs_call_tiv(T, y, w, dom, fgn, spot)
    dy = float(fgn.fwd_rate(T) - dom.fwd_rate(T))
    return c_T + c_w * w_T + (c_y + c_w * w_y) * dy


def black(F, K, vol, T, df=1.0):
    """Undiscounted-forward Black call, times ``df``."""
    F, K, vol, T = (np.asarray(v, dtype=float) for v in (F, K, vol, T))
    sd = vol * np.sqrt(T)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.log(F / K) / sd + 0.5 * sd
        val = F * norm.cdf(d1) - K * norm.cdf(d1 - sd)
    val = np.where(sd > 0.0, val, np.maximum(F - K, 0.0))
    return df * val


def implied_vol(price, F, K, T, df=1.0):
    """Black implied volatility from a call price, by bracketed root search."""
    price, F, K, T, df = float(price), float(F), float(K), float(T), float(df)
    lo_bound = df * max(F - K, 0.0)
    if not (lo_bound < price < df * F):
        raise ValueError(f"price {price} outside no-arbitrage bounds ({lo_bound}, {df * F})")

    def f(v):
        return float(black(F, K, v, T, df)) - price

    hi = 1.0
    while f(hi) < 0.0:
        hi *= 2.0
        if hi > 1e3:
            raise ValueError("implied vol above search bracket")
    lo = 1e-4
    while f(lo) > 0.0:
        lo *= 0.1
        if lo < 1e-300:
            return 0.0
    return brentq(f, lo, hi, xtol=1e-15, rtol=4.0 * np.finfo(float).eps, maxiter=500)


def bs_call(spot, K, vol, r_d, r_f, T):
    F = spot * np.exp((r_d - r_f) * T)
    return black(F, K, vol, T, np.exp(-r_d * T))


def bs_barrier_up_out(spot, K, B, vol, r_d, r_f, T):
    """Continuously monitored up-and-out call under constant-parameter BS."""
    if B <= spot or B <= K:
        return 0.0
    if vol <= 0.0:
        raise ValueError("volatility must be positive")
    sd = vol * np.sqrt(T)
    mu = (r_d - r_f - 0.5 * vol * vol) / (vol * vol)
    carry = spot * np.exp(-r_f * T)
    disc = K * np.exp(-r_d * T)
    shift = (1.0 + mu) * sd

    def leg(x, scale_s=1.0, scale_k=1.0, sign=1.0):
        return (carry * scale_s * norm.cdf(sign * x)
                - disc * scale_k * norm.cdf(sign * (x - sd)))

    x1 = np.log(spot / K) / sd + shift
    x2 = np.log(spot / B) / sd + shift
    y1 = np.log(B * B / (spot * K)) / sd + shift
    y2 = np.log(B / spot) / sd + shift
    ps = (B / spot) ** (2.0 * (mu + 1.0))
    pk = (B / spot) ** (2.0 * mu)
    value = leg(x1) - leg(x2) + leg(y1, ps, pk, -1.0) - leg(y2, ps, pk, -1.0)
    return float(max(value, 0.0))


@dataclass(frozen=True)
class Bs2srSpec:
    """Flat FX vol with domestic and foreign G1++ rates."""

    sigma_s: float
    dom: G1ppParams
    fgn: G1ppParams
    rho_sd: float
    rho_sf: float
    rho_df: float

    def __post_init__(self):
        if self.sigma_s < 0.0:
            raise ValueError("sigma_s must be non-negative")
        corr = np.array([[1.0, self.rho_sd, self.rho_sf],
                         [self.rho_sd, 1.0, self.rho_df],
                         [self.rho_sf, self.rho_df, 1.0]])
        if np.min(np.linalg.eigvalsh(corr)) < -1e-12:
            raise ValueError("correlation matrix is not positive semidefinite")


@dataclass(frozen=True)
class NoSolution:
    """Target total variance is below what any non-negative FX vol can produce."""

    target: float
    min_tiv: float


def _nodes(spec, T):
    edges = np.unique(np.concatenate([[0.0, T], spec.dom.starts, spec.fgn.starts]))
    edges = edges[(edges >= 0.0) & (edges <= T)]
    lo, hi = edges[:-1, None], edges[1:, None]
    t = 0.5 * (lo + hi) + 0.5 * (hi - lo) * _GL64_X
    wts = 0.5 * (hi - lo) * _GL64_W
    return t.ravel(), wts.ravel()


def _bs2sr_coefficients(spec: Bs2srSpec, T: float):
    """``(c2, c1, c0)`` with ``tiv = c2 s^2 + c1 s + c0`` in the FX vol ``s``."""
    if T <= 0.0:
        raise ValueError("T must be positive")
    t, wts = _nodes(spec, T)
    vd = spec.dom.sigma_at(t) * b_factor(spec.dom, t, T)
    vf = spec.fgn.sigma_at(t) * b_factor(spec.fgn, t, T)
    cross = float(np.dot(wts, spec.rho_sd * vd - spec.rho_sf * vf))
    rates = float(np.dot(wts, vd * vd + vf * vf - 2.0 * spec.rho_df * vd * vf))
    return T, 2.0 * cross, rates


def bs2sr_tiv(spec: Bs2srSpec, T: float) -> float:
    c2, c1, c0 = _bs2sr_coefficients(spec, T)
    s = spec.sigma_s
    return c2 * s * s + c1 * s + c0


def _vertex(c2, c1):
    return max(-c1 / (2.0 * c2), 0.0)


def bs2sr_min_tiv(spec: Bs2srSpec, T: float) -> float:
    """Smallest total implied variance over non-negative FX vols."""
    c2, c1, c0 = _bs2sr_coefficients(spec, T)
    s = _vertex(c2, c1)
    return max(c2 * s * s + c1 * s + c0, 0.0)


def bs2sr_solve_vol(target: float, spec: Bs2srSpec, T: float):
    """FX vol reproducing ``target`` total variance, or :class:`NoSolution`."""
    if target < 0.0:
        raise ValueError("target total variance must be non-negative")
    c2, c1, c0 = _bs2sr_coefficients(spec, T)
    floor = bs2sr_min_tiv(spec, T)
    if target < floor:
        return NoSolution(float(target), floor)
    disc = max(c1 * c1 - 4.0 * c2 * (c0 - target), 0.0)
    return max((-c1 + np.sqrt(disc)) / (2.0 * c2), 0.0)
