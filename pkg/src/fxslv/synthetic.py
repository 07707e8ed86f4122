"""Self-contained synthetic FX markets: flat, skewed and smiled surfaces."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .marketdata import DiscountCurve, TivGridSpec, VolQuoteGrid, build_tiv_surface, forward


@dataclass(frozen=True)
class SyntheticMarket:
    spot: float
    dom: DiscountCurve
    fgn: DiscountCurve
    quotes: VolQuoteGrid

    def tiv(self, grid: TivGridSpec | None = TivGridSpec()):
        return build_tiv_surface(self.quotes, self.dom, self.fgn, self.spot, grid)


def ssvi_total_variance(y, atm_var_T, rho, eta, gamma=0.5):
    """Surface SVI with power-law curvature ``eta / theta**gamma``."""
    theta = np.asarray(atm_var_T, dtype=float)
    phi = eta / theta ** gamma
    k = phi * np.asarray(y, dtype=float)
    return 0.5 * theta * (1.0 + rho * k + np.sqrt((k + rho) ** 2 + 1.0 - rho * rho))


def ssvi_market(spot=1.0, r_d=0.02, r_f=0.01, atm_vol=0.1, rho=-0.3, eta=0.8, gamma=0.5,
                horizon=2.0, spacing=0.05, n_strikes=41, stdev_span=4.5, curve_horizon=None):
    """SSVI-smiled market quoted on a dense expiry grid from ``spacing`` to ``horizon``."""
    if eta * (1.0 + abs(rho)) > 2.0:
        raise ValueError("SSVI parameters admit butterfly arbitrage: need eta (1 + |rho|) <= 2")
    ch = curve_horizon or max(30.0, horizon + 1.0)
    dom = DiscountCurve.flat(r_d, ch)
    fgn = DiscountCurve.flat(r_f, ch)
    n = int(round(horizon / spacing))
    expiries = spacing * np.arange(1, n + 1)
    strikes, vols = [], []
    for T in expiries:
        fwd = forward(spot, dom, fgn, T)
        theta = atm_vol * atm_vol * T
        y = np.linspace(-stdev_span, stdev_span, n_strikes) * np.sqrt(theta)
        w = ssvi_total_variance(y, theta, rho, eta, gamma)
        strikes.append(fwd * np.exp(y))
        vols.append(np.sqrt(w / T))
    return SyntheticMarket(spot, dom, fgn, VolQuoteGrid(expiries, tuple(strikes), tuple(vols)))


def flat_market(vol=0.2, spot=1.0, r_d=0.02, r_f=0.01, horizon=2.0, spacing=0.05, n_strikes=41,
                stdev_span=4.5, curve_horizon=None):
    ch = curve_horizon or max(30.0, horizon + 1.0)
    dom = DiscountCurve.flat(r_d, ch)
    fgn = DiscountCurve.flat(r_f, ch)
    n = int(round(horizon / spacing))
    expiries = spacing * np.arange(1, n + 1)
    strikes, vols = [], []
    for T in expiries:
        fwd = forward(spot, dom, fgn, T)
        y = np.linspace(-stdev_span, stdev_span, n_strikes) * vol * np.sqrt(T)
        strikes.append(fwd * np.exp(y))
        vols.append(np.full(n_strikes, vol))
    return SyntheticMarket(spot, dom, fgn, VolQuoteGrid(expiries, tuple(strikes), tuple(vols)))


def skewed_market(spot=1.0, r_d=0.02, r_f=0.01, atm_vol=0.12, rho=-0.6, eta=0.3, **kw):
    """Mostly skew, little curvature."""
    return ssvi_market(spot, r_d, r_f, atm_vol, rho, eta, **kw)
