"""Market inputs: discount curves, implied-vol quotes and the total implied
variance surface used by every calibration.

Times are plain year fractions throughout. The total implied variance is kept
in forward log-moneyness coordinates, ``w(y, T) = vol(K, T)**2 * T`` with
``y = log(K / F_T)`` and ``F_T = spot * Pf(0, T) / Pd(0, T)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

_TIME_TOL = 1e-12


class CalendarArbitrageError(ValueError):
    """Total implied variance decreases in maturity at fixed log-moneyness."""


@dataclass(frozen=True)
class DiscountCurve:
    """Zero-coupon discount factors with log-linear interpolation.

    A node at ``t = 0`` with ``P = 1`` is prepended when missing.
    """

    tenors: np.ndarray
    dfs: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tenors, dtype=float).ravel()
        p = np.asarray(self.dfs, dtype=float).ravel()
        if t.size != p.size or t.size == 0:
            raise ValueError("tenors and dfs must be non-empty and of equal length")
        if np.any(p <= 0.0):
            raise ValueError("discount factors must be strictly positive")
        if t[0] < 0.0:
            raise ValueError("tenors must be non-negative")
        if t[0] > 0.0:
            t = np.concatenate([[0.0], t])
            p = np.concatenate([[1.0], p])
        elif p[0] != 1.0:
            raise ValueError("P(0, 0) must equal 1")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("tenors must be strictly increasing")
        if t.size < 2:
            raise ValueError("curve needs at least one positive tenor")
        object.__setattr__(self, "tenors", t)
        object.__setattr__(self, "dfs", p)
        object.__setattr__(self, "_logdf", np.log(p))

    @classmethod
    def flat(cls, rate: float, horizon: float = 30.0, step: float = 0.5) -> "DiscountCurve":
        """Curve for a flat continuously compounded rate."""
        n = max(int(np.ceil(horizon / step)), 1)
        tenors = np.linspace(step, n * step, n)
        return cls(tenors, np.exp(-rate * tenors))

    @property
    def horizon(self) -> float:
        return float(self.tenors[-1])

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < -_TIME_TOL) or np.any(t > self.horizon + _TIME_TOL):
            raise ValueError(f"time outside curve coverage [0, {self.horizon}]")
        return np.clip(t, 0.0, self.horizon)

    def log_df(self, t):
        t = self._check(t)
        return np.interp(t, self.tenors, self._logdf)

    def df(self, t):
        return np.exp(self.log_df(t))

    def fwd_rate(self, t):
        """Instantaneous forward rate; right-continuous at tenor nodes."""
        t = self._check(t)
        slopes = -np.diff(self._logdf) / np.diff(self.tenors)
        idx = np.clip(np.searchsorted(self.tenors, t, side="right") - 1, 0, slopes.size - 1)
        return slopes[idx]


def forward(spot: float, dom: DiscountCurve, fgn: DiscountCurve, T) -> np.ndarray | float:
    """FX forward ``spot * Pf(0, T) / Pd(0, T)``."""
    if spot <= 0.0:
        raise ValueError("spot must be positive")
    return spot * np.exp(fgn.log_df(T) - dom.log_df(T))


def instantaneous_forward(curve: DiscountCurve, T):
    return curve.fwd_rate(T)


@dataclass(frozen=True)
class VolQuoteGrid:
    """Implied volatility quotes, one strike row per expiry."""

    expiries: np.ndarray
    strikes: tuple
    vols: tuple

    def __post_init__(self):
        exp = np.asarray(self.expiries, dtype=float).ravel()
        ks = tuple(np.asarray(k, dtype=float).ravel() for k in self.strikes)
        vs = tuple(np.asarray(v, dtype=float).ravel() for v in self.vols)
        if exp.size == 0:
            raise ValueError("empty quotes")
        if len(ks) != exp.size or len(vs) != exp.size:
            raise ValueError("one strike row and one vol row per expiry required")
        if np.any(exp <= 0.0) or np.any(np.diff(exp) <= 0.0):
            raise ValueError("expiries must be positive and increasing")
        for k, v in zip(ks, vs):
            if k.size == 0 or k.size != v.size:
                raise ValueError("strike and vol rows must be non-empty and aligned")
            if np.any(np.diff(k) <= 0.0) or np.any(k <= 0.0):
                raise ValueError("strikes must be positive and increasing")
            if np.any(v <= 0.0) or not np.all(np.isfinite(v)):
                raise ValueError("implied vols must be positive")
        object.__setattr__(self, "expiries", exp)
        object.__setattr__(self, "strikes", ks)
        object.__setattr__(self, "vols", vs)


@dataclass(frozen=True)
class TivGridSpec:
    slice_spacing: float = 0.05
    n_points: int = 100
    stdev_span: float = 3.5


def _slice_spline(y, w):
    if y.size == 1:
        return None
    if y.size < 4:
        return CubicSpline(y, w, bc_type="natural")
    return CubicSpline(y, w, bc_type="not-a-knot")


@dataclass
class _Slice:
    T: float
    y: np.ndarray
    w: np.ndarray
    spline: CubicSpline | None = field(repr=False)

    def eval(self, y):
        """Return (w, w_y, w_yy) with flat extrapolation outside the nodes."""
        y = np.asarray(y, dtype=float)
        if self.spline is None:
            w = np.full_like(y, self.w[0])
            return w, np.zeros_like(y), np.zeros_like(y)
        yc = np.clip(y, self.y[0], self.y[-1])
        inside = (y >= self.y[0]) & (y <= self.y[-1])
        w = self.spline(yc)
        wy = np.where(inside, self.spline(yc, 1), 0.0)
        wyy = np.where(inside, self.spline(yc, 2), 0.0)
        return w, wy, wyy


class TivSurface:
    """Total implied variance ``w(y, T)``.

    Cubic spline in ``y`` on each slice, linear in ``T`` between slices at fixed
    ``y``, flat in ``y`` outside each slice's node range and with constant
    ``dw/dT`` after the last slice.
    """

    def __init__(self, spot, dom, fgn, slices):
        self.spot = float(spot)
        self.dom = dom
        self.fgn = fgn
        self._slices = list(slices)
        self.times = np.array([s.T for s in self._slices])

    @property
    def slices(self):
        return self._slices

    def forward(self, T):
        return forward(self.spot, self.dom, self.fgn, T)

    def log_moneyness(self, K, T):
        return np.log(np.asarray(K, dtype=float) / self.forward(T))

    def eval(self, y, T):
        """Return ``(w, dw/dy, d2w/dy2, dw/dT)`` at log-moneyness ``y`` and time ``T``."""
        T = float(T)
        times = self.times
        if T < times[0] - _TIME_TOL:
            raise ValueError(f"T={T} before first surface slice {times[0]}")
        y = np.asarray(y, dtype=float)
        if times.size == 1:
            w, wy, wyy = self._slices[0].eval(y)
            scale = T / times[0]
            return w * scale, wy * scale, wyy * scale, w / times[0]
        i = int(np.searchsorted(times, T, side="right")) - 1
        i = min(max(i, 0), times.size - 2)
        lo, hi = self._slices[i], self._slices[i + 1]
        w0, wy0, wyy0 = lo.eval(y)
        w1, wy1, wyy1 = hi.eval(y)
        dt = hi.T - lo.T
        lam = (T - lo.T) / dt
        w = (1.0 - lam) * w0 + lam * w1
        wy = (1.0 - lam) * wy0 + lam * wy1
        wyy = (1.0 - lam) * wyy0 + lam * wyy1
        wT = (w1 - w0) / dt
        return w, wy, wyy, wT

    def total_variance(self, y, T):
        return self.eval(y, T)[0]

    def implied_vol(self, K, T):
        y = self.log_moneyness(K, T)
        return np.sqrt(np.maximum(self.total_variance(y, T), 0.0) / T)

    def atm_vol(self, T):
        return float(np.sqrt(max(float(self.total_variance(0.0, T)), 0.0) / T))


def tiv_eval(surface: TivSurface, y, T):
    return surface.eval(y, T)


def _merge_nodes(base, extra, min_gap):
    """Union of node sets, dropping ``extra`` nodes too close to ``base`` ones."""
    j = np.searchsorted(base, extra)
    left = base[np.clip(j - 1, 0, base.size - 1)]
    right = base[np.clip(j, 0, base.size - 1)]
    gap = np.minimum(np.abs(extra - left), np.abs(extra - right))
    return np.unique(np.concatenate([base, extra[gap > min_gap]]))


def _check_calendar(slices, tol=1e-12):
    for a, b in zip(slices[:-1], slices[1:]):
        y = np.union1d(a.y, b.y)
        wa, _, _ = a.eval(y)
        wb, _, _ = b.eval(y)
        bad = wb < wa - tol * np.maximum(1.0, np.abs(wa))
        if np.any(bad):
            k = int(np.argmax(bad))
            raise CalendarArbitrageError(
                f"total variance decreases between T={a.T} and T={b.T} at y={y[k]:.6g}"
            )


def build_tiv_surface(quotes: VolQuoteGrid, dom: DiscountCurve, fgn: DiscountCurve,
                      spot: float, grid: TivGridSpec | None = None) -> TivSurface:
    """Build the total implied variance surface from raw quotes.

    Quote expiries become slices whose spline passes through every quote, so
    the surface reproduces ``vol**2 * T`` at each quote node. With ``grid``
    given, extra slices are inserted every ``grid.slice_spacing`` years and each
    slice receives ``grid.n_points`` nodes spanning ``grid.stdev_span`` ATM
    standard deviations around the forward.
    """
    if spot <= 0.0:
        raise ValueError("spot must be positive")
    base = []
    for T, K, vol in zip(quotes.expiries, quotes.strikes, quotes.vols):
        y = np.log(K / forward(spot, dom, fgn, T))
        w = vol * vol * T
        base.append(_Slice(float(T), y, w, _slice_spline(y, w)))
    _check_calendar(base)
    if grid is None:
        return TivSurface(spot, dom, fgn, base)

    qt = quotes.expiries
    times = [t for t in np.arange(1, int(qt[-1] / grid.slice_spacing) + 2) * grid.slice_spacing
             if qt[0] - _TIME_TOL <= t <= qt[-1] + _TIME_TOL]
    times = np.unique(np.concatenate([qt, np.round(times, 12)]))
    # drop grid times that duplicate a quote expiry up to rounding
    times = times[np.concatenate([[True], np.diff(times) > 1e-9])]
    raw = TivSurface(spot, dom, fgn, base)
    slices = []
    for T in times:
        T = float(T)
        span = grid.stdev_span * raw.atm_vol(T) * np.sqrt(T)
        ygrid = np.linspace(-span, span, grid.n_points) if grid.n_points > 1 else np.zeros(1)
        q = np.flatnonzero(np.abs(qt - T) <= 1e-9)
        if q.size:
            qs = base[int(q[0])]
            gap = 0.25 * (2 * span / max(grid.n_points - 1, 1))
            y = _merge_nodes(qs.y, ygrid, gap)
            w = qs.eval(y)[0]
            on_quote = np.isin(y, qs.y)
            w[on_quote] = qs.w[np.searchsorted(qs.y, y[on_quote])]
        else:
            y = ygrid
            w = raw.eval(y, T)[0]
        slices.append(_Slice(T, y, w, _slice_spline(y, w)))
    _check_calendar(slices)
    return TivSurface(spot, dom, fgn, slices)


# --- CSV ingestion -------------------------------------------------------------

def _read_rows(path, columns):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: missing header")
        missing = [c for c in columns if c not in reader.fieldnames]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        rows = [[float(r[c]) for c in columns] for r in reader]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return np.array(rows)


def read_curve_csv(path) -> DiscountCurve:
    data = _read_rows(path, ["tenor", "df"])
    return DiscountCurve(data[:, 0], data[:, 1])


def read_quotes_csv(path) -> VolQuoteGrid:
    data = _read_rows(path, ["expiry", "strike", "vol"])
    data = data[np.lexsort((data[:, 1], data[:, 0]))]
    expiries, start = np.unique(data[:, 0], return_index=True)
    bounds = list(start[1:]) + [len(data)]
    strikes = tuple(data[a:b, 1] for a, b in zip(start, bounds))
    vols = tuple(data[a:b, 2] for a, b in zip(start, bounds))
    return VolQuoteGrid(expiries, strikes, vols)


def write_curve_csv(path, curve: DiscountCurve):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["tenor", "df"])
        for t, p in zip(curve.tenors[1:], curve.dfs[1:]):
            w.writerow([repr(float(t)), repr(float(p))])


def write_quotes_csv(path, quotes: VolQuoteGrid):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["expiry", "strike", "vol"])
        for T, ks, vs in zip(quotes.expiries, quotes.strikes, quotes.vols):
            for k, v in zip(ks, vs):
                w.writerow([repr(float(T)), repr(float(k)), repr(float(v))])
