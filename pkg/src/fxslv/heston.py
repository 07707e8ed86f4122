"""Heston variance dynamics with piecewise-constant coefficients.

Pricing uses the characteristic function of ``log(S_T / F_T)``; the Riccati
system is integrated backwards from maturity one constant-coefficient interval
at a time in the numerically stable "little trap" form. Calibration bootstraps
the coefficients slice by slice with a penalised simplex search.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .analytic import black
from .marketdata import DiscountCurve, TivSurface, forward

_TIME_TOL = 1e-12


@dataclass(frozen=True)
class HestonParams:
    """``v0``, ``rho`` and per-slice ``kappa``, ``theta``, ``xi``.

    Slice ``i`` covers ``(times[i-1], times[i]]`` (``times[-1] = 0``); the last
    slice extends beyond its end time.
    """

    v0: float
    rho: float
    times: np.ndarray
    kappa: np.ndarray
    theta: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        arrs = [np.atleast_1d(np.asarray(getattr(self, n), dtype=float))
                for n in ("times", "kappa", "theta", "xi")]
        if len({a.size for a in arrs}) != 1 or arrs[0].size == 0:
            raise ValueError("times, kappa, theta and xi must share a non-zero length")
        times, kappa, theta, xi = arrs
        if np.any(times <= 0.0) or np.any(np.diff(times) <= 0.0):
            raise ValueError("slice times must be positive and increasing")
        if self.v0 <= 0.0 or not -1.0 < self.rho < 1.0:
            raise ValueError("need v0 > 0 and -1 < rho < 1")
        if np.any(kappa <= 0.0) or np.any(theta <= 0.0) or np.any(xi < 0.0):
            raise ValueError("kappa, theta must be positive and xi non-negative")
        for n, a in zip(("times", "kappa", "theta", "xi"), arrs):
            object.__setattr__(self, n, a)

    @classmethod
    def constant(cls, v0, rho, kappa, theta, xi, horizon=1.0):
        return cls(v0, rho, [horizon], [kappa], [theta], [xi])

    def index(self, t):
        """Slice index for a step starting at ``t``."""
        i = int(np.searchsorted(self.times, t + _TIME_TOL, side="left"))
        return min(i, self.times.size - 1)

    def feller_margin(self):
        return 2.0 * self.kappa * self.theta - self.xi ** 2

    def truncated(self, n):
        return HestonParams(self.v0, self.rho, self.times[:n], self.kappa[:n],
                            self.theta[:n], self.xi[:n])

    def intervals(self, T):
        """Constant-coefficient pieces ``(lo, hi, kappa, theta, xi)`` covering ``[0, T]``."""
        out = []
        lo = 0.0
        for i, end in enumerate(self.times):
            hi = T if i == self.times.size - 1 else min(end, T)
            if hi > lo:
                out.append((lo, hi, self.kappa[i], self.theta[i], self.xi[i]))
            lo = hi
            if lo >= T:
                break
        return out


def _log1p_c(z):
    """Complex ``log(1 + z)`` accurate for small ``|z|``."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < 1e-4
    series = z * (1.0 - z * (0.5 - z * (1.0 / 3.0 - 0.25 * z)))
    with np.errstate(all="ignore"):
        direct = np.log1p(z)
    return np.where(small, series, direct)


def log_cf(params: HestonParams, T: float, u):
    """``log E[exp(i u log(S_T / F_T))]`` for complex ``u``."""
    u = np.asarray(u, dtype=complex)
    a_coef = np.zeros_like(u)
    b_coef = np.zeros_like(u)
    c = u * u + 1j * u
    for lo, hi, kappa, theta, xi in reversed(params.intervals(T)):
        tau = hi - lo
        xi2 = xi * xi
        beta = kappa - params.rho * xi * 1j * u
        d = np.sqrt(beta * beta + xi2 * c)
        d = np.where(d.real < 0.0, -d, d)
        m = -c / (beta + d)
        qt = (m - b_coef) / (beta + d - xi2 * b_coef)
        e = np.exp(-d * tau)
        new_b = (m - (beta + d) * qt * e) / (1.0 - xi2 * qt * e)
        if xi2 > 0.0:
            log_ratio = (_log1p_c(-xi2 * qt * e) - _log1p_c(-xi2 * qt)) / xi2
        else:
            log_ratio = -qt * e + qt
        a_coef = a_coef + kappa * theta * (m * tau - 2.0 * log_ratio)
        b_coef = new_b
    return a_coef + b_coef * params.v0


def _lewis_integrand(params, T, k):
    def f(u):
        val = np.exp(log_cf(params, T, u - 0.5j) + 1j * u * k)
        return float(val.real) / (u * u + 0.25)
    return f


def heston_price_cf(params: HestonParams, dom: DiscountCurve, fgn: DiscountCurve, spot, K, T,
                    kind="call", epsabs=1e-13):
    """European option price from the characteristic function.

    Calls use the single-integral Lewis representation; puts use the
    two-probability Gil-Pelaez form, so put-call parity is a genuine check
    between two quadratures.
    """
    fwd = float(forward(spot, dom, fgn, T))
    pd = float(dom.df(T))
    K = float(K)
    if kind == "call":
        k = np.log(fwd / K)
        integral, err = quad(_lewis_integrand(params, T, k), 0.0, np.inf,
                             epsabs=epsabs, epsrel=1e-12, limit=500)
        if not np.isfinite(integral):
            raise RuntimeError("Fourier integral did not converge")
        return pd * (fwd - np.sqrt(fwd * K) / np.pi * integral)
    if kind == "put":
        x = np.log(K / fwd)

        def prob(shift, norm):
            def g(u):
                val = np.exp(log_cf(params, T, u - shift) - 1j * u * x) / (1j * u) / norm
                return float(val.real)
            val, _ = quad(g, 0.0, np.inf, epsabs=epsabs, epsrel=1e-12, limit=500)
            return 0.5 + val / np.pi

        p1 = prob(1j, 1.0)
        p2 = prob(0.0, 1.0)
        return pd * (K * (1.0 - p2) - fwd * (1.0 - p1))
    raise ValueError("kind must be 'call' or 'put'")


def _panel_nodes(upper, n_panels=16, order=24):
    # panels graded towards the origin, where 1 / (u^2 + 1/4) is sharply peaked
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.concatenate([[0.0], np.geomspace(0.25, upper, n_panels)])
    mid = 0.5 * (edges[1:] + edges[:-1])[:, None]
    half = 0.5 * np.diff(edges)[:, None]
    return (mid + half * x).ravel(), (half * w).ravel()


def heston_prices_fast(params: HestonParams, fwd, pd, strikes, T, total_var_hint):
    """Vectorised Lewis prices on a fixed Gauss-Legendre grid (calibration inner loop)."""
    strikes = np.asarray(strikes, dtype=float)
    upper = np.sqrt(80.0 / max(total_var_hint, 1e-5)) + 20.0
    # heavy-tailed cases decay only exponentially in u: extend until negligible
    for _ in range(12):
        if abs(np.exp(log_cf(params, T, np.array([upper - 0.5j])))[0]) < 1e-14:
            break
        upper *= 2.0
    u, wts = _panel_nodes(upper)
    cf = np.exp(log_cf(params, T, u - 0.5j))
    k = np.log(fwd / strikes)
    vals = (np.exp(1j * np.outer(k, u)) * cf).real / (u * u + 0.25)
    return pd * (fwd - np.sqrt(fwd * strikes) / np.pi * (vals @ wts))


@dataclass(frozen=True)
class SimplexConfig:
    max_iter: int = 2000
    ftol: float = 1e-14
    xtol: float = 1e-9
    scale: float = 0.1
    penalty: float = 1e3


def nelder_mead(objective, x0, cfg: SimplexConfig = SimplexConfig()):
    """Minimise ``objective`` with the Nelder-Mead simplex; returns ``(x, f, iterations)``.

    Stops when both the spread of objective values and the simplex diameter
    fall below tolerance, or after ``max_iter`` iterations with the best point.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    pts = np.vstack([x0] + [x0 + cfg.scale * np.eye(n)[i] for i in range(n)])
    vals = np.array([objective(p) for p in pts])
    if not np.isfinite(vals[0]):
        raise ValueError("objective is not finite at the starting point")
    it = 0
    for it in range(1, cfg.max_iter + 1):
        order = np.argsort(vals, kind="stable")
        pts, vals = pts[order], vals[order]
        diameter = np.max(np.abs(pts[1:] - pts[0]))
        if vals[-1] - vals[0] <= cfg.ftol and diameter <= cfg.xtol:
            break
        centroid = pts[:-1].mean(axis=0)
        worst = pts[-1]
        xr = centroid + (centroid - worst)
        fr = objective(xr)
        if fr < vals[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = objective(xe)
            pts[-1], vals[-1] = (xe, fe) if fe < fr else (xr, fr)
            continue
        if fr < vals[-2]:
            pts[-1], vals[-1] = xr, fr
            continue
        if fr < vals[-1]:
            xc = centroid + 0.5 * (xr - centroid)
        else:
            xc = centroid + 0.5 * (worst - centroid)
        fc = objective(xc)
        if fc < min(fr, vals[-1]):
            pts[-1], vals[-1] = xc, fc
            continue
        pts[1:] = pts[0] + 0.5 * (pts[1:] - pts[0])
        vals[1:] = [objective(p) for p in pts[1:]]
    best = int(np.argmin(vals))
    return pts[best], float(vals[best]), it


@dataclass
class HestonQuotes:
    """Call quotes on one slice: strikes and market prices."""

    T: float
    strikes: np.ndarray
    prices: np.ndarray
    fwd: float
    pd: float
    total_var: float


def quotes_from_surface(tiv: TivSurface, times, n_strikes=7, stdev_span=1.0):
    out = []
    for T in times:
        fwd = float(tiv.forward(T))
        pd = float(tiv.dom.df(T))
        w_atm = float(tiv.total_variance(0.0, T))
        y = np.linspace(-stdev_span, stdev_span, n_strikes) * np.sqrt(w_atm)
        strikes = fwd * np.exp(y)
        vols = tiv.implied_vol(strikes, T)
        out.append(HestonQuotes(float(T), strikes, black(fwd, strikes, vols, T, pd), fwd, pd, w_atm))
    return out


@dataclass
class HestonFit:
    params: HestonParams
    slice_errors: list = field(default_factory=list)
    feller_projected: list = field(default_factory=list)


# box for the log-scale search variables: kappa, theta, xi, v0
BOUNDS = {"kappa": (1e-3, 20.0), "theta": (1e-5, 1.0), "xi": (1e-4, 3.0), "v0": (1e-5, 1.0)}


def _to_box(z, name):
    lo, hi = BOUNDS[name]
    return lo * (hi / lo) ** (0.5 * (1.0 + np.tanh(0.5 * z)))


def _from_box(x, name):
    lo, hi = BOUNDS[name]
    frac = np.clip(np.log(x / lo) / np.log(hi / lo), 1e-9, 1.0 - 1e-9)
    return 2.0 * np.arctanh(2.0 * frac - 1.0)


_NAMES = ("kappa", "theta", "xi", "v0")


def _unpack_full(z):
    kappa, theta, xi, v0 = (_to_box(z[i], n) for i, n in enumerate(_NAMES))
    return kappa, theta, xi, float(np.tanh(z[4])), v0


def _unpack_slice(z):
    return tuple(_to_box(z[i], n) for i, n in enumerate(_NAMES[:3]))


def calibrate_heston(quotes, cfg: SimplexConfig = SimplexConfig(), restarts=2) -> HestonFit:
    """Bootstrap Heston coefficients over the slices of ``quotes``.

    The first slice fits all five parameters; each later slice fits
    ``(kappa, theta, xi)`` on its own interval with earlier slices frozen.
    The objective is the sum of squared relative price errors plus a Feller
    penalty; a violating optimum is projected onto the Feller boundary.
    """
    if not quotes:
        raise ValueError("no quote slices")
    times = [q.T for q in quotes]
    fit = HestonFit(None)
    fixed = {"kappa": [], "theta": [], "xi": []}
    v0 = rho = None

    def objective_for(q, build):
        def f(z):
            try:
                params, (kappa, theta, xi) = build(z)
            except ValueError:
                return np.inf
            model = heston_prices_fast(params, q.fwd, q.pd, q.strikes, q.T, q.total_var)
            err = np.sum(((model - q.prices) / q.prices) ** 2)
            viol = max(0.0, xi * xi - 2.0 * kappa * theta)
            val = err + cfg.penalty * viol * viol
            return val if np.isfinite(val) else np.inf
        return f

    for j, q in enumerate(quotes):
        var0 = q.total_var / q.T
        if j == 0:
            def build(z, j=j):
                kappa, theta, xi, r, v = _unpack_full(z)
                p = HestonParams(v, r, times[:1], [kappa], [theta], [xi])
                return p, (kappa, theta, xi)
            start = (1.0, var0, 0.5 * np.sqrt(2.0 * var0), var0)
            x0 = np.array([_from_box(v, n) for v, n in zip(start, _NAMES)] + [np.arctanh(-0.3)])
        else:
            def build(z, j=j):
                kappa, theta, xi = _unpack_slice(z)
                p = HestonParams(v0, rho, times[:j + 1], fixed["kappa"] + [kappa],
                                 fixed["theta"] + [theta], fixed["xi"] + [xi])
                return p, (kappa, theta, xi)
            x0 = np.array([_from_box(fixed[n][-1], n) for n in _NAMES[:3]])
        obj = objective_for(q, build)
        best_x, best_f, _ = nelder_mead(obj, x0, cfg)
        for _ in range(restarts):
            best_x, best_f, _ = nelder_mead(obj, best_x, cfg)
        if j == 0:
            kappa, theta, xi, rho, v0 = _unpack_full(best_x)
        else:
            kappa, theta, xi = _unpack_slice(best_x)
        projected = False
        if xi * xi >= 2.0 * kappa * theta:
            xi = np.sqrt(2.0 * kappa * theta) * (1.0 - 1e-6)
            projected = True
        fixed["kappa"].append(float(kappa))
        fixed["theta"].append(float(theta))
        fixed["xi"].append(float(xi))
        fit.slice_errors.append(best_f)
        fit.feller_projected.append(projected)
    fit.params = HestonParams(v0, rho, times, fixed["kappa"], fixed["theta"], fixed["xi"])
    return fit
