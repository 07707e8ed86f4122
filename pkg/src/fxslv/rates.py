"""One-factor Gaussian short rate (G1++): ``r_t = x_t + phi_t`` with
``dx_t = -a_t x_t dt + sigma_t dW_t`` and piecewise-constant ``a``, ``sigma``.

The shift ``phi`` is fitted to a discount curve through the closed-form bond
price

    P(t, T) = exp(-int_t^T phi - x_t b(t, T) + 1/2 int_t^T sigma_v^2 b(v, T)^2 dv),

with ``b(t, T) = int_t^T exp(-int_t^v a) dv``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .marketdata import DiscountCurve

_GL_X, _GL_W = np.polynomial.legendre.leggauss(32)


@dataclass(frozen=True)
class G1ppParams:
    """Piecewise-constant G1++ parameters for one currency.

    ``starts[k]`` is the start of segment ``k``; the last segment extends to
    infinity. ``curve`` is attached by :func:`fit_shift`.
    """

    starts: np.ndarray
    a: np.ndarray
    sigma: np.ndarray
    curve: DiscountCurve | None = None

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.starts, dtype=float))
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        sig = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if not (s.size == a.size == sig.size) or s.size == 0:
            raise ValueError("starts, a and sigma must have equal non-zero length")
        if s[0] != 0.0 or np.any(np.diff(s) <= 0.0):
            raise ValueError("segment starts must begin at 0 and increase")
        if np.any(sig < 0.0):
            raise ValueError("G1++ volatility must be non-negative")
        object.__setattr__(self, "starts", s)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "sigma", sig)

    @classmethod
    def constant(cls, a: float, sigma: float, curve: DiscountCurve | None = None):
        p = cls(np.zeros(1), np.array([a]), np.array([sigma]))
        return fit_shift(p, curve) if curve is not None else p

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all(self.sigma == 0.0))

    def seg_index(self, t):
        return np.clip(np.searchsorted(self.starts, t, side="right") - 1, 0, self.starts.size - 1)

    def a_at(self, t):
        return self.a[self.seg_index(t)]

    def sigma_at(self, t):
        return self.sigma[self.seg_index(t)]

    def pieces(self, t, T):
        """Split ``[t, T]`` on segment boundaries -> list of (lo, hi, a, sigma)."""
        inner = self.starts[(self.starts > t) & (self.starts < T)]
        edges = np.concatenate([[t], inner, [T]])
        out = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            k = int(self.seg_index(lo))
            out.append((float(lo), float(hi), float(self.a[k]), float(self.sigma[k])))
        return out

    # shift function --------------------------------------------------------
    def _need_curve(self):
        if self.curve is None:
            raise ValueError("shift not fitted; call fit_shift first")
        return self.curve

    def phi(self, t):
        """Shift ``phi_t = f(0, t) + int_0^t sigma_v^2 b(v, t) exp(-int_v^t a) dv``."""
        curve = self._need_curve()
        t = np.asarray(t, dtype=float)
        psi = np.vectorize(lambda s: _convexity_rate(self, s))(t)
        return curve.fwd_rate(t) + psi

    def phi_integral(self, t):
        """``int_0^t phi_s ds = -log P(0, t) + 1/2 V(0, t)``."""
        curve = self._need_curve()
        t = np.asarray(t, dtype=float)
        v = np.vectorize(lambda s: integrated_variance(self, 0.0, s))(t)
        return -curve.log_df(t) + 0.5 * v


def _decay(a, length):
    """``int_0^length exp(-a u) du``."""
    if a == 0.0:
        return length
    return -np.expm1(-a * length) / a


def _b_scalar(params, t, T):
    b = 0.0
    damp = 0.0  # int_t^lo a
    for lo, hi, a, _ in params.pieces(t, T):
        b += np.exp(-damp) * _decay(a, hi - lo)
        damp += a * (hi - lo)
    return b


def b_factor(params: G1ppParams, t, T):
    """``b(t, T) = int_t^T exp(-int_t^v a_z dz) dv``, composed across segments."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr > T + 1e-14):
        raise ValueError("b_factor requires t <= T")
    if t_arr.ndim == 0:
        return _b_scalar(params, float(t_arr), float(T))
    return np.array([_b_scalar(params, float(s), float(T)) for s in t_arr.ravel()]).reshape(t_arr.shape)


def _gl_nodes(lo, hi, a):
    """Gauss-Legendre nodes/weights on [lo, hi], subdivided so a*h <= 1."""
    length = hi - lo
    n = max(1, int(np.ceil(abs(a) * length)), int(np.ceil(length / 5.0)))
    edges = np.linspace(lo, hi, n + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])[:, None]
    half = 0.5 * np.diff(edges)[:, None]
    return (mid + half * _GL_X).ravel(), (half * _GL_W).ravel()


def integrated_variance(params: G1ppParams, t: float, T: float) -> float:
    """``V(t, T) = int_t^T sigma_v^2 b(v, T)^2 dv``."""
    if T < t:
        raise ValueError("integrated_variance requires t <= T")
    total = 0.0
    for lo, hi, a, sig in params.pieces(t, T):
        if sig == 0.0 or hi <= lo:
            continue
        bq = _b_scalar(params, hi, T)
        v, w = _gl_nodes(lo, hi, a)
        u = hi - v
        b = (-np.expm1(-a * u) / a if a != 0.0 else u) + np.exp(-a * u) * bq
        total += sig * sig * float(np.dot(w, b * b))
    return total


def _int_a(params, t, T):
    return sum(a * (hi - lo) for lo, hi, a, _ in params.pieces(t, T))


def _convexity_rate(params, T):
    """``int_0^T sigma_v^2 b(v, T) exp(-int_v^T a) dv`` (= d/dT of V(0, T) / 2)."""
    total = 0.0
    for lo, hi, a, sig in params.pieces(0.0, T):
        if sig == 0.0 or hi <= lo:
            continue
        bq = _b_scalar(params, hi, T)
        damp_q = np.exp(-_int_a(params, hi, T))
        v, w = _gl_nodes(lo, hi, a)
        u = hi - v
        b = (-np.expm1(-a * u) / a if a != 0.0 else u) + np.exp(-a * u) * bq
        total += sig * sig * float(np.dot(w, b * np.exp(-a * u) * damp_q))
    return total


def fit_shift(params: G1ppParams, curve: DiscountCurve, horizon: float | None = None) -> G1ppParams:
    """Attach ``curve`` so that model bond prices at ``x = 0`` reprice it."""
    if horizon is not None and horizon > curve.horizon + 1e-12:
        raise ValueError(f"curve covers {curve.horizon}y, horizon {horizon}y requested")
    return replace(params, curve=curve)


def model_bond(params: G1ppParams, t: float, T: float, x_t):
    """Zero-coupon bond ``P(t, T)`` given the factor value ``x_t``."""
    if t > T:
        raise ValueError("model_bond requires t <= T")
    if t == T:
        return np.ones_like(np.asarray(x_t, dtype=float)) if np.ndim(x_t) else 1.0
    shift = float(params.phi_integral(T) - params.phi_integral(t))
    b = _b_scalar(params, t, T)
    v = integrated_variance(params, t, T)
    return np.exp(-shift - np.asarray(x_t, dtype=float) * b + 0.5 * v)


def discount_identity_residual(params: G1ppParams, times, x_path, dW):
    """Discrete residual of the stochastic discount identity.

    Compares ``exp(-int_t^T r ds)`` against
    ``P(t, T) exp(-int sigma b dW - 1/2 int sigma^2 b^2 dv)`` on a simulated
    path. ``x_path`` holds the factor on ``times`` (last axis) and ``dW`` the
    Brownian increments that generated it. The ``phi`` and ``sigma^2 b^2``
    integrals are exact; the ``x`` integral is a left Riemann sum and the
    stochastic integral a left Ito sum, so the residual vanishes as the step
    shrinks.
    """
    times = np.asarray(times, dtype=float)
    x_path = np.asarray(x_path, dtype=float)
    dW = np.asarray(dW, dtype=float)
    n = times.size - 1
    if n < 1 or x_path.shape[-1] != n + 1 or dW.shape[-1] != n:
        raise ValueError("x_path needs len(times) points and dW len(times) - 1 increments")
    t, T = float(times[0]), float(times[-1])
    dt = np.diff(times)
    shift = float(params.phi_integral(T) - params.phi_integral(t))
    lhs = np.exp(-(x_path[..., :-1] @ dt) - shift)
    sb = params.sigma_at(times[:-1]) * b_factor(params, times[:-1], T)
    stoch = dW @ sb
    rhs = model_bond(params, t, T, x_path[..., 0]) * np.exp(-stoch - 0.5 * integrated_variance(params, t, T))
    return lhs - rhs
