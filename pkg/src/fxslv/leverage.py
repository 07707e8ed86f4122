"""Leverage-function calibration for the stochastic local volatility models.

The leverage ``L`` satisfies ``sigma_LV(K, t)^2 = L(K, t)^2 E[U_t | S_t = K]``.
The conditional expectation is estimated from simulated ``(S, U)`` pairs by
binning or by least-squares regression, slice by slice.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import CorrelationSpec, McConfig, ModelSpec, PathBundle, Simulator, Variant, simulate
from .heston import HestonParams
from .marketdata import DiscountCurve
from .rates import G1ppParams
from .surfaces import SliceSurface, SurfaceKind

EPS_FRACTION = 1e-6


@dataclass
class BinningFit:
    s_mean: np.ndarray
    u_mean: np.ndarray
    u_se: np.ndarray

    def __call__(self, s):
        return np.interp(s, self.s_mean, self.u_mean)

    def se(self, s):
        return np.interp(s, self.s_mean, self.u_se)


def binning_fit(S, U, M=20) -> BinningFit:
    """Bin the pairs sorted by ``S`` into ``M`` equal-count bins; the last bin takes the remainder."""
    S, U = np.asarray(S, dtype=float).ravel(), np.asarray(U, dtype=float).ravel()
    n = S.size
    if M < 2:
        raise ValueError("need at least two bins")
    if M > n:
        raise ValueError(f"{M} bins requested for {n} paths")
    order = np.argsort(S, kind="stable")
    size = n // M
    edges = np.append(np.arange(M) * size, n)
    s_sorted, u_sorted = S[order], U[order]
    s_mean = np.array([s_sorted[a:b].mean() for a, b in zip(edges[:-1], edges[1:])])
    u_mean = np.array([u_sorted[a:b].mean() for a, b in zip(edges[:-1], edges[1:])])
    u_se = np.array([u_sorted[a:b].std(ddof=1) / np.sqrt(b - a) if b - a > 1 else 0.0
                     for a, b in zip(edges[:-1], edges[1:])])
    return BinningFit(s_mean, u_mean, u_se)


class PolyBasis:
    """Monomials in ``S`` up to ``degree``, evaluated in a centred and scaled variable.

    The span equals that of ``1, S, ..., S^degree``; the shift only keeps the
    normal equations well conditioned for higher degrees.
    """

    def __init__(self, S, degree=2):
        if degree < 1:
            raise ValueError("basis degree must be at least 1")
        S = np.asarray(S, dtype=float)
        self.degree = int(degree)
        self.center = float(S.mean())
        spread = float(S.std())
        self.scale = spread if spread > 0.0 else 1.0

    def __call__(self, s):
        z = (np.atleast_1d(np.asarray(s, dtype=float)) - self.center) / self.scale
        return z[:, None] ** np.arange(self.degree + 1)

    def monomial(self, beta):
        """Coefficients of ``1, S, S^2, ...`` for the basis coefficients ``beta``."""
        lo, hi = self.center - self.scale, self.center + self.scale
        poly = np.polynomial.Polynomial(beta, domain=[lo, hi], window=[-1.0, 1.0])
        out = np.zeros(self.degree + 1)
        c = poly.convert().coef
        out[:c.size] = c
        return out


@dataclass
class RegressionFit:
    """Least-squares fit of ``U`` on a polynomial basis in ``S`` with a pair-clustered covariance."""

    beta: np.ndarray
    cov: np.ndarray
    basis: PolyBasis
    u_range: tuple
    ridge: bool = False

    @property
    def coef(self):
        return self.basis.monomial(self.beta)

    def design(self, s):
        return self.basis(s)

    def predict(self, s):
        return self.design(s) @ self.beta

    def __call__(self, s):
        return np.clip(self.predict(s), *self.u_range)

    def se(self, s):
        X = self.design(s)
        return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", X, self.cov, X), 0.0))


def _rate_columns(xd, xf):
    return np.column_stack([xd, xd * xd, xf, xf * xf])


def _least_squares(X, U, paired):
    n, p = X.shape
    if n < p:
        raise ValueError(f"{n} observations for {p} regressors")
    scale = np.sqrt(np.sum(X * X, axis=0))
    scale[scale == 0.0] = 1.0
    Xs = X / scale
    gram = Xs.T @ Xs
    rhs = Xs.T @ U
    ridge = False
    if np.linalg.cond(gram) > 1e12:
        gram = gram + 1e-10 * np.trace(gram) * np.eye(p)
        ridge = True
    inv = np.linalg.inv(gram)
    beta = inv @ rhs
    resid = U - Xs @ beta
    score = Xs * resid[:, None]
    if paired and n % 2 == 0:
        half = n // 2
        score = score[:half] + score[half:]
    meat = score.T @ score
    cov = inv @ meat @ inv
    return beta / scale, cov / np.outer(scale, scale), ridge


def regression_fit(S, U, paired=True, degree=2) -> RegressionFit:
    """``U ~ a1 + a2 S + ... + a_{d+1} S^d``; predictions are clamped to the observed ``U`` range."""
    S, U = np.asarray(S, dtype=float).ravel(), np.asarray(U, dtype=float).ravel()
    if np.unique(S).size < degree + 1:
        raise ValueError(f"need at least {degree + 1} distinct S values")
    basis = PolyBasis(S, degree)
    beta, cov, ridge = _least_squares(basis(S), U, paired)
    return RegressionFit(beta, cov, basis, (float(U.min()), float(U.max())), ridge)


@dataclass
class Regression3dFit(RegressionFit):
    """``U`` on the ``S`` polynomial plus ``xd, xd^2, xf, xf^2``.

    ``moments`` hold the regressions of the four rate columns on the ``S``
    basis, used to condition on ``S`` alone.
    """

    moments: np.ndarray | None = None
    marginal: RegressionFit | None = None

    @property
    def coef(self):
        k = self.basis.degree + 1
        return np.concatenate([self.basis.monomial(self.beta[:k]), self.beta[k:]])

    def design(self, s, xd=0.0, xf=0.0):
        s, xd, xf = np.broadcast_arrays(*(np.atleast_1d(np.asarray(a, dtype=float)) for a in (s, xd, xf)))
        return np.column_stack([self.basis(s), _rate_columns(xd, xf)])

    def predict(self, s, xd=0.0, xf=0.0):
        return self.design(s, xd, xf) @ self.beta

    def __call__(self, s, xd=0.0, xf=0.0):
        return np.clip(self.predict(s, xd, xf), *self.u_range)

    def se(self, s, xd=0.0, xf=0.0):
        X = self.design(s, xd, xf)
        return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", X, self.cov, X), 0.0))

    def conditional_on_s(self, s):
        """``E[U | S = s]`` via the tower property, rate moments replaced by their regressions on ``S``."""
        B = self.basis(s)
        k = self.basis.degree + 1
        rates = B @ self.moments
        return np.clip(B @ self.beta[:k] + rates @ self.beta[k:], *self.u_range)

    def se_on_s(self, s):
        return self.marginal.se(s)


def regression_fit_3d(S, xd, xf, U, paired=True, degree=2) -> Regression3dFit:
    S, xd, xf, U = (np.asarray(a, dtype=float).ravel() for a in (S, xd, xf, U))
    if S.size < degree + 5:
        raise ValueError(f"{S.size} observations for {degree + 5} regressors")
    basis = PolyBasis(S, degree)
    B = basis(S)
    R = _rate_columns(xd, xf)
    beta, cov, ridge = _least_squares(np.column_stack([B, R]), U, paired)
    moments = np.column_stack([_least_squares(B, R[:, i], False)[0] for i in range(4)])
    return Regression3dFit(beta, cov, basis, (float(U.min()), float(U.max())), ridge,
                           moments, regression_fit(S, U, paired, degree))


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str = "regression"
    bins: int = 20
    degree: int = 2

    def __post_init__(self):
        if self.kind not in ("binning", "regression", "regression3d"):
            raise ValueError(f"unknown estimator {self.kind!r}")
        if self.degree < 1 or self.bins < 2:
            raise ValueError("need degree >= 1 and at least two bins")


def conditional_variance(state, K, estimator: EstimatorSpec):
    """``(E[U | S = K], standard error)`` from a captured slice."""
    if estimator.kind == "binning":
        fit = binning_fit(state["S"], state["U"], estimator.bins)
        return fit(K), fit.se(K)
    if estimator.kind == "regression":
        fit = regression_fit(state["S"], state["U"], degree=estimator.degree)
        return fit(K), fit.se(K)
    fit = regression_fit_3d(state["S"], state["xd"], state["xf"], state["U"], degree=estimator.degree)
    return fit.conditional_on_s(K), fit.se_on_s(K)


@dataclass
class LeverageCalibration:
    surface: SliceSurface
    floored: list = field(default_factory=list)
    cond_se: list = field(default_factory=list)


def _leverage_slice(lv_values, eu, se, v0):
    eps = EPS_FRACTION * v0
    floored = eu <= eps
    eu = np.maximum(eu, eps)
    lev = lv_values / np.sqrt(eu)
    return lev, 0.5 * lev * se / eu, int(floored.sum())


def _seed_surface(lv: SliceSurface, heston: HestonParams):
    seed = lv.values[0] / np.sqrt(heston.v0)
    return SliceSurface(SurfaceKind.LEVERAGE, [0.0], [lv.strikes[0]], [seed])


def calibrate_leverage_slv2dr(lv: SliceSurface, heston: HestonParams, dom: DiscountCurve,
                              fgn: DiscountCurve, spot, cfg: McConfig,
                              estimator: EstimatorSpec = EstimatorSpec(), corr=None,
                              progress=None) -> LeverageCalibration:
    """Leverage under deterministic rates; paths are advanced slice to slice and reused.

    The slice at ``t = 0`` is ``sigma_LV / sqrt(v0)`` on the first local-vol
    slice's strikes.
    """
    if estimator.kind == "regression3d":
        raise ValueError("the three-regressor estimator needs stochastic rates")
    corr = corr or CorrelationSpec()
    lev = _seed_surface(lv, heston)
    out = LeverageCalibration(lev, [0], [np.zeros_like(lev.values[0])])
    model = ModelSpec(Variant.SLV2DR_DRN, spot, dom, fgn, heston=heston, surface=lev, corr=corr)
    sim = Simulator(model, cfg)
    try:
        for j, (t, K, sig) in enumerate(zip(lv.times, lv.strikes, lv.values)):
            model.surface = lev
            bundle = sim.advance(float(t), [float(t)], bundle=PathBundle(cfg.n_paths))
            eu, se = conditional_variance(bundle.at(t), K, estimator)
            vals, errs, nf = _leverage_slice(sig, eu, se, heston.v0)
            lev = lev.with_slice(float(t), K, vals, errs)
            out.floored.append(nf)
            out.cond_se.append(se)
            if progress is not None:
                progress(j, float(t))
    finally:
        sim.close()
    out.surface = lev
    return out


def calibrate_leverage_slv2sr(lv: SliceSurface, heston: HestonParams, dom: G1ppParams,
                              fgn: G1ppParams, corr: CorrelationSpec, spot, cfg: McConfig,
                              degree=2, progress=None) -> LeverageCalibration:
    """Leverage under two G1++ rates; slice ``t_j`` re-simulates the T-forward system to ``t_j``."""
    lev = _seed_surface(lv, heston)
    out = LeverageCalibration(lev, [0], [np.zeros_like(lev.values[0])])
    est = EstimatorSpec("regression3d", degree=degree)
    for j, (t, K, sig) in enumerate(zip(lv.times, lv.strikes, lv.values)):
        model = ModelSpec(Variant.SLV2SR_TFWD, spot, dom.curve, fgn.curve, dom, fgn, heston=heston,
                          surface=lev, corr=corr, horizon=float(t))
        run = McConfig(cfg.n_paths, cfg.max_dt, cfg.seed, (float(t),), cfg.workers)
        eu, se = conditional_variance(simulate(model, run).at(t), K, est)
        vals, errs, nf = _leverage_slice(sig, eu, se, heston.v0)
        lev = lev.with_slice(float(t), K, vals, errs)
        out.floored.append(nf)
        out.cond_se.append(se)
        if progress is not None:
            progress(j, float(t))
    out.surface = lev
    return out
