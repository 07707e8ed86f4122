"""Correlated Euler simulation of the FX model family.

Variants
--------
LV2SR_TFWD   local vol FX, two G1++ rates, domestic T-forward measure
BS2SR_TFWD   as above with a flat FX vol
HESTON_DRN   Heston FX, deterministic rates, domestic risk-neutral measure
SLV2DR_DRN   leverage times sqrt(U), deterministic rates, risk-neutral measure
SLV2SR_TFWD  leverage times sqrt(U), two G1++ rates, T-forward measure

Every path has an antithetic mate driven by the negated normals; arrays hold
the ``N`` originals followed by the ``N`` mates. Normals come from Philox
streams keyed by ``(seed, block)`` with a fixed block of paths per stream, so
path ``i`` sees the same numbers whatever ``N`` or the worker count.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .heston import HestonParams
from .marketdata import DiscountCurve
from .rates import G1ppParams, _b_scalar
from .surfaces import SliceSurface

BLOCK = 8192
DRIVERS = ("S", "U", "d", "f")
S_FLOOR = 1e-12
_TIME_TOL = 1e-12


class Variant(str, Enum):
    LV2SR_TFWD = "LV2SR_TFWD"
    HESTON_DRN = "HESTON_DRN"
    SLV2DR_DRN = "SLV2DR_DRN"
    SLV2SR_TFWD = "SLV2SR_TFWD"
    BS2SR_TFWD = "BS2SR_TFWD"

    @property
    def drivers(self):
        return {
            Variant.LV2SR_TFWD: ("S", "d", "f"),
            Variant.BS2SR_TFWD: ("S", "d", "f"),
            Variant.HESTON_DRN: ("S", "U"),
            Variant.SLV2DR_DRN: ("S", "U"),
            Variant.SLV2SR_TFWD: ("S", "U", "d", "f"),
        }[self]

    @property
    def t_forward(self):
        return self in (Variant.LV2SR_TFWD, Variant.BS2SR_TFWD, Variant.SLV2SR_TFWD)

    @property
    def stochastic_variance(self):
        return self in (Variant.HESTON_DRN, Variant.SLV2DR_DRN, Variant.SLV2SR_TFWD)


def chol(matrix, tol=1e-12):
    """Lower Cholesky factor of a correlation matrix, tolerating singular PSD input."""
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("correlation matrix must be square")
    if not np.allclose(a, a.T, atol=1e-14) or not np.allclose(np.diag(a), 1.0, atol=1e-14):
        raise ValueError("correlation matrix must be symmetric with unit diagonal")
    n = a.shape[0]
    low = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - low[j, :j] @ low[j, :j]
        if pivot < -tol:
            raise ValueError("correlation matrix is not positive semidefinite")
        if pivot <= tol:
            rest = a[j + 1:, j] - low[j + 1:, :j] @ low[j, :j]
            if np.any(np.abs(rest) > 1e-8):
                raise ValueError("correlation matrix is not positive semidefinite")
            continue
        low[j, j] = np.sqrt(pivot)
        low[j + 1:, j] = (a[j + 1:, j] - low[j + 1:, :j] @ low[j, :j]) / low[j, j]
    return low


@dataclass(frozen=True)
class CorrelationSpec:
    """Correlations among the drivers ``S``, ``U``, ``d`` and ``f``; unset pairs are 0."""

    rho: dict = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for key, val in dict(self.rho).items():
            a, b = key.split("_") if isinstance(key, str) else key
            if a not in DRIVERS or b not in DRIVERS or a == b:
                raise ValueError(f"bad correlation key {key!r}")
            if not -1.0 <= val <= 1.0:
                raise ValueError(f"correlation {key} outside [-1, 1]")
            clean[tuple(sorted((a, b), key=DRIVERS.index))] = float(val)
        object.__setattr__(self, "rho", clean)

    @classmethod
    def of(cls, **pairs):
        return cls(pairs)

    def get(self, a, b):
        if a == b:
            return 1.0
        return self.rho.get(tuple(sorted((a, b), key=DRIVERS.index)), 0.0)

    def matrix(self, names=DRIVERS):
        return np.array([[self.get(a, b) for b in names] for a in names])


@dataclass
class ModelSpec:
    variant: Variant
    spot: float
    dom_curve: DiscountCurve
    fgn_curve: DiscountCurve
    dom: G1ppParams | None = None
    fgn: G1ppParams | None = None
    heston: HestonParams | None = None
    surface: SliceSurface | None = None
    flat_vol: float | None = None
    corr: CorrelationSpec = field(default_factory=CorrelationSpec)
    horizon: float | None = None

    def __post_init__(self):
        self.variant = Variant(self.variant)
        v = self.variant
        if self.spot <= 0.0:
            raise ValueError("spot must be positive")
        if v.t_forward:
            if self.horizon is None or self.horizon <= 0.0:
                raise ValueError(f"{v.value} needs a positive T-forward horizon")
            for name, curve in (("dom", self.dom_curve), ("fgn", self.fgn_curve)):
                params = getattr(self, name)
                if params is None:
                    params = G1ppParams.constant(0.0, 0.0, curve)
                elif params.curve is None:
                    raise ValueError(f"{name} G1++ parameters have no fitted shift")
                setattr(self, name, params)
        if v.stochastic_variance and self.heston is None:
            raise ValueError(f"{v.value} needs Heston parameters")
        if self.heston is not None:
            key = ("S", "U")
            if key not in self.corr.rho:
                self.corr = CorrelationSpec({**self.corr.rho, key: self.heston.rho})
            elif abs(self.corr.rho[key] - self.heston.rho) > 1e-15:
                raise ValueError("S-U correlation disagrees with the Heston rho")
        if v in (Variant.LV2SR_TFWD, Variant.SLV2DR_DRN, Variant.SLV2SR_TFWD) and self.surface is None:
            raise ValueError(f"{v.value} needs a local-vol or leverage surface")
        if v is Variant.BS2SR_TFWD and (self.flat_vol is None or self.flat_vol < 0.0):
            raise ValueError("BS2SR_TFWD needs a non-negative flat_vol")
        chol(self.corr.matrix(v.drivers))


@dataclass(frozen=True)
class McConfig:
    n_paths: int
    max_dt: float = 0.01
    seed: int = 0
    capture: tuple = ()
    workers: int = 1

    def __post_init__(self):
        if self.n_paths < 1 or self.max_dt <= 0.0:
            raise ValueError("need n_paths >= 1 and max_dt > 0")
        cap = tuple(float(t) for t in self.capture)
        if any(b <= a for a, b in zip(cap, cap[1:])) or any(t < 0.0 for t in cap):
            raise ValueError("capture times must be non-negative and ascending")
        object.__setattr__(self, "capture", cap)


@dataclass
class PathBundle:
    """Captured states; ``states[t]`` maps component names to arrays over 2N paths."""

    n_pairs: int
    times: list = field(default_factory=list)
    states: dict = field(default_factory=dict)
    grid: list = field(default_factory=list)

    def at(self, t):
        for s in self.times:
            if abs(s - t) <= 1e-9:
                return self.states[s]
        raise KeyError(f"no slice captured at t={t}")


def cir_step(U, kappa, theta, xi, dt, dW, drift_adjust=0.0):
    """Full-truncation Euler step of the square-root variance."""
    up = np.maximum(U, 0.0)
    sq = np.sqrt(up)
    return U + (kappa * (theta - up) + drift_adjust * sq) * dt + xi * sq * dW


def _subdivide(knots, max_dt):
    grid = [knots[0]]
    for a, b in zip(knots[:-1], knots[1:]):
        n = max(int(np.ceil((b - a) / max_dt - 1e-9)), 1)
        grid.extend(a + (b - a) * np.arange(1, n + 1) / n)
        grid[-1] = b
    return np.array(grid)


class Simulator:
    """Stateful path simulator that can be advanced in stages.

    Between calls to :meth:`advance` the model's surface may be replaced by one
    with more slices, which is how incremental bootstraps reuse paths.
    """

    def __init__(self, model: ModelSpec, cfg: McConfig):
        self.model = model
        self.cfg = cfg
        n = cfg.n_paths
        self.n = n
        self.t = 0.0
        self.S = np.full(2 * n, float(model.spot))
        v = model.variant
        self.xd = np.zeros(2 * n) if v.t_forward else None
        self.xf = np.zeros(2 * n) if v.t_forward else None
        self.U = np.full(2 * n, model.heston.v0) if v.stochastic_variance else None
        self._drivers = v.drivers
        self._rows = [DRIVERS.index(d) for d in self._drivers]
        self._chol = chol(model.corr.matrix(self._drivers))
        n_blocks = (n + BLOCK - 1) // BLOCK
        self._gens = [np.random.Generator(np.random.Philox(key=np.array([cfg.seed, b], dtype=np.uint64)))
                      for b in range(n_blocks)]
        self._pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 and n_blocks > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _normals(self):
        draw = lambda g: g.standard_normal((len(DRIVERS), BLOCK))
        blocks = list(self._pool.map(draw, self._gens)) if self._pool else [draw(g) for g in self._gens]
        return np.concatenate(blocks, axis=1)[:, :self.n]

    def _knots(self, target, extra=()):
        m = self.model
        pts = [self.t, target, *extra]
        if m.surface is not None:
            pts.extend(m.surface.times)
        if m.heston is not None:
            pts.extend(m.heston.times)
        pts = np.unique(np.array([p for p in pts if self.t - _TIME_TOL <= p <= target + _TIME_TOL]))
        keep = [pts[0]]
        for p in pts[1:]:
            if p - keep[-1] > 1e-10:
                keep.append(p)
        keep[0], keep[-1] = self.t, target
        return keep

    def _vol(self, t0):
        m = self.model
        v = m.variant
        if v is Variant.BS2SR_TFWD:
            return np.full_like(self.S, m.flat_vol)
        if v is Variant.LV2SR_TFWD:
            return m.surface.eval(self.S, t0)
        sq = np.sqrt(np.maximum(self.U, 0.0))
        if v is Variant.HESTON_DRN:
            return sq
        return m.surface.eval(self.S, t0) * sq

    def advance(self, target, capture=(), on_step=None, bundle=None):
        """Step from the current time to ``target``, capturing at ``capture`` times."""
        if target < self.t - _TIME_TOL:
            raise ValueError("cannot advance backwards")
        m = self.model
        v = m.variant
        grid = _subdivide(self._knots(target, capture), self.cfg.max_dt) if target > self.t else np.array([self.t])
        cap = list(capture)
        if bundle is not None:
            bundle.grid.extend(grid[1:].tolist() if bundle.grid else grid.tolist())
            self._maybe_capture(bundle, cap, self.t)
        if v.t_forward:
            T = m.horizon
            phi_d = m.dom.phi_integral(grid)
            phi_f = m.fgn.phi_integral(grid)
        else:
            ldf = m.fgn_curve.log_df(grid) - m.dom_curve.log_df(grid)
        n = self.n
        rows = self._rows
        for k in range(grid.size - 1):
            t0, t1 = float(grid[k]), float(grid[k + 1])
            h = t1 - t0
            z = self._normals()[rows]
            dw_half = np.sqrt(h) * (self._chol @ z)
            dW = {name: np.concatenate([dw_half[i], -dw_half[i]]) for i, name in enumerate(self._drivers)}
            vol = self._vol(t0)
            S_old = self.S
            if v.t_forward:
                bd = _b_scalar(m.dom, t0, T)
                sd, sf = float(m.dom.sigma_at(t0)), float(m.fgn.sigma_at(t0))
                ad, af = float(m.dom.a_at(t0)), float(m.fgn.a_at(t0))
                rsd, rsf, rdf = m.corr.get("S", "d"), m.corr.get("S", "f"), m.corr.get("d", "f")
                carry = (self.xd - self.xf) * h + (phi_d[k + 1] - phi_d[k]) - (phi_f[k + 1] - phi_f[k])
                drift = carry - rsd * bd * sd * vol * h
                xd_new = self.xd + (-ad * self.xd - bd * sd * sd) * h + sd * dW["d"]
                xf_new = self.xf + (-af * self.xf - rsf * sf * vol - rdf * bd * sd * sf) * h + sf * dW["f"]
                self.xd, self.xf = xd_new, xf_new
            else:
                drift = ldf[k + 1] - ldf[k]
            if self.U is not None:
                hp = m.heston
                i = hp.index(t0)
                adj = 0.0
                if v is Variant.SLV2SR_TFWD:
                    adj = -m.corr.get("U", "d") * bd * sd * hp.xi[i]
                self.U = cir_step(self.U, hp.kappa[i], hp.theta[i], hp.xi[i], h, dW["U"], adj)
            # expm1 compounds the carry exactly, so a zero-vol path lands on the forward
            self.S = np.maximum(S_old * (1.0 + np.expm1(drift) + vol * dW["S"]), S_FLOOR)
            if on_step is not None:
                on_step(t0, t1, S_old, self.S, vol)
            self.t = t1
            if bundle is not None:
                self._maybe_capture(bundle, cap, t1)
        self.t = float(target)
        return bundle

    def _maybe_capture(self, bundle, cap, t):
        while cap and abs(cap[0] - t) <= 1e-9:
            state = {"S": self.S.copy()}
            if self.xd is not None:
                state["xd"] = self.xd.copy()
                state["xf"] = self.xf.copy()
            if self.U is not None:
                state["U"] = np.maximum(self.U, 0.0)
            bundle.times.append(cap[0])
            bundle.states[cap[0]] = state
            cap.pop(0)


def simulate(model: ModelSpec, cfg: McConfig, until=None, on_step=None) -> PathBundle:
    """Run the model from 0 to ``until`` (default: last capture time or horizon)."""
    end = until
    if end is None:
        end = cfg.capture[-1] if cfg.capture else model.horizon
    if end is None:
        raise ValueError("nothing to simulate: give capture times, a horizon or `until`")
    if model.variant.t_forward and end > model.horizon + _TIME_TOL:
        raise ValueError("T-forward simulation cannot run past its horizon")
    sim = Simulator(model, cfg)
    try:
        bundle = PathBundle(cfg.n_paths)
        sim.advance(end, [t for t in cfg.capture if t <= end + _TIME_TOL], on_step, bundle)
    finally:
        sim.close()
    return bundle
