"""Time-slice by strike tables for local volatility and leverage values."""
from __future__ import annotations

import csv
from enum import Enum

import numpy as np


class SurfaceKind(str, Enum):
    LOCAL_VOL = "LOCAL_VOL"
    LEVERAGE = "LEVERAGE"


class SliceSurface:
    """Values on per-slice strike grids.

    Lookup is piecewise-linear in strike (flat outside the slice's strikes) and
    left-constant in time: slice ``t_j`` applies on ``[t_j, t_{j+1})`` and the
    first slice also covers ``[0, t_1)``.
    """

    def __init__(self, kind, times=(), strikes=(), values=(), errors=None):
        self.kind = SurfaceKind(kind)
        self.times = np.asarray(times, dtype=float).ravel()
        self.strikes = tuple(np.asarray(k, dtype=float).ravel() for k in strikes)
        self.values = tuple(np.asarray(v, dtype=float).ravel() for v in values)
        if errors is None:
            errors = tuple(np.zeros_like(v) for v in self.values)
        self.errors = tuple(np.asarray(e, dtype=float).ravel() for e in errors)
        n = self.times.size
        if not (len(self.strikes) == len(self.values) == len(self.errors) == n):
            raise ValueError("one strike, value and error row per slice required")
        if np.any(np.diff(self.times) <= 0.0):
            raise ValueError("slice times must increase")
        for k, v, e in zip(self.strikes, self.values, self.errors):
            if k.size == 0 or k.size != v.size or k.size != e.size:
                raise ValueError("slice rows must be non-empty and aligned")
            if np.any(np.diff(k) < 0.0):
                raise ValueError("strikes must be ascending")
            if not np.all(np.isfinite(v)):
                raise ValueError("surface values must be finite")
            if self.kind is SurfaceKind.LOCAL_VOL and np.any(v < 0.0):
                raise ValueError("local volatilities must be non-negative")

    def __len__(self):
        return self.times.size

    def with_slice(self, t, strikes, values, errors=None):
        """New surface with one more slice appended after the last one."""
        if errors is None:
            errors = np.zeros_like(np.asarray(values, dtype=float))
        return SliceSurface(self.kind, np.append(self.times, t), self.strikes + (strikes,),
                            self.values + (values,), self.errors + (errors,))

    def slice_index(self, t):
        if self.times.size == 0:
            raise ValueError("empty surface")
        return max(int(np.searchsorted(self.times, t + 1e-12, side="right")) - 1, 0)

    def eval(self, S, t):
        i = self.slice_index(t)
        return np.interp(S, self.strikes[i], self.values[i])

    def bumped(self, n_errors: float):
        """Surface shifted by ``n_errors`` times each point's error, floored at 0."""
        vals = tuple(np.maximum(v + n_errors * e, 0.0) for v, e in zip(self.values, self.errors))
        return SliceSurface(self.kind, self.times, self.strikes, vals, self.errors)

    def to_csv(self, path, value_name=None):
        name = value_name or ("sigma_lv" if self.kind is SurfaceKind.LOCAL_VOL else "L")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh)
            out.writerow(["t", "K", name, "mc_error"])
            for t, k, v, e in zip(self.times, self.strikes, self.values, self.errors):
                for row in zip(k, v, e):
                    out.writerow([repr(float(t))] + [repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path, kind):
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or len(header) < 3:
                raise ValueError(f"{path}: missing header")
            rows = [[float(x) for x in r] for r in reader if r]
        if not rows:
            raise ValueError(f"{path}: no rows")
        data = np.array(rows)
        times = np.unique(data[:, 0])
        strikes, values, errors = [], [], []
        for t in times:
            sel = data[data[:, 0] == t]
            strikes.append(sel[:, 1])
            values.append(sel[:, 2])
            errors.append(sel[:, 3] if data.shape[1] > 3 else np.zeros(len(sel)))
        return cls(kind, times, strikes, values, errors)
