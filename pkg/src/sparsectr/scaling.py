"""Least-squares fit of AUC(X) = E - A / X^alpha.

For a fixed exponent the model is linear in (E, A), so the fit reduces to
a one-dimensional search over alpha: a log-spaced scan brackets the
minimum, golden-section search refines it, and each evaluation solves for
(E, A) in closed form.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class PowerLawFit:
    E: float
    A: float
    alpha: float
    r2: float
    degenerate: bool = False

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.degenerate:
            return np.full_like(x, self.E)
        return self.E - self.A * x ** (-self.alpha)


def _linear_fit(z: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Best (E, A) for y ~ E - A z, and the residual sum of squares."""
    zc = z - z.mean()
    var = float(zc @ zc)
    if var <= 0.0 or not np.isfinite(var):
        e = float(y.mean())
        return e, 0.0, float(((y - e) ** 2).sum())
    a = -float(zc @ (y - y.mean())) / var
    e = float(y.mean() + a * z.mean())
    resid = y - (e - a * z)
    return e, a, float(resid @ resid)


def fit_power_law(x, y, alpha_range: tuple[float, float] = (1e-4, 4.0), grid: int = 400,
                  tol: float = 1e-13) -> PowerLawFit:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"x and y differ in length: {x.size} vs {y.size}")
    if x.size < 3:
        raise ValueError(f"need at least 3 points to fit a power law, got {x.size}")
    if np.any(x <= 0) or not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise ValueError("x must be positive and all values finite")
    order = np.lexsort((y, x))
    x, y = x[order], y[order]

    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot <= 1e-30 * max(1.0, float(y @ y)):
        return PowerLawFit(E=float(y.mean()), A=0.0, alpha=float("nan"), r2=1.0, degenerate=True)

    # rescale x so x^-alpha stays in a friendly range; A absorbs the factor
    scale = float(np.exp(np.mean(np.log(x))))
    xs = x / scale

    def sse(u: float) -> float:
        return _linear_fit(xs ** (-math.exp(u)), y)[2]

    lo, hi = math.log(alpha_range[0]), math.log(alpha_range[1])
    us = np.linspace(lo, hi, grid)
    vals = np.array([sse(u) for u in us])
    i = int(np.argmin(vals))
    a, b = us[max(i - 1, 0)], us[min(i + 1, grid - 1)]
    c, d = b - _GOLDEN * (b - a), a + _GOLDEN * (b - a)
    fc, fd = sse(c), sse(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = sse(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = sse(d)
    u = (a + b) / 2.0
    alpha = math.exp(u)
    e, a_scaled, rss = _linear_fit(xs ** (-alpha), y)
    return PowerLawFit(E=e, A=a_scaled * scale ** alpha, alpha=alpha, r2=1.0 - rss / ss_tot)


def read_points(path) -> tuple[np.ndarray, np.ndarray]:
    """CSV with columns ``flops`` and ``auc``."""
    xs, ys = [], []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"flops", "auc"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns 'flops' and 'auc'")
        for lineno, row in enumerate(reader, start=2):
            try:
                xs.append(float(row["flops"]))
                ys.append(float(row["auc"]))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    return np.array(xs), np.array(ys)


SCALING_COLUMNS = ["flops", "auc", "fitted_auc", "E", "A", "alpha", "r2", "degenerate"]


def write_fit_csv(path, x, y, fit: PowerLawFit):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SCALING_COLUMNS)
        for xi, yi, fi in zip(x, y, fit.predict(x)):
            w.writerow([repr(float(xi)), repr(float(yi)), repr(float(fi)), repr(fit.E), repr(fit.A),
                        repr(fit.alpha), repr(fit.r2), int(fit.degenerate)])
