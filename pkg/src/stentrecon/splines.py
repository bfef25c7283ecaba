"""Interpolating cubic splines with centripetal parameterization.

Curves are vector-valued (3-d) cubics in moments form. Two boundary flavors:

* natural: second derivative zero at both ends, degrades gracefully to a
  straight segment for two points;
* periodic: C2 across the seam, for closed rings; the wrap increment comes
  from the closing chord, so the parameter period is geometric, not angular.

The parameter spacing is centripetal: each increment is the square root of
the chord length. This is what keeps interpolation through unevenly spaced
section centroids from overshooting and self-intersecting.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SplineError(ValueError):
    pass


def centripetal_parameters(points: np.ndarray, closed: bool = False) -> np.ndarray:
    """Cumulative sqrt-chord parameters, t_0 = 0.

    For closed curves the returned array has one extra entry: the period
    (parameter of the first point after walking the closing chord).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise SplineError("need at least two points")
    chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if closed:
        chords = np.append(chords, np.linalg.norm(pts[0] - pts[-1]))
    if (chords == 0.0).any():
        raise SplineError("duplicate consecutive points give a zero parameter step")
    return np.concatenate([[0.0], np.cumsum(np.sqrt(chords))])


def _solve_tridiagonal(lower, diag, upper, rhs):
    """Thomas algorithm; rhs may be (n,) or (n, k)."""
    n = diag.size
    c = upper.astype(np.float64).copy()
    d = rhs.astype(np.float64).copy()
    b = diag.astype(np.float64).copy()
    for i in range(1, n):
        m = lower[i - 1] / b[i - 1]
        b[i] = b[i] - m * c[i - 1]
        d[i] = d[i] - m * d[i - 1]
    x = np.empty_like(d)
    x[-1] = d[-1] / b[-1]
    for i in range(n - 2, -1, -1):
        x[i] = (d[i] - c[i] * x[i + 1]) / b[i]
    return x


def _solve_cyclic_tridiagonal(lower, diag, upper, corner_ul, corner_lr, rhs):
    """Cyclic tridiagonal solve via the Sherman-Morrison correction.

    corner_ul sits at (0, n-1), corner_lr at (n-1, 0).
    """
    n = diag.size
    if n == 1:
        return rhs / (diag[0] + corner_ul + corner_lr)
    if n == 2:
        # The wrap entries collapse onto the off-diagonals.
        a = np.array(
            [[diag[0], upper[0] + corner_ul], [lower[0] + corner_lr, diag[1]]]
        )
        return np.linalg.solve(a, rhs)
    gamma = -diag[0]
    diag_mod = diag.copy()
    diag_mod[0] = diag[0] - gamma
    diag_mod[-1] = diag[-1] - corner_ul * corner_lr / gamma
    u = np.zeros(n)
    u[0] = gamma
    u[-1] = corner_lr
    v = np.zeros(n)
    v[0] = 1.0
    v[-1] = corner_ul / gamma
    y = _solve_tridiagonal(lower, diag_mod, upper, rhs)
    q = _solve_tridiagonal(lower, diag_mod, upper, u)
    vy = v @ y
    vq = v @ q
    return y - np.outer(q, vy / (1.0 + vq)) if y.ndim == 2 else y - q * (vy / (1.0 + vq))


@dataclass(frozen=True)
class SplineCurve:
    """Piecewise cubic through its knots, in moments (second-derivative) form."""

    kind: str  # "natural" or "periodic"
    knots: np.ndarray  # (m+1,) parameters; periodic curves carry the period knot
    points: np.ndarray  # (m+1, 3) values at the knots (periodic: first repeated last)
    moments: np.ndarray  # (m+1, 3) second derivatives at the knots

    @property
    def closed(self) -> bool:
        return self.kind == "periodic"

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])

    @property
    def knot_count(self) -> int:
        """Distinct interpolated points (the wrap copy not counted)."""
        return self.points.shape[0] - 1 if self.closed else self.points.shape[0]

    def _segments(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t = np.asarray(t, dtype=np.float64)
        t0, t1 = self.domain
        if self.closed:
            t = t0 + np.mod(t - t0, t1 - t0)
        else:
            if (t < t0 - 1e-12).any() or (t > t1 + 1e-12).any():
                raise SplineError("parameter outside the curve domain")
            t = np.clip(t, t0, t1)
        idx = np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, len(self.knots) - 2)
        return t, idx

    def evaluate(self, t) -> np.ndarray:
        scalar = np.ndim(t) == 0
        t, i = self._segments(np.atleast_1d(t))
        h = (self.knots[i + 1] - self.knots[i])[:, None]
        a = ((self.knots[i + 1] - t) / (self.knots[i + 1] - self.knots[i]))[:, None]
        b = 1.0 - a
        mi, mj = self.moments[i], self.moments[i + 1]
        yi, yj = self.points[i], self.points[i + 1]
        val = (
            mi * a**3 * h**2 / 6.0
            + mj * b**3 * h**2 / 6.0
            + (yi - mi * h**2 / 6.0) * a
            + (yj - mj * h**2 / 6.0) * b
        )
        return val[0] if scalar else val

    def derivative(self, t) -> np.ndarray:
        scalar = np.ndim(t) == 0
        t, i = self._segments(np.atleast_1d(t))
        h = (self.knots[i + 1] - self.knots[i])[:, None]
        dt0 = (t - self.knots[i])[:, None]
        dt1 = (self.knots[i + 1] - t)[:, None]
        mi, mj = self.moments[i], self.moments[i + 1]
        yi, yj = self.points[i], self.points[i + 1]
        val = -mi * dt1**2 / (2 * h) + mj * dt0**2 / (2 * h) + (yj - yi) / h - (mj - mi) * h / 6.0
        return val[0] if scalar else val

    def second_derivative(self, t) -> np.ndarray:
        scalar = np.ndim(t) == 0
        t, i = self._segments(np.atleast_1d(t))
        h = (self.knots[i + 1] - self.knots[i])[:, None]
        dt0 = (t - self.knots[i])[:, None]
        dt1 = (self.knots[i + 1] - t)[:, None]
        val = self.moments[i] * dt1 / h + self.moments[i + 1] * dt0 / h
        return val[0] if scalar else val

    # ---------------------------------------------------------- arclength

    def sample_dense(self, per_span: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Dense parameter grid and positions, per_span samples per knot span."""
        spans = len(self.knots) - 1
        ts = np.linspace(self.knots[0], self.knots[-1], spans * per_span + 1)
        return ts, self.evaluate(ts)

    def arclength_table(self, per_span: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """(parameters, cumulative chord length) over a dense sampling."""
        ts, pos = self.sample_dense(per_span)
        seg = np.linalg.norm(np.diff(pos, axis=0), axis=1)
        return ts, np.concatenate([[0.0], np.cumsum(seg)])

    def length(self, per_span: int = 64) -> float:
        return float(self.arclength_table(per_span)[1][-1])

    def params_at_arclengths(self, s: np.ndarray, per_span: int = 64) -> np.ndarray:
        """Parameters at the requested arclengths (monotone interpolation)."""
        ts, cum = self.arclength_table(per_span)
        return np.interp(np.asarray(s, dtype=np.float64), cum, ts)


def fit_natural_spline(points: np.ndarray, parameters: np.ndarray | None = None) -> SplineCurve:
    """Natural cubic through the points; two points fall back to a line."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] < 2:
        raise SplineError("need at least two points")
    t = centripetal_parameters(pts) if parameters is None else np.asarray(parameters, float)
    if t.shape[0] != pts.shape[0]:
        raise SplineError("parameter count must match point count")
    if (np.diff(t) <= 0).any():
        raise SplineError("parameters must be strictly increasing")
    n = pts.shape[0] - 1
    moments = np.zeros_like(pts)
    if n >= 2:
        h = np.diff(t)
        rhs = (pts[2:] - pts[1:-1]) / h[1:, None] - (pts[1:-1] - pts[:-2]) / h[:-1, None]
        lower = h[1:-1] / 6.0
        upper = h[1:-1] / 6.0
        diag = (h[:-1] + h[1:]) / 3.0
        moments[1:-1] = _solve_tridiagonal(lower, diag, upper, rhs)
    return SplineCurve(kind="natural", knots=t, points=pts, moments=moments)


def fit_periodic_spline(points: np.ndarray) -> SplineCurve:
    """Closed C2 cubic through the points (first point not repeated by caller)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = pts.shape[0]
    if n < 3:
        raise SplineError("a closed spline needs at least three points")
    t = centripetal_parameters(pts, closed=True)  # length n+1, last is the period
    h = np.diff(t)  # n spans, the wrap span last
    h_prev = np.roll(h, 1)  # span entering knot i (wrap span enters knot 0)
    # Unknowns M_0..M_{n-1} with M_n = M_0. Row i couples knots (i-1, i, i+1):
    # (h_{i-1}/6) M_{i-1} + ((h_{i-1}+h_i)/3) M_i + (h_i/6) M_{i+1} = rhs_i.
    diag = (h_prev + h) / 3.0
    sub_diag = h[: n - 1] / 6.0  # rows 1..n-1 to the previous knot
    sup_diag = h[: n - 1] / 6.0  # rows 0..n-2 to the next knot
    corner_ul = h[-1] / 6.0  # row 0 reaches knot n-1 through the wrap span
    corner_lr = h[-1] / 6.0  # row n-1 reaches knot 0 through the wrap span
    next_pts = np.roll(pts, -1, axis=0)
    prev_pts = np.roll(pts, 1, axis=0)
    rhs = (next_pts - pts) / h[:, None] - (pts - prev_pts) / h_prev[:, None]
    moments = _solve_cyclic_tridiagonal(sub_diag, diag, sup_diag, corner_ul, corner_lr, rhs)
    pts_ext = np.vstack([pts, pts[0]])
    moments_ext = np.vstack([moments, moments[0]])
    return SplineCurve(kind="periodic", knots=t, points=pts_ext, moments=moments_ext)
