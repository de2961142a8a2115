"""Norms, dual norms and projections for l_p spaces and the simplex.

The exponent p = infinity is represented by the sentinel :data:`INF`, never by
a large float, so that ``dual_exponent(1) is INF`` holds exactly.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.optimize import brentq


class DimensionError(ValueError):
    """A point does not live in the declared space."""


class ProjectionError(RuntimeError):
    """The general-p projection root-find failed to converge."""


class _Inf(enum.Enum):
    INF = "inf"

    def __repr__(self):
        return "INF"

    def __str__(self):
        return "inf"


INF = _Inf.INF


def as_exponent(p):
    """Normalize an exponent to ``INF`` or a float >= 1.

    Accepts ``INF``, the string ``"inf"``, ``math.inf`` or any real >= 1.
    """
    if p is INF:
        return INF
    if isinstance(p, str):
        if p.strip().lower() in ("inf", "infinity", "∞"):
            return INF
        p = float(p)
    p = float(p)
    if math.isinf(p) and p > 0:
        return INF
    if not p >= 1.0:
        raise ValueError(f"exponent must be >= 1 or infinity, got {p!r}")
    return p


def is_inf(p):
    return as_exponent(p) is INF


def exponent_to_json(p):
    """JSON form of an exponent: a number, or the string "inf"."""
    p = as_exponent(p)
    return "inf" if p is INF else p


def dual_exponent(p):
    """Return p* = p/(p-1), mapping 1 to INF and INF to 1.

    Computed in rational arithmetic. A float that is the rounding of a simple
    fraction (such as 4/3) is first snapped to that fraction, which makes the
    map an exact involution on doubles: 4 -> 4/3 -> 4.
    """
    p = as_exponent(p)
    if p is INF:
        return 1.0
    if p == 1.0:
        return INF
    q = Fraction(p)
    simple = q.limit_denominator(1 << 20)
    if float(simple) == p:
        q = simple
    return float(q / (q - 1))


def lp_norm(x, p, d=None, axis=None):
    """l_p norm of ``x``.

    Parameters
    ----------
    x : array_like
        Point (or stack of points when ``axis`` is given).
    p : float or INF
        Exponent.
    d : int, optional
        Declared dimension; a mismatch raises :class:`DimensionError`.
    axis : int, optional
        Reduce along this axis instead of over the whole array.

    Notes
    -----
    For general p the maximum absolute entry is factored out first, so large p
    and large entries do not overflow.
    """
    x = np.asarray(x, dtype=np.float64)
    if d is not None and x.shape[-1] != d:
        raise DimensionError(f"point has dimension {x.shape[-1]}, space has d={d}")
    p = as_exponent(p)
    if p == 2.0:
        fast = _l2_fast(x, axis)
        if fast is not None:
            return fast
    a = np.abs(x)
    if p is INF:
        return np.max(a, axis=axis, initial=0.0)
    if p == 1.0:
        return np.sum(a, axis=axis)
    m = np.max(a, axis=axis, keepdims=True, initial=0.0)
    safe = np.where(m > 0, m, 1.0)
    y = a / safe
    if p == 2.0:
        s = np.sqrt(np.sum(y * y, axis=axis, keepdims=True))
    else:
        s = np.sum(y ** p, axis=axis, keepdims=True) ** (1.0 / p)
    out = m * s
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def _l2_fast(x, axis):
    """Unscaled sqrt(<x, x>) per row via BLAS dot, or None when over/underflow is possible."""
    if axis is None:
        rows = x.reshape(1, -1)
    else:
        rows = np.moveaxis(x, axis, -1)
        rows = rows.reshape(-1, rows.shape[-1]) if rows.ndim > 1 else rows.reshape(1, -1)
    ss = np.array([np.dot(r, r) for r in rows]) if rows.shape[1] else np.zeros(rows.shape[0])
    if not np.all((ss > 1e-280) & (ss < 1e280) | (ss == 0)):
        return None
    if np.any(ss == 0) and np.any(rows[ss == 0]):
        return None
    out = np.sqrt(ss)
    if axis is None:
        return float(out[0])
    return out.reshape(np.delete(np.array(x.shape), axis % x.ndim).tolist())


def norm_subgradient(x, p):
    """Return w with ||w||_{p*} <= 1 and <w, x> = ||x||_p.

    Deterministic: for p = INF the lowest index attaining the maximum is used,
    and w = 0 at x = 0.
    """
    x = np.asarray(x, dtype=np.float64)
    p = as_exponent(p)
    w = np.zeros_like(x)
    a = np.abs(x)
    m = a.max(initial=0.0)
    if m == 0.0:
        return w
    if p is INF:
        j = int(np.argmax(a))
        w[j] = np.sign(x[j])
        return w
    if p == 1.0:
        return np.sign(x)
    y = a / m
    if p == 2.0:
        return x / lp_norm(x, 2)
    yp = y ** (p - 1.0)
    n = np.sum(y ** p) ** (1.0 / p)
    return np.sign(x) * yp / n ** (p - 1.0)


def linear_maximizer(g, p, R=1.0):
    """argmax of <g, u> over the radius-R l_p ball (a Hoelder-tight direction)."""
    return R * norm_subgradient(g, dual_exponent(p))


@dataclass(frozen=True)
class LpSpace:
    """The space R^d equipped with the l_p norm."""

    d: int
    p: object

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"dimension must be a positive integer, got {self.d!r}")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "p", as_exponent(self.p))

    @property
    def dual(self):
        return dual_exponent(self.p)

    def check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d:
            raise DimensionError(f"point has dimension {x.shape[-1]}, space has d={self.d}")
        return x

    def norm(self, x):
        return lp_norm(self.check(x), self.p)

    def dual_norm(self, x):
        return lp_norm(self.check(x), self.dual)


def _threshold_l1(a, R):
    """Soft-threshold level tau with sum(max(a - tau, 0)) = R, for a >= 0."""
    u = np.sort(a)[::-1]
    css = np.cumsum(u) - R
    ind = np.arange(1, u.size + 1)
    cond = u - css / ind > 0
    rho = ind[cond][-1]
    return css[cond][-1] / rho


def _coordinate_solve(a, c, p, iters=100):
    """Solve t + c*t**(p-1) = a for t in [0, a], elementwise (a >= 0, c >= 0).

    Safeguarded Newton: a Newton step that leaves the bracket is replaced by
    bisection.
    """
    lo = np.zeros_like(a)
    hi = a.copy()
    t = a.copy() if p >= 2.0 else 0.5 * a
    for _ in range(iters):
        tp = np.maximum(t, 1e-300)
        g = t + c * tp ** (p - 1.0) - a
        lo = np.where(g < 0, t, lo)
        hi = np.where(g > 0, t, hi)
        dg = 1.0 + c * (p - 1.0) * tp ** (p - 2.0)
        tn = t - g / dg
        bad = ~((tn > lo) & (tn < hi))
        tn = np.where(bad, 0.5 * (lo + hi), tn)
        step = np.max(np.abs(tn - t), initial=0.0)
        t = tn
        if step <= 1e-16 * max(1.0, float(a.max(initial=0.0))):
            break
    return t


def project_lp_ball(x, p, R=1.0, tol=1e-8, max_iter=200):
    """Euclidean projection of ``x`` onto {y : ||y||_p <= R}.

    Exact for p in {1, 2, INF}. Other p use a scalar root-find on the KKT
    multiplier; failure to reach ``tol`` within ``max_iter`` iterations raises
    :class:`ProjectionError`.
    """
    if not R > 0:
        raise ValueError("radius must be positive")
    x = np.asarray(x, dtype=np.float64)
    p = as_exponent(p)
    if p is INF:
        return np.clip(x, -R, R)
    n = lp_norm(x, p)
    if n <= R:
        return x.copy()
    if p == 2.0:
        return x * (R / n)
    a = np.abs(x) / R
    if p == 1.0:
        tau = _threshold_l1(a, 1.0)
        return np.sign(x) * np.maximum(a - tau, 0.0) * R

    def excess(lam):
        t = _coordinate_solve(a, lam * p, p)
        return lp_norm(t, p) - 1.0

    if lp_norm(a, p) - 1.0 <= tol:
        # on the sphere up to rounding: radial scaling is within tol of the projection
        return x * (R / n)

    hi = 1.0
    for _ in range(200):
        if excess(hi) <= 0:
            break
        hi *= 2.0
    else:
        raise ProjectionError("could not bracket the KKT multiplier")
    try:
        lam, info = brentq(excess, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                           maxiter=max_iter, full_output=True, disp=False)
    except (RuntimeError, ValueError) as exc:
        raise ProjectionError(str(exc)) from exc
    t = _coordinate_solve(a, lam * p, p)
    err = lp_norm(t, p) - 1.0
    if not info.converged or abs(err) > tol:
        raise ProjectionError(f"root-find stopped after {info.iterations} iterations, "
                              f"norm residual {err:.3e}")
    if err > 0:
        t = t / (1.0 + err)
    return np.sign(x) * t * R


def project_simplex(v, s=1.0):
    """Euclidean projection onto the simplex {w >= 0, sum(w) = s}."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ValueError("need a nonempty vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - s
    ind = np.arange(1, v.size + 1)
    cond = u - css / ind > 0
    rho = ind[cond][-1]
    theta = css[cond][-1] / rho
    w = np.maximum(v - theta, 0.0)
    return w
