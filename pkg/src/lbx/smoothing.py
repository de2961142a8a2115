"""Local infimal-convolution smoothing of max-of-affine-plus-norm objectives.

    Sf(x) = min_{||h||_p <= eta}  f(x + h) + 2 ||h||_r^2,    r = min{p, 3 ln d}.

The solver works on the dual. Writing f(y) = max_j <g_j, y> + b_j (the norm
guard enters through supporting hyperplanes added on demand),

    Sf(x) >= Psi(lam) = sum_j lam_j (<g_j, x> + b_j) + m(G(lam)),
    m(G) = min_{||h||_p <= eta} <G, h> + 2 ||h||_r^2,   G(lam) = sum_j lam_j g_j,

with equality at the maximizer over the simplex. Psi is concave, the primal
candidate h(G(lam)) gives a matching upper bound, and their difference is a
certified optimality gap. Since Psi is a maximum of affine functions of x,
the gradient of Sf is G(lam*).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, root

from .geometry import INF, DimensionError, as_exponent, dual_exponent, lp_norm, norm_subgradient
from .instance import GUARD, HardInstance, MaxAffineNorm


class SmoothingError(RuntimeError):
    """The inner solver hit its iteration cap before reaching the tolerance.

    Attributes
    ----------
    best_value : float
        Best primal value found (an upper bound on Sf(x)).
    gap : float
        Certified bound on ``best_value - Sf(x)``.
    """

    def __init__(self, best_value, gap, iterations):
        self.best_value = best_value
        self.gap = gap
        self.iterations = iterations
        super().__init__(f"inner solver stopped after {iterations} iterations with "
                         f"value {best_value:.17g} and certified gap {gap:.3e}")


@dataclass(frozen=True)
class SmoothingConfig:
    """Parameters of the smoothing map.

    Attributes
    ----------
    p : float or INF
        Norm exponent of the space (>= 2).
    d : float
        Dimension (only ln d enters).
    eta : float
        Radius of the smoothing ball.
    kappa : float
        Target Hoelder order of the gradient, in [0, 1].
    reg_exponent : float
        Exponent r of the regularizer 2 ||h||_r^2.
    mu : float
        Regularity constant 2^(1-kappa) (min{p, ln d} / eta)^kappa.
    inner_tol, inner_cap
        Certified-gap tolerance and iteration cap of the inner solver.
    """

    p: object
    d: float
    eta: float
    kappa: float
    reg_exponent: float
    mu: float
    inner_tol: float = 1e-9
    inner_cap: int = 10000


def smoothing_constants(p, d, kappa, eta, inner_tol=1e-9, inner_cap=10000):
    """Build a :class:`SmoothingConfig` for the l_p space of dimension d.

    Raises
    ------
    ValueError
        If p < 2 (no regularizer is available there), eta <= 0, kappa outside
        [0, 1], d <= 1 or inner_tol <= 0.
    """
    p = as_exponent(p)
    if p is not INF and p < 2:
        raise ValueError(f"smoothing needs p >= 2, got p={p}")
    if not eta > 0:
        raise ValueError("eta must be positive")
    if not 0 <= kappa <= 1:
        raise ValueError("kappa must lie in [0, 1]")
    if not d > 1:
        raise ValueError("d must exceed 1 so that ln d > 0")
    if not inner_tol > 0:
        raise ValueError("inner_tol must be positive")
    lnd = math.log(d)
    m = lnd if p is INF else min(p, lnd)
    r = 3.0 * lnd if p is INF else min(p, 3.0 * lnd)
    mu = 2.0 ** (1.0 - kappa) * (m / eta) ** kappa
    return SmoothingConfig(p=p, d=d, eta=float(eta), kappa=float(kappa), reg_exponent=r, mu=mu,
                           inner_tol=float(inner_tol), inner_cap=int(inner_cap))


@dataclass
class SmoothResult:
    """Value, gradient and certificate of one smoothing solve.

    ``value`` and ``gradient`` refer to Sf for the undivided max-form; the
    oracle divides both by mu.
    """

    value: float
    gradient: np.ndarray
    h: np.ndarray
    gap: float
    iterations: int
    exact: bool
    constraint_active: bool
    near_tie: bool
    pieces: tuple


# ---------------------------------------------------------------------------
# inner problem m(G) = min_{||h||_p <= eta} <G, h> + 2 ||h||_r^2

def _solve_power(a, c1, e1, c2, e2, hi):
    """Solve c1*u^e1 + c2*u^e2 = a for u in [0, hi] elementwise (all terms increasing)."""
    lo = np.zeros_like(a)
    hi = np.array(hi, dtype=np.float64) * np.ones_like(a)
    u = 0.5 * hi
    for _ in range(200):
        g = c1 * u ** e1 + c2 * u ** e2 - a
        lo = np.where(g < 0, u, lo)
        hi = np.where(g > 0, u, hi)
        up = np.maximum(u, 1e-300)
        dg = c1 * e1 * up ** (e1 - 1.0) + c2 * e2 * up ** (e2 - 1.0)
        un = u - g / dg
        bad = ~((un > lo) & (un < hi))
        un = np.where(bad, 0.5 * (lo + hi), un)
        if np.max(np.abs(un - u), initial=0.0) <= 1e-17 * max(1.0, float(np.max(hi, initial=0.0))):
            u = un
            break
        u = un
    return u


def inner_min(G, p, r, eta):
    """Return (m(G), h(G)) with h(G) the unique minimizer.

    Closed form when r = p; otherwise nested scalar root-finds on the
    optimality conditions (exact up to floating point).
    """
    p = as_exponent(p)
    G = np.asarray(G, dtype=np.float64)
    a = np.abs(G)
    if a.max(initial=0.0) == 0.0:
        return 0.0, np.zeros_like(G)
    if p is not INF and r == p:
        q = dual_exponent(p)
        nG = lp_norm(G, q)
        t = min(eta, nG / 4.0)
        h = -t * norm_subgradient(G, q)
        return -t * nG + 2.0 * t * t, h
    u = _inner_general(a, p, r, eta)
    h = -np.sign(G) * u
    return float(G @ h + 2.0 * lp_norm(h, r) ** 2), h


def _u_given_s(a, s, r, p, nu, eta):
    """Coordinate magnitudes for fixed regularizer norm s and ball multiplier nu."""
    c1 = 4.0 * s ** (2.0 - r)
    if p is INF:
        return np.minimum(eta, (a / c1) ** (1.0 / (r - 1.0)))
    cap = (a / c1) ** (1.0 / (r - 1.0))
    if nu == 0.0:
        return cap
    return _solve_power(a, c1, r - 1.0, nu * p, p - 1.0, cap)


def _u_for_nu(a, r, p, nu, eta):
    """Magnitudes for a fixed ball multiplier; the regularizer norm s is a 1-D root."""

    def ratio(s):
        return lp_norm(_u_given_s(a, s, r, p, nu, eta), r) - s

    hi = 1.0
    while ratio(hi) > 0:
        hi *= 2.0
    lo = hi
    while ratio(lo) <= 0:
        lo *= 0.5
        if lo < 1e-200:
            return np.zeros_like(a)
    s = brentq(ratio, lo, max(hi, lo), xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return _u_given_s(a, s, r, p, nu, eta)


def _inner_general(a, p, r, eta):
    u = _u_for_nu(a, r, p, 0.0, eta)
    if p is INF or lp_norm(u, p) <= eta:
        return u

    def excess(nu):
        return lp_norm(_u_for_nu(a, r, p, nu, eta), p) - eta

    hi = 1.0
    while excess(hi) > 0:
        hi *= 2.0
    nu = brentq(excess, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    u = _u_for_nu(a, r, p, nu, eta)
    n = lp_norm(u, p)
    return u * (eta / n) if n > eta else u


# ---------------------------------------------------------------------------
# solver

def _objective(inst):
    if isinstance(inst, HardInstance):
        cache = getattr(inst, "_smooth_objective", None)
        if cache is None:
            cache = inst.objective()
            inst._smooth_objective = cache
        return cache
    if isinstance(inst, MaxAffineNorm):
        return inst
    raise TypeError("expected a HardInstance or a MaxAffineNorm")


class _Problem:
    """Pieces surviving the dominance screen at one point x."""

    def __init__(self, f, x, cfg):
        self.f = f
        self.x = x
        self.cfg = cfg
        self.p = cfg.p
        self.q = dual_exponent(cfg.p)
        eta = cfg.eta
        vals = f.G @ x + f.b if f.b.size else np.zeros(0)
        norms = np.array([lp_norm(g, self.q) for g in f.G]) if f.b.size else np.zeros(0)
        lowers = vals - eta * norms
        uppers = vals + eta * norms
        nx = lp_norm(x, self.p)
        if f.c is not None:
            g_lo, g_hi = max(nx - eta, 0.0) - f.c, nx + eta - f.c
        else:
            g_lo = g_hi = -math.inf
        floor = max(lowers.max(initial=-math.inf), g_lo)
        self.keep = np.flatnonzero(uppers >= floor)
        self.guard = f.c is not None and g_hi >= floor
        self.vals = vals
        if vals.size >= 2:
            top = np.sort(vals)[-2:]
            self.margin = float(top[1] - top[0])
        else:
            self.margin = math.inf
        self.nx = nx

    def primal(self, h):
        """True objective f(x + h) + 2||h||_r^2."""
        return self.f(self.x + h) + 2.0 * lp_norm(h, self.cfg.reg_exponent) ** 2


def _exact_affine(prob, j):
    f, cfg = prob.f, prob.cfg
    g = f.G[j]
    m, h = inner_min(g, cfg.p, cfg.reg_exponent, cfg.eta)
    return prob.vals[j] + m, g.copy(), h


def _exact_guard(prob):
    """Guard-only closed form, valid when the regularizer norm is the space norm."""
    cfg = prob.cfg
    nx = prob.nx
    t = min(cfg.eta, 0.25, nx)
    w = norm_subgradient(prob.x, cfg.p)
    val = nx - t + 2.0 * t * t - prob.f.c
    grad = (1.0 if t < nx else 4.0 * nx) * w
    return val, grad, -t * w


def smooth_solve(inst, x, cfg):
    """Solve the smoothing problem at x and return a :class:`SmoothResult`.

    Parameters
    ----------
    inst : HardInstance or MaxAffineNorm
        The nonsmooth function (for a HardInstance, the max-form before the
        division by mu).
    x : array_like
        Evaluation point.
    cfg : SmoothingConfig

    Raises
    ------
    SmoothingError
        If the certified gap is still above ``cfg.inner_tol`` after
        ``cfg.inner_cap`` iterations.
    """
    f = _objective(inst)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (f.d,):
        raise DimensionError(f"point has dimension {x.size}, space has d={f.d}")
    if as_exponent(cfg.p) != f.p:
        raise ValueError("smoothing config and objective use different norms")
    prob = _Problem(f, x, cfg)
    near_tie = prob.margin < 10.0 * cfg.inner_tol
    keep = [int(j) for j in prob.keep]
    if not prob.guard and len(keep) == 1:
        j = keep[0]
        val, grad, h = _exact_affine(prob, j)
        return SmoothResult(val, grad, h, 0.0, 0, True,
                            lp_norm(h, cfg.p) >= cfg.eta * (1 - 1e-12), near_tie, (j + 1,))
    if prob.guard and not keep and cfg.reg_exponent == f.p:
        val, grad, h = _exact_guard(prob)
        return SmoothResult(val, grad, h, 0.0, 0, True,
                            lp_norm(h, cfg.p) >= cfg.eta * (1 - 1e-12), near_tie, (GUARD,))
    return _dual_solve(prob, keep, near_tie)


def simplex_qp(Q, b, lam0, max_iter=200):
    """Minimize 1/2 lam'Q lam - b'lam over the simplex by a primal active-set method.

    ``Q`` must be symmetric positive semidefinite; ``lam0`` is a feasible start.
    """
    J = b.size
    lam = lam0.copy()
    S = set(np.flatnonzero(lam > 0).tolist()) or {int(np.argmax(b))}
    if not np.any(lam > 0):
        lam[next(iter(S))] = 1.0
    for _ in range(max_iter):
        idx = np.array(sorted(S))
        n = idx.size
        K = np.zeros((n + 1, n + 1))
        K[:n, :n] = Q[np.ix_(idx, idx)]
        K[:n, n] = 1.0
        K[n, :n] = 1.0
        rhs = np.append(b[idx], 1.0)
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        cand = np.zeros(J)
        cand[idx] = sol[:n]
        nu = sol[n]
        if np.all(sol[:n] >= -1e-15):
            lam = np.maximum(cand, 0.0)
            lam /= lam.sum()
            s = Q @ lam - b + nu
            out = [j for j in range(J) if j not in S]
            if not out:
                return lam
            j = min(out, key=lambda k: s[k])
            if s[j] >= -1e-13 * max(1.0, np.abs(b).max()):
                return lam
            S.add(j)
            continue
        # move toward the candidate until a coordinate of the support hits zero
        d = cand - lam
        neg = [k for k in idx if d[k] < 0]
        steps = [(-lam[k] / d[k], k) for k in neg]
        tmax, kout = min(steps)
        lam = lam + max(min(tmax, 1.0), 0.0) * d
        lam[kout] = 0.0
        lam = np.maximum(lam, 0.0)
        lam /= lam.sum()
        S = set(np.flatnonzero(lam > 0).tolist())
        if not S:
            S = {int(np.argmax(b))}
    return lam


def _spow(u, e):
    """sign(u) |u|^(e - 1), the gradient map of |u|^e / e."""
    return np.sign(u) * np.abs(u) ** (e - 1.0)


def _guard_fixed_point(prob, A, c, lam):
    """Polish a dual point whose support contains the guard (r = p < inf).

    With beta = theta / ||y||_p^(p-1) and gam = t / ||G||_q^(q-1), each
    coordinate of y = x + h solves the monotone scalar equation
    y_i + gam * psi_q(a_i + beta * psi_p(y_i)) = x_i, where a = sum of the
    affine rows. What remains is a small root-find in the affine weights and
    (beta, gam). Returns (lam, w) with w the exact norm gradient at y, or None.
    """
    f, x, eta = prob.f, prob.x, prob.cfg.eta
    p, q = prob.p, prob.q
    S = np.flatnonzero(lam[:-1] > 0)
    AS, cS = A[S], c[S]

    def solve_y(a, beta, gam):
        F = lambda y: y + gam * _spow(a + beta * _spow(y, p), q) - x
        B = np.full_like(x, max(eta, 1e-3))
        for _ in range(200):
            bad = (F(x - B) > 0) | (F(x + B) < 0)
            if not bad.any():
                break
            B = np.where(bad, 2.0 * B, B)
        lo, hi = x - B, x + B
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if np.all((mid == lo) | (mid == hi)):
                break
            pos = F(mid) > 0
            hi = np.where(pos, mid, hi)
            lo = np.where(pos, lo, mid)
        return 0.5 * (lo + hi)

    def state(z):
        theta = 1.0 - z[:-2].sum()
        beta, gam = z[-2], z[-1]
        a = z[:-2] @ AS
        y = solve_y(a, beta, gam)
        N = lp_norm(y, p)
        G = a + beta * _spow(y, p)
        nG = lp_norm(G, q)
        return theta, y, N, nG

    def resid(z):
        if z[-2] < 0 or z[-1] < 0:
            return np.full(z.size, 1e3)
        theta, y, N, nG = state(z)
        h = y - x
        ties = cS + AS @ h - (N - f.c)
        return np.concatenate([ties, [z[-2] * N ** (p - 1.0) - theta,
                                      z[-1] * nG ** (q - 1.0) - min(eta, nG / 4.0)]])

    G = lam @ A
    m, h = inner_min(G, p, p, eta)
    y = x + h
    nG = lp_norm(G, q)
    z0 = np.concatenate([lam[S], [lam[-1] / lp_norm(y, p) ** (p - 1.0),
                                  min(eta, nG / 4.0) / nG ** (q - 1.0)]])
    sol = root(resid, z0, method="hybr", options={"xtol": 1e-15})
    z = sol.x
    theta, y, N, nG = state(z)
    if not np.all(np.isfinite(z)) or theta < 0 or z[:-2].min(initial=0.0) < 0:
        return None
    out = np.zeros_like(lam)
    out[S] = z[:-2]
    out[-1] = theta
    return out, _spow(y, p) / N ** (p - 1.0)


def _dual_solve(prob, keep, near_tie):
    """Projected Newton ascent on the dual over the simplex, with guard cuts."""
    f, cfg, x = prob.f, prob.cfg, prob.x
    p, r, eta, tol = cfg.p, cfg.reg_exponent, cfg.eta, cfg.inner_tol
    rows = [f.G[j] for j in keep]
    offs = [f.b[j] for j in keep]
    tags = [j + 1 for j in keep]
    if prob.guard:
        rows.append(norm_subgradient(x, p))
        offs.append(-f.c)
        tags.append(GUARD)
    A = np.array(rows)
    c = A @ x + np.array(offs)

    def psi(lam):
        m, h = inner_min(lam @ A, p, r, eta)
        return float(lam @ c + m), c + A @ h, h

    def hessian(lam, h0):
        J = lam.size
        G = lam @ A
        scale = max(1.0, lp_norm(G, 2))
        tau = 1e-6 * scale
        H = np.empty((J, J))
        for j in range(J):
            _, hp = inner_min(G + tau * A[j], p, r, eta)
            _, hm = inner_min(G - tau * A[j], p, r, eta)
            H[:, j] = A @ (hp - hm) / (2 * tau)
        H = 0.5 * (H + H.T)
        # the dual is concave: keep the model's curvature nonpositive
        w, V = np.linalg.eigh(H)
        w = np.minimum(w, -1e-10 * max(1.0, np.abs(w).max()))
        return (V * w) @ V.T

    def polish(lam):
        # the dual is C^1 but not C^2 when G has tiny entries (q < 2), which
        # defeats finite-difference Newton; solve stationarity on the face
        if prob.guard and lam[-1] > 0:
            if p is INF or r != p:
                return None
            out = _guard_fixed_point(prob, A, c, lam)
            if out is None:
                return None
            return out[0], out[1]
        S = np.flatnonzero(lam > 0)
        if S.size < 2:
            return None

        def resid(z):
            full = np.zeros_like(lam)
            full[S] = np.append(z, 1.0 - z.sum())
            g = psi(full)[1][S]
            return g[:-1] - g[-1]

        sol = root(resid, lam[S[:-1]], method="hybr", options={"xtol": 1e-15})
        out = np.zeros_like(lam)
        out[S] = np.append(sol.x, 1.0 - sol.x.sum())
        if not np.all(np.isfinite(out)) or out.min() < 0:
            return None
        return out, None

    polishes = 0
    lam = np.zeros(len(rows))
    lam[int(np.argmax(c))] = 1.0
    best_primal = f(x)
    best_h = np.zeros_like(x)
    val, grad, h = psi(lam)
    best_dual, best_lam, best_A = val, lam.copy(), A.copy()
    it = 0
    stall = 0
    last_gap = math.inf
    while True:
        it += 1
        prim = prob.primal(h)
        if prim < best_primal:
            best_primal, best_h = prim, h
        if prob.guard:
            # re-linearize the norm at the current candidate; any supporting
            # hyperplane keeps the dual a valid lower bound
            y = x + h
            ny = lp_norm(y, p)
            model = float(A[-1] @ y) - f.c
            if ny - f.c - model > 1e-4 * tol and ny > 0:
                A[-1] = norm_subgradient(y, p)
                c[-1] = A[-1] @ x - f.c
                val, grad, h = psi(lam)
                if val > best_dual:
                    best_dual, best_lam, best_A = val, lam.copy(), A.copy()
        gap = best_primal - best_dual
        stall = stall + 1 if gap > 0.5 * last_gap else 0
        last_gap = min(gap, last_gap)
        if gap <= 1e-3 * tol or (gap <= tol and stall >= 3):
            break
        if stall >= 2 and polishes < 5:
            polishes += 1
            out = polish(lam)
            if out is not None:
                cand, w = out
                if w is not None:
                    A[-1] = w
                    c[-1] = w @ x - f.c
                cv, cg, ch = psi(cand)
                if cv >= val or w is not None:
                    lam, val, grad, h = cand, cv, cg, ch
                    if val > best_dual:
                        best_dual, best_lam, best_A = val, lam.copy(), A.copy()
                    continue
        if it >= cfg.inner_cap:
            if gap <= tol:
                break
            raise SmoothingError(best_primal, gap, it)
        H = hessian(lam, h)
        # quadratic model: maximize grad'(l - lam) + 1/2 (l - lam)'H(l - lam)
        Q = -H
        target = simplex_qp(Q, grad + Q @ lam, lam)
        step = target - lam
        slope = grad @ step
        t = 1.0
        moved = False
        while t > 1e-12:
            cand = lam + t * step
            cv, cg, ch = psi(cand)
            if cv >= val + 1e-4 * t * slope - 1e-15 * max(1.0, abs(val)):
                moved = True
                break
            t *= 0.5
        if not moved or np.abs(cand - lam).sum() <= 1e-15:
            # no further progress is possible in floating point
            prim = prob.primal(ch if moved else h)
            if prim < best_primal:
                best_primal, best_h = prim, ch if moved else h
            if best_primal - best_dual <= tol:
                break
            if not moved:
                raise SmoothingError(best_primal, best_primal - best_dual, it)
        lam, val, grad, h = cand, cv, cg, ch
        if val > best_dual:
            best_dual, best_lam, best_A = val, lam.copy(), A.copy()
    gradient = best_lam @ best_A
    used = tuple(sorted({tags[i] for i in np.flatnonzero(best_lam > 0)}))
    active = lp_norm(best_h, p) >= eta * (1 - 1e-9)
    return SmoothResult(best_primal, gradient, best_h, max(best_primal - best_dual, 0.0), it, False,
                        bool(active), near_tie, used)


def smooth_value(inst, x, cfg):
    """Sf(x) for the undivided max-form, within ``cfg.inner_tol``."""
    return smooth_solve(inst, x, cfg).value


def smooth_gradient(inst, x, cfg):
    """Gradient of Sf at x for the undivided max-form."""
    return smooth_solve(inst, x, cfg).gradient


def fd_gradient_check(inst, x, cfg, directions, step=1e-5):
    """Compare <grad Sf(x), u> with central differences along each direction u.

    Returns an array of (analytic, finite-difference) pairs.
    """
    x = np.asarray(x, dtype=np.float64)
    g = smooth_gradient(inst, x, cfg)
    out = []
    for u in np.atleast_2d(directions):
        fd = (smooth_value(inst, x + step * u, cfg) - smooth_value(inst, x - step * u, cfg)) / (2 * step)
        out.append((float(g @ u), fd))
    return np.array(out)
