"""Certificates, Monte Carlo audits and bound calculators.

* :func:`dual_certificate` computes min over the simplex of the support function
  of the feasible ball at sum_i lam_i z^i (the dual norm for the unit l_p ball),
  which upper-bounds the optimal value of the hard objective.
* :func:`concentration_audit` and :func:`dense_minimax_audit` check the two
  probabilistic ingredients of the construction by simulation.
* :func:`epsnet_count` and :func:`bound_table` are exact calculators.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import linprog
from scipy.stats import binomtest

from .geometry import INF, as_exponent, exponent_to_json, lp_norm, project_simplex
from .instance import (
    _alpha, _derive, _m_smooth, _sample_signs, check_conditions, dumps17,
    regime_cap, inverse_square_term, log_term, make_family, power_term, resolve_implicit_M,
)
from .smoothing import simplex_qp

WILSON_LEVEL = 0.999
KHINTCHINE_C = 1.0 / math.sqrt(2.0)


class CertificateError(RuntimeError):
    """The certificate solver stopped with a duality gap above tolerance."""

    def __init__(self, best_value, gap):
        self.best_value = best_value
        self.gap = gap
        super().__init__(f"certificate solver stopped at value {best_value:.12g} with gap {gap:.3e}")


@dataclass
class Certificate:
    """min over the simplex of the dual-norm objective, with a certified gap.

    ``value - gap`` is a proven lower bound on the true minimum.
    """

    value: float
    lam: np.ndarray
    gap: float
    method: str


# ---------------------------------------------------------------------------
# dual certificate

def _certificate_matrix(family):
    """Matrix A and exponent q with objective ||lam @ A||_q.

    Disjoint families collapse each block to one coordinate: a block of L
    entries of magnitude m has q-norm L^(1/q) m.
    """
    q = family.space.dual
    scale = 1.0
    if family.kind == "inscribed":
        # support function of the l_2 ball of radius d^(1/2 - 1/p)
        q = 2.0
        scale = float(family.d) ** (0.5 - 1.0 / as_exponent(family.p))
    if family.kind == "disjoint":
        w = 1.0 if q is INF else float(family.L) ** (1.0 / q)
        A = np.eye(family.M) * (w * family.magnitude)
    else:
        A = family.dense()
    return A * scale, q


def _gram_certificate(G, tol):
    M = G.shape[0]
    lam0 = np.full(M, 1.0 / M)
    lam = simplex_qp(2.0 * G, np.zeros(M), lam0)
    phi = float(lam @ G @ lam)
    g = 2.0 * G @ lam
    gap = max(float(g @ lam - g.min()), 0.0)
    val = math.sqrt(max(phi, 0.0))
    lb = math.sqrt(max(phi - gap, 0.0))
    return Certificate(val, lam, val - lb, "gram-qp")


def _lp_certificate(A, q):
    """Exact LP for q in {1, inf}."""
    M, n = A.shape
    if q is INF:
        # variables (lam, t): min t, -t <= (A^T lam)_j <= t
        c = np.zeros(M + 1)
        c[-1] = 1.0
        At = A.T
        ones = np.ones((n, 1))
        A_ub = np.vstack([np.hstack([At, -ones]), np.hstack([-At, -ones])])
        b_ub = np.zeros(2 * n)
        A_eq = np.hstack([np.ones((1, M)), np.zeros((1, 1))])
        bounds = [(0, None)] * M + [(0, None)]
    else:
        # variables (lam, s): min sum s, -s <= A^T lam <= s
        c = np.concatenate([np.zeros(M), np.ones(n)])
        At = A.T
        I = np.eye(n)
        A_ub = np.vstack([np.hstack([At, -I]), np.hstack([-At, -I])])
        b_ub = np.zeros(2 * n)
        A_eq = np.concatenate([np.ones(M), np.zeros(n)])[None, :]
        bounds = [(0, None)] * (M + n)
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0], bounds=bounds, method="highs")
    if res.status != 0:
        raise CertificateError(math.nan, math.inf)
    lam = np.maximum(res.x[:M], 0.0)
    lam /= lam.sum()
    val = lp_norm(lam @ A, q)
    dual_bound = float(res.fun) if getattr(res, "fun", None) is not None else val
    gap = max(val - dual_bound, 0.0)
    return Certificate(val, lam, gap, "lp")


def _smooth_certificate(A, q, tol, max_iter):
    """Accelerated projected gradient on 1/2 ||lam @ A||_q^2 with a Frank-Wolfe gap."""
    M = A.shape[0]

    def obj(lam):
        v = lam @ A
        n = lp_norm(v, q)
        if n == 0:
            return 0.0, np.zeros(M)
        w = n ** (2.0 - q) * np.sign(v) * np.abs(v) ** (q - 1.0)
        return 0.5 * n * n, A @ w

    lam = np.full(M, 1.0 / M)
    f, g = obj(lam)
    y, fy, gy = lam, f, g
    step = 1.0
    a = 1.0
    best = (math.sqrt(2 * f), lam, math.inf)
    for _ in range(max_iter):
        gap = max(float(g @ lam - g.min()), 0.0)
        val = math.sqrt(2.0 * f)
        lb = math.sqrt(max(2.0 * (f - gap), 0.0))
        if val - lb < best[2] or val < best[0]:
            best = (val, lam, val - lb)
        if val - lb <= 0.01 * tol:
            return Certificate(val, lam, val - lb, "apg")
        # backtracking on the accelerated sequence
        while True:
            cand = project_simplex(y - step * gy)
            fc, gc = obj(cand)
            d = cand - y
            if fc <= fy + gy @ d + 0.5 / step * (d @ d) + 1e-15 * max(1.0, abs(fy)):
                break
            step *= 0.5
            if step < 1e-20:
                break
        a_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * a * a))
        if fc > f:
            # restart the momentum when the objective goes up
            y, fy, gy, a = lam, f, g, 1.0
            step *= 2.0
            continue
        y = cand + ((a - 1.0) / a_new) * (cand - lam)
        y = project_simplex(y)
        fy, gy = obj(y)
        lam, f, g, a = cand, fc, gc, a_new
        step *= 1.25
    val, lam, gap = best
    if gap <= tol:
        return Certificate(val, lam, gap, "apg")
    raise CertificateError(val, gap)


def dual_certificate(family, tol=1e-6, max_iter=20000):
    """min over lam in the simplex of sup_{x feasible} <-sum_i lam_i z^i, x>.

    For the unit l_p ball this is min ||sum_i lam_i z^i||_{p*}; for the
    inscribed kind it is d^(1/2 - 1/p) min ||sum_i lam_i z^i||_2.

    Methods: an active-set QP on the exact Gram matrix when the norm is l_2,
    a linear program when it is l_1 or l_inf, and accelerated projected
    gradient with a Frank-Wolfe certificate otherwise.

    Raises
    ------
    CertificateError
        If the certified gap exceeds ``tol`` at the iteration cap.
    """
    M = family.M
    if M < 1:
        raise ValueError("certificate needs M >= 1")
    q = 2.0 if family.kind == "inscribed" else family.space.dual
    if q == 2.0 and family.kind != "disjoint":
        s = 1.0
        if family.kind == "inscribed":
            s = float(family.d) ** (0.5 - 1.0 / as_exponent(family.p))
        G = family.gram() * s * s
        if M == 1:
            return Certificate(math.sqrt(G[0, 0]), np.ones(1), 0.0, "singleton")
        return _gram_certificate(G, tol)
    A, q = _certificate_matrix(family)
    if M == 1:
        return Certificate(float(lp_norm(A[0], q)), np.ones(1), 0.0, "singleton")
    if q is INF or q == 1.0:
        return _lp_certificate(A, q)
    if q == 2.0:
        return _gram_certificate(A @ A.T, tol)
    return _smooth_certificate(A, q, tol, max_iter)


def fstar_upper_bound(cert, mu, eta, delta_bar):
    """F* <= -cert/(2 mu) + (eta - delta_bar/2)/mu."""
    if cert < 0:
        raise ValueError("certificate must be nonnegative")
    return -cert / (2.0 * mu) + (eta - delta_bar / 2.0) / mu


def instance_fstar_bound(inst, cert=None):
    """Certified upper bound on the optimal value of ``inst`` over its feasible set."""
    if inst.scale != 1.0:
        raise ValueError("certified bound implemented for unscaled instances")
    if cert is None:
        cert = dual_certificate(inst.family).value
    return fstar_upper_bound(cert, 1.0 / inst.outer, inst.plan.eta, inst.delta_bar)


# ---------------------------------------------------------------------------
# concentration audit

def wilson_interval(k, n, level=WILSON_LEVEL):
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def concentration_audit(plan, x, deltas, N, seed=0, alpha=None, level=WILSON_LEVEL):
    """Empirical tails of <z, x> over N fresh draws of z, against exp(-alpha delta^2).

    Both tails P[<z,x> >= delta] and P[<z,x> <= -delta] are reported with
    Wilson intervals; a row is flagged when either lower confidence bound
    exceeds the bound. ``alpha`` defaults to the plan's concentration exponent.

    Raises
    ------
    ValueError
        If x is outside the plan's feasible set or N < 1000.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (plan.d,):
        raise ValueError(f"probe has dimension {x.size}, plan has d={plan.d}")
    if N < 1000:
        raise ValueError("N must be at least 1000")
    qf, R = plan.feasible
    if lp_norm(x, qf) > R * (1 + 1e-12):
        raise ValueError("infeasible x: outside the feasible ball")
    alpha = plan.alpha if alpha is None else float(alpha)
    family = make_family(plan.p, plan.d, 1, plan.kind, 0, L=plan.L if plan.kind == "disjoint" else None)
    mag = family.magnitude
    support = x[: plan.L]
    signs = _sample_signs(int(N), plan.L, seed).astype(np.float64)
    ip = mag * (signs @ support)
    rows = []
    for dlt in deltas:
        bound = math.exp(-alpha * dlt * dlt)
        up = int(np.count_nonzero(ip >= dlt))
        lo = int(np.count_nonzero(ip <= -dlt))
        ci_up = wilson_interval(up, N, level)
        ci_lo = wilson_interval(lo, N, level)
        rows.append({"delta": float(dlt), "upper_tail": up / N, "upper_ci": ci_up,
                     "lower_tail": lo / N, "lower_ci": ci_lo, "bound": bound,
                     "flag": bool(ci_up[0] > bound or ci_lo[0] > bound)})
    return {"alpha": alpha, "N": int(N), "level": level, "rows": rows,
            "flagged": any(r["flag"] for r in rows)}


# ---------------------------------------------------------------------------
# dense minimax audit

def minimax_threshold(M):
    """(c - c/2) / sqrt(M) with the Khintchine constant c = 1/sqrt(2)."""
    return (KHINTCHINE_C / 2.0) / math.sqrt(M)


def dense_minimax_audit(p, d, M, N, seed0=0, eps=None, gamma=0.05):
    """Distribution of dense-family certificates over N seeds.

    The regime check uses the given ``eps``; without it, the largest eps the
    first term admits (1/sqrt(200 M)) is used for the second.
    """
    p = as_exponent(p)
    if p is INF or not 1.0 < p <= 2.0:
        raise ValueError("the dense minimax audit needs 1 < p <= 2")
    e = eps if eps is not None else 1.0 / math.sqrt(200.0 * M)
    cap = regime_cap(d, e, gamma)
    regime_ok = M <= cap
    thr = minimax_threshold(M)
    vals = np.array([dual_certificate(make_family(p, d, M, "dense", s)).value
                     for s in range(seed0, seed0 + int(N))])
    return {"p": exponent_to_json(p), "d": d, "M": M, "N": int(N), "threshold": thr,
            "fraction_below": float(np.mean(vals < thr)), "values": vals,
            "regime_ok": bool(regime_ok), "regime_cap": cap, "eps": e, "gamma": gamma}


# ---------------------------------------------------------------------------
# epsilon-net arithmetic

def _net_size(M, eps):
    return math.ceil(Fraction(M) / Fraction(eps))


def epsnet_count(M, eps):
    """Exact lattice count C(ceil(M/eps) + M, M) and the bound (3/eps)^M.

    ``eps`` is converted to an exact rational; the bound is returned as a
    Fraction so the comparison is exact.
    """
    M = int(M)
    e = Fraction(eps)
    if M < 1 or not 0 < e <= 1:
        raise ValueError("need M >= 1 and eps in (0, 1]")
    exact = math.comb(_net_size(M, e) + M, M)
    bound = (Fraction(3) / e) ** M
    return {"exact": exact, "bound": bound, "holds": exact <= bound}


def epsnet_count_dp(M, eps):
    """Count nonnegative integer vectors of length M with sum at most ceil(M/eps)."""
    n = _net_size(int(M), Fraction(eps))
    ways = [1 if s == 0 else 0 for s in range(n + 1)]
    for _ in range(int(M)):
        acc, nxt = 0, []
        for s in range(n + 1):
            acc += ways[s]
            nxt.append(acc)
        ways = nxt
    return sum(ways)


# ---------------------------------------------------------------------------
# bound table

BOUNDS = ("dense", "inscribed_l2", "disjoint", "smooth", "embedding")


@dataclass
class BoundRow:
    bound: str
    applicable: bool
    M: object = None
    left: object = None
    right: object = None
    binding: object = None
    high_dim: object = None
    feasible: object = None
    violations: list = field(default_factory=list)
    delta_bar: object = None
    order_only: bool = False
    constants: dict = field(default_factory=dict)
    note: str = ""


@dataclass
class BoundReport:
    inputs: dict
    rows: list

    def row(self, bound):
        return next(r for r in self.rows if r.bound == bound)

    def to_json(self):
        return dumps17({"inputs": self.inputs, "rows": [asdict(r) for r in self.rows]}, indent=2)


def _min_with_binding(left, right):
    return (left, "left") if left <= right else (right, "right")


def _feasibility(p, d, K, eps, gamma, kappa, kind, M, c_delta):
    if M < 1:
        return False, ["M >= 1"], None
    plan = _derive(p, d, K, eps, gamma, kappa, "theorem-faithful", kind, M, c_delta, "table")
    bad = check_conditions(plan)
    return not bad, [name for name, _ in bad], plan.delta_bar


def bound_table(p, kappa, eps, d, K, gamma, c_delta=16.0, c_regime=200.0, c_kappa=1.0, nu=1.0):
    """Every applicable lower-bound formula at one setting.

    Each implicit M (through ln(MK/gamma)) is resolved by the same downward
    fixed point as the instance planner. ``left``/``right`` are the two terms of
    the min evaluated at the final M; ``binding`` names the smaller one; the
    high-dimensional regime holds when the dimension-free left term binds.
    Rows for the embedding bound use c_kappa and nu (default 1) and are
    flagged order-only.
    """
    p = as_exponent(p)
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 1/2)")
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    inputs = {"p": exponent_to_json(p), "kappa": kappa, "eps": eps, "d": d, "K": K, "gamma": gamma,
              "c_delta": c_delta, "c_regime": c_regime, "c_kappa": c_kappa, "nu": nu}
    rows = []
    pf = math.inf if p is INF else p
    c2 = 2.0 * c_delta ** 2

    def finish(name, left, right_fn, kind, consts, note=""):
        M = resolve_implicit_M(lambda ln: min(left, right_fn(ln)), d, K, gamma)
        right = right_fn(log_term(max(M, 1), K, gamma))
        _, binding = _min_with_binding(left, right)
        ok, bad, db = _feasibility(p, d, K, eps, gamma, kappa, kind, M, c_delta)
        rows.append(BoundRow(name, True, M, left, right, binding, binding == "left", ok, bad, db,
                             False, consts, note))

    # nonsmooth 1 < p <= 2, dense family
    if kappa == 0 and 1 < pf <= 2:
        alpha = _alpha("dense", p, d, d)
        finish("dense", inverse_square_term(eps, c_regime),
               lambda ln: eps * math.sqrt(alpha) / (2.0 * c_delta * math.sqrt(ln)), "dense",
               {"c_delta": c_delta, "c_regime": c_regime, "alpha": alpha})
    else:
        rows.append(BoundRow("dense", False, note="needs kappa = 0 and 1 < p <= 2"))
    # nonsmooth 1 <= p <= 2 on the inscribed l_2 ball
    if kappa == 0 and 1 <= pf <= 2:
        finish("inscribed_l2", inverse_square_term(eps, c_regime),
               lambda ln: eps * math.sqrt(d) / (2.0 * c_delta * math.sqrt(ln)), "inscribed",
               {"c_delta": c_delta, "c_regime": c_regime, "alpha": float(d)})
    else:
        rows.append(BoundRow("inscribed_l2", False, note="needs kappa = 0 and 1 <= p <= 2"))
    # nonsmooth p >= 2, disjoint family
    if kappa == 0 and pf >= 2:
        finish("disjoint", power_term(eps, p), lambda ln: (eps ** 2 * d / (c2 * ln)) ** (1.0 / 3.0), "disjoint",
               {"c_delta": c_delta})
    else:
        rows.append(BoundRow("disjoint", False, note="needs kappa = 0 and p >= 2"))
    # (weakly) smooth p >= 2
    if pf >= 2:
        m = _m_smooth(p, d)
        if p is INF:
            if kappa == 0:
                rows.append(BoundRow("smooth", False, note="uninformative at kappa = 0, p = inf"))
                e1 = None
            else:
                e1, e2, inner = 1.0 / kappa, 2.0 / kappa, 2.0 ** (3.0 + 2.0 * kappa)
        else:
            e1 = pf / (1.0 + kappa * (1.0 + pf))
            e2 = 2.0 * (1.0 + pf) / (1.0 + kappa * (1.0 + pf))
            inner = 2.0 ** ((1.0 + 3.0 * pf + 2.0 * kappa * (1.0 + pf)) / (1.0 + pf))
        if e1 is not None:
            left = (1.0 / (2.0 ** (3.0 + 4.0 * kappa) * eps * m ** kappa)) ** e1
            finish("smooth", left, lambda ln: d / (c2 * ln) * (inner * m ** kappa * eps) ** e2,
                   "disjoint", {"c_delta": c_delta, "min_p_lnd": m})
    else:
        rows.append(BoundRow("smooth", False, note="needs p >= 2"))
    # embedding bound for 1 <= p < 2 (constants unspecified)
    if 1 <= pf < 2:
        lnl = math.log(d * K / gamma)
        denom = math.log(1.0 / eps) + (kappa * math.log(lnl) if kappa > 0 else 0.0)
        val = c_kappa / denom * (1.0 / eps) ** (2.0 / (3.0 + 2.0 * kappa))
        T = math.ceil(2.0 * math.log(nu * d * K / gamma) ** (2.0 * kappa / (3.0 + 2.0 * kappa))
                      * (1.0 / eps) ** (6.0 / (3.0 + 2.0 * kappa)))
        rows.append(BoundRow("embedding", True, math.floor(val), val, None, "single", d >= T / nu, None, [],
                             None, True, {"c_kappa": c_kappa, "nu": nu, "T": T},
                             "order-only: constants are not specified"
                             + ("" if kappa > 0 else "; kappa = 0 is the nonsmooth reduction")))
    else:
        rows.append(BoundRow("embedding", False, note="needs 1 <= p < 2"))
    return BoundReport(inputs, rows)


TABLE_COLUMNS = (("p=1", 1.0), ("1<p<2", 1.5), ("2<=p<inf", 4.0), ("p=inf", INF))


def _strongest(report):
    best = None
    for r in report.rows:
        if r.applicable and r.M is not None and (best is None or r.M > best.M):
            best = r
    return best


def table1_csv(eps, d, K, gamma, kappas=(0.0, 1.0), columns=TABLE_COLUMNS, **consts):
    """Table-style CSV: one row per smoothness order, one column per p regime.

    Each cell holds the largest applicable M and the bound providing it.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kappa"] + [f"{name} (p={exponent_to_json(pv)})" for name, pv in columns])
    for kappa in kappas:
        cells = []
        for _, pv in columns:
            r = _strongest(bound_table(pv, kappa, eps, d, K, gamma, **consts))
            cells.append("n/a" if r is None else f"{r.M} [{r.bound}{' order-only' if r.order_only else ''}]")
        w.writerow([kappa] + cells)
    return buf.getvalue()


def report_csv(report):
    """One CSV row per bound of a single report."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["bound", "applicable", "M", "left", "right", "binding", "high_dim", "feasible",
            "order_only", "delta_bar", "note"]
    w.writerow(cols)
    for r in report.rows:
        w.writerow([_cell(getattr(r, c)) for c in cols])
    return buf.getvalue()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


# ---------------------------------------------------------------------------
# gap audit

def gap_audit(run, inst, cert_bound, eps):
    """gap = best value of the run minus the certified bound; respected iff gap > eps."""
    if run.instance_seed is not None and inst.family.seed is not None and run.instance_seed != inst.family.seed:
        raise ValueError("run was not executed on this instance")
    gap = float(run.best_value - cert_bound)
    return {"gap": gap, "respected": bool(gap > eps), "rounds": run.rounds_used, "M": inst.M}
