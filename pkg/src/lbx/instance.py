"""Random direction families, the nonsmooth hard objective, and protocol parameters.

The objective is

    F(x) = (1/mu) * max{ 1/2 * max_i [<z^i, x> - i*delta_bar],  ||x||_p - guard },
    guard = (3(1 + r) + M*delta_bar) / 2,

with z^i = L^(-1/p*) * (sign vector on the support of z^i). Affine branches are
numbered 1..M; the norm guard is reported as branch 0 (:data:`GUARD`).
"""
from __future__ import annotations

import base64
import math
from fractions import Fraction
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (INF, DimensionError, LpSpace, as_exponent, dual_exponent,
                       exponent_to_json, lp_norm, norm_subgradient)

GUARD = 0
KINDS = ("dense", "disjoint", "inscribed")
MODES = ("theorem-faithful", "demonstration")
SCHEMA_VERSION = 1
# Above this many entries the float64 copy of a family is not cached.
DENSE_CACHE_LIMIT = 1 << 26


class InfeasibleConfigError(ValueError):
    """A parameter choice violates one of the construction's inequalities.

    Attributes
    ----------
    conditions : list of str
        Names of the violated conditions, e.g. ``"offset spacing"``.
    details : list of str
        One human-readable line per violation.
    """

    def __init__(self, conditions, details):
        self.conditions = list(conditions)
        self.details = list(details)
        super().__init__("infeasible configuration: " + "; ".join(self.details))


class SchemaError(ValueError):
    """An instance document does not match the schema."""


# ---------------------------------------------------------------------------
# sign generation

def sign_bits(seed, i, n, start=0):
    """Bits ``start .. start+n-1`` of the sign stream of vector ``i``.

    The stream is Philox4x64-10 keyed by ``seed`` with counter (0, 0, 0, i);
    bit j is bit (j mod 64) of 64-bit output word j // 64. A set bit means a
    negative sign. Any window of any vector is reproducible on its own.
    """
    if seed is None or int(seed) != seed or seed < 0 or seed >= 1 << 64:
        raise ValueError(f"seed must be an integer in [0, 2^64), got {seed!r}")
    if n <= 0:
        return np.zeros(0, dtype=np.uint8)
    w0 = start // 64
    w1 = (start + n - 1) // 64 + 1
    block0 = w0 // 4
    bg = np.random.Philox(key=int(seed), counter=[0, 0, 0, int(i)])
    if block0:
        bg.advance(block0)
    words = bg.random_raw(w1 - 4 * block0)[w0 - 4 * block0:]
    bits = np.unpackbits(words.astype("<u8").view(np.uint8), bitorder="little")
    off = start - 64 * w0
    return bits[off:off + n]


def signs_from_bits(bits):
    return (1 - 2 * bits.astype(np.int8)).astype(np.int8)


# ---------------------------------------------------------------------------
# vector families

def _chunked_matvecs(S, X, chunk=1 << 14):
    """Rows of X @ S.T for a small-integer matrix S, accumulated chunk by chunk.

    Chunks run in the outer loop, so each chunk of S is read from memory once
    per batch and widened to float64 in cache. The summation order for a row
    depends only on the shapes, so each result does not depend on which
    other rows share the batch.
    """
    out = np.zeros((X.shape[0], S.shape[0]))
    for c0 in range(0, X.shape[1], chunk):
        Sc = S[:, c0:c0 + chunk].astype(np.float64)
        for k in range(X.shape[0]):
            out[k] += Sc @ X[k, c0:c0 + chunk]
    return out


@dataclass(eq=False)
class VectorFamily:
    """M random directions z^1..z^M in the unit dual ball.

    Entries are stored as +-1 signs on each support block plus the common
    magnitude L^(-1/p*). Block i (0-based) starts at ``offsets[i]``.
    """

    space: LpSpace
    M: int
    kind: str
    L: int
    seed: object
    signs: np.ndarray
    _dense: np.ndarray = field(default=None, repr=False)
    _blocks: np.ndarray = field(default=None, repr=False)
    _packed: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}")
        if self.signs.shape != (self.M, self.L):
            raise ValueError("sign array has the wrong shape")
        if self.kind == "disjoint":
            if self.M * self.L > self.space.d:
                raise ValueError("disjoint supports need M*L <= d")
        elif self.L != self.space.d:
            raise ValueError("dense families use L = d")

    @property
    def d(self):
        return self.space.d

    @property
    def p(self):
        return self.space.p

    @property
    def magnitude(self):
        q = self.space.dual
        if q is INF:
            return 1.0
        return float(self.L) ** (-1.0 / q)

    @property
    def offsets(self):
        if self.kind == "disjoint":
            return [i * self.L for i in range(self.M)]
        return [0] * self.M

    def support(self, i):
        """Index range of the support of z^(i+1) (0-based ``i``)."""
        o = self.offsets[i]
        return range(o, o + self.L)

    def vector(self, i):
        """Dense copy of z^(i+1) (0-based ``i``)."""
        z = np.zeros(self.d)
        o = self.offsets[i]
        z[o:o + self.L] = self.magnitude * self.signs[i]
        return z

    def scaled_vector(self, i, c, out=None):
        """c * z^(i+1), read from the cached matrix when one exists."""
        if self.kind != "disjoint":
            return np.multiply(self.signs[i], c * self.magnitude, out=out, dtype=np.float64)
        return np.multiply(self.vector(i), c, out=out)

    def dense(self):
        """Dense M x d float64 matrix of all vectors (cached when small)."""
        if self._dense is not None:
            return self._dense
        if self.kind != "disjoint" and self._blocks is not None:
            return self._blocks
        Z = np.zeros((self.M, self.d))
        for i in range(self.M):
            o = self.offsets[i]
            Z[i, o:o + self.L] = self.signs[i]
        Z *= self.magnitude
        if self.M * self.d <= DENSE_CACHE_LIMIT:
            self._dense = Z
        return Z

    def inner(self, X):
        """Inner products <z^i, x> for a point (shape (M,)) or a stack (shape (K, M))."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X2 = np.atleast_2d(X)
        if X2.shape[1] != self.d:
            raise DimensionError(f"point has dimension {X2.shape[1]}, space has d={self.d}")
        out = np.empty((X2.shape[0], self.M))
        if self.M == 0:
            return out[0] if single else out
        if self.kind != "disjoint":
            out[:] = self.magnitude * _chunked_matvecs(self.signs, X2)
            return out[0] if single else out
        # one contraction per query, so each answer is bitwise independent
        # of the other queries in its batch
        B = self._block_matrix()
        span = self.M * self.L
        for k, x in enumerate(X2):
            seg = x[:span].reshape(self.M, self.L)
            if B is not None:
                out[k] = np.einsum("ml,ml->m", seg, B)
            else:
                out[k] = self.magnitude * np.einsum("ml,ml->m", seg, self.signs.astype(np.float64))
        return out[0] if single else out

    def _block_matrix(self):
        """Cached float64 copy of the support blocks (M x L), or None if too big."""
        if self._blocks is not None:
            return self._blocks
        if self.kind != "disjoint" and self._dense is not None:
            return self._dense
        if self.M * self.L <= DENSE_CACHE_LIMIT:
            self._blocks = self.magnitude * self.signs.astype(np.float64)
            return self._blocks
        return None

    def packed_bits(self):
        """Sign bits packed 8 per byte (row-major, big-endian bit order)."""
        if self._packed is None:
            self._packed = np.packbits(self.signs < 0, axis=1)
        return self._packed

    def gram(self):
        """Exact Gram matrix <z^i, z^k>, computed from sign agreements."""
        G = np.zeros((self.M, self.M))
        if self.kind == "disjoint":
            np.fill_diagonal(G, self.L * self.magnitude ** 2)
            return G
        P = self.packed_bits()
        for a in range(self.M):
            x = np.bitwise_xor(P[a][None, :], P[a:])
            diff = np.bitwise_count(x).sum(axis=1, dtype=np.int64)
            agree = self.L - 2 * diff
            G[a, a:] = agree
            G[a:, a] = agree
        return G * self.magnitude ** 2

    def combination(self, lam):
        """Dense vector sum_i lam_i z^i."""
        lam = np.asarray(lam, dtype=np.float64)
        v = np.zeros(self.d)
        for i in range(self.M):
            if lam[i] != 0.0:
                o = self.offsets[i]
                v[o:o + self.L] += (lam[i] * self.magnitude) * self.signs[i]
        return v

    def dual_norms(self):
        """||z^i||_{p*} recomputed from the stored entries."""
        return np.array([lp_norm(self.magnitude * self.signs[i], self.space.dual)
                         for i in range(self.M)])

    def exact_unit_check(self):
        """Integer check that every |entry| equals the magnitude and |support| = L.

        With magnitude L^(-1/p*), ||z^i||_{p*}^{p*} = L * L^(-1) = 1 then holds
        exactly; this verifies the integer side of that identity.
        """
        return bool(np.all(np.abs(self.signs.astype(np.int64)) == 1)) and self.signs.shape[1] == self.L


def _sample_signs(M, L, seed):
    out = np.empty((M, L), dtype=np.int8)
    for i in range(M):
        out[i] = signs_from_bits(sign_bits(seed, i + 1, L))
    return out


def make_family(p, d, M, kind, seed, L=None, signs=None):
    """Build a family from a seed or from explicit signs.

    For ``kind="disjoint"`` the default block size is floor(d/M).
    """
    space = LpSpace(d, p)
    M = int(M)
    if kind == "disjoint":
        L = int(L) if L is not None else d // max(M, 1)
        if L < 1:
            raise ValueError("block size must be positive")
    else:
        if L is not None and int(L) != d:
            raise ValueError("dense and inscribed families use L = d")
        L = d
    if signs is None:
        if seed is None:
            raise SchemaError("underdetermined family: neither seed nor explicit sign bits given")
        signs = _sample_signs(M, L, seed)
    signs = np.asarray(signs, dtype=np.int8).reshape(M, L)
    return VectorFamily(space=space, M=M, kind=kind, L=L, seed=seed, signs=signs)


# ---------------------------------------------------------------------------
# parameter planning

def log_term(M, K, gamma):
    return math.log(M * K / gamma)


def _alpha(kind, p, d, L):
    if kind == "dense":
        q = dual_exponent(p)
        return 1.0 if q is INF else float(d) ** (2.0 / q)
    if kind == "disjoint":
        return L / 2.0
    return float(d)


def _delta_bar(c_delta, M, K, gamma, alpha):
    return c_delta * math.sqrt(log_term(M, K, gamma) / alpha)


def smoothing_mu(p, d, kappa, eta):
    """Regularity constant 2^(1-kappa) * (min{p, ln d} / eta)^kappa."""
    p = as_exponent(p)
    m = math.log(d) if p is INF else min(p, math.log(d))
    return 2.0 ** (1.0 - kappa) * (m / eta) ** kappa


def resolve_implicit_M(f, d, K, gamma, iters=50):
    """Largest integer M with M <= f(ln(MK/gamma)), by fixed-point iteration.

    Starts from the looser ln(dK/gamma) and takes at most ``iters`` steps;
    a final downward scan guarantees M <= f(ln(MK/gamma)). Returns 0 when no
    M >= 1 qualifies.
    """
    M = math.floor(f(log_term(d, K, gamma)))
    for _ in range(iters):
        if M < 1:
            break
        nxt = math.floor(f(log_term(M, K, gamma)))
        if nxt == M:
            break
        M = nxt
    M = max(M, 0)
    while M >= 1 and M > f(log_term(M, K, gamma)):
        M -= 1
    return M


def _m_smooth(p, d):
    p = as_exponent(p)
    return math.log(d) if p is INF else min(p, math.log(d))


def _balanced_block(p, d, kappa, eps, c_delta, ln):
    """Block size equalizing the two constraints of the weakly smooth construction."""
    mbar = 2.0 ** (1.0 - kappa) * (8.0 * _m_smooth(p, d)) ** kappa
    base = 4.0 * mbar * eps
    if as_exponent(p) is INF:
        fac = base ** (-2.0 / kappa)
    else:
        fac = (4.0 / base ** (p + 1.0)) ** (2.0 / (1.0 + kappa * (1.0 + p)))
    return 2.0 * c_delta ** 2 * ln * fac


@dataclass(frozen=True)
class InstancePlan:
    """Every parameter of one hard-instance distribution."""

    p: object
    d: int
    K: int
    eps: float
    gamma: float
    kappa: float
    mode: str
    kind: str
    M: int
    L: int
    alpha: float
    c_delta: float
    delta_bar: float
    mu: float
    eta: float
    r: float
    rule: str = "forced"
    violations: tuple = ()

    @property
    def space(self):
        return LpSpace(self.d, self.p)

    @property
    def log_term(self):
        return log_term(self.M, self.K, self.gamma)

    @property
    def guard(self):
        return 0.5 * (3.0 * (1.0 + self.r) + self.M * self.delta_bar)

    @property
    def feasible(self):
        """(norm exponent, radius) of the feasible ball used by algorithms.

        The inscribed kind lives on the l_2 ball of radius d^(1/2 - 1/p),
        the largest l_2 ball inside the unit l_p ball for p <= 2.
        """
        if self.kind == "inscribed":
            return 2.0, float(self.d) ** (0.5 - 1.0 / as_exponent(self.p))
        return self.p, 1.0

    def summary(self):
        return {
            "p": exponent_to_json(self.p), "d": self.d, "K": self.K, "eps": self.eps,
            "gamma": self.gamma, "kappa": self.kappa, "mode": self.mode, "kind": self.kind,
            "M": self.M, "L": self.L, "alpha": self.alpha, "c_delta": self.c_delta,
            "delta_bar": self.delta_bar, "mu": self.mu, "eta": self.eta, "r": self.r,
            "guard": self.guard, "rule": self.rule, "violations": list(self.violations),
        }


def check_conditions(plan):
    """List (name, detail) for every construction inequality the plan violates."""
    out = []
    p = as_exponent(plan.p)
    M, eps, mu = plan.M, plan.eps, plan.mu
    if M < 1:
        out.append(("M >= 1", f"M={M}"))
        return out
    if plan.kind == "disjoint" and M * plan.L > plan.d:
        out.append(("M*L <= d", f"M*L={M * plan.L} > d={plan.d}"))
    rhs = mu * eps / M
    if plan.delta_bar > rhs * (1 + 1e-12):
        out.append(("offset spacing", f"delta_bar={plan.delta_bar:.6g} > mu*eps/M={rhs:.6g}"))
    if plan.kappa > 0:
        if plan.r > plan.delta_bar / 8 * (1 + 1e-12):
            out.append(("smoothing radius", f"r={plan.r:.6g} > delta_bar/8={plan.delta_bar / 8:.6g}"))
        if plan.eta > eps * mu / 4 * (1 + 1e-12):
            out.append(("smoothing closeness", f"eta={plan.eta:.6g} > eps*mu/4={eps * mu / 4:.6g}"))
    if plan.kind == "disjoint":
        lhs = 1.0 if p is INF else M ** (-1.0 / p)
        if lhs < 4 * mu * eps * (1 - 1e-12):
            out.append(("minimax margin", f"M^(-1/p)={lhs:.6g} < 4*mu*eps={4 * mu * eps:.6g}"))
    else:
        cap = regime_cap(plan.d, eps, plan.gamma)
        if M > cap:
            out.append(("dense minimax regime", f"M={M} outside the dense minimax regime (cap {cap:.6g})"))
    if 3 * (1 + plan.r) + (M - 1) * plan.delta_bar > 4 * (1 + 1e-12):
        out.append(("guard radius <= 4",
                    f"3(1+r)+(M-1)delta_bar={3 * (1 + plan.r) + (M - 1) * plan.delta_bar:.6g} > 4"))
    return out


def _dec(x):
    """x as the rational with the shortest decimal form that round-trips."""
    return Fraction(repr(float(x)))


def inverse_square_term(eps, c_regime=200.0):
    """1/(c_regime eps^2), evaluated exactly from the decimal form of eps.

    Exact evaluation keeps integer-valued terms (2 at eps = 0.05) from
    rounding below the integer and losing one round under the floor.
    """
    return float(1 / (_dec(c_regime) * _dec(eps) ** 2))


def power_term(eps, p):
    """(4 eps)^(-p), exact for integer p; the p -> inf limit for p = INF."""
    p = as_exponent(p)
    if p is INF:
        return math.inf if 4 * _dec(eps) < 1 else (1.0 if 4 * _dec(eps) == 1 else 0.0)
    if float(p).is_integer():
        return float(1 / (4 * _dec(eps)) ** int(p))
    return (4.0 * eps) ** (-p)


def regime_cap(d, eps, gamma):
    """min{1/(200 eps^2), (d/12 - ln(1/gamma)) / ln(3/eps)}."""
    return min(inverse_square_term(eps), (d / 12.0 - math.log(1.0 / gamma)) / math.log(3.0 / eps))


def _derive(p, d, K, eps, gamma, kappa, mode, kind, M, c_delta, rule):
    if kind == "disjoint":
        L = d // M if M >= 1 else d
        if kappa > 0 and M >= 1:
            lb = _balanced_block(p, d, kappa, eps, c_delta, log_term(M, K, gamma))
            L = max(1, min(L, math.floor(lb)))
    else:
        L = d
    alpha = _alpha(kind, p, d, L)
    db = _delta_bar(c_delta, max(M, 1), K, gamma, alpha)
    if kappa > 0:
        eta = db / 8.0
        r = eta
        mu = smoothing_mu(p, d, kappa, eta)
    else:
        eta = r = 0.0
        mu = 1.0
    return InstancePlan(p=p, d=d, K=K, eps=eps, gamma=gamma, kappa=kappa, mode=mode,
                        kind=kind, M=M, L=L, alpha=alpha, c_delta=c_delta, delta_bar=db,
                        mu=mu, eta=eta, r=r, rule=rule)


def _auto_M(p, d, K, eps, gamma, kappa, kind, c_delta):
    """Round count from the matching lower-bound formula (constants generalized in c_delta)."""
    p = as_exponent(p)
    if kappa > 0:
        m = _m_smooth(p, d)
        if p is INF:
            e1 = 1.0 / kappa
            e2 = 2.0 / kappa
            inner = 2.0 ** (3.0 + 2.0 * kappa)
        else:
            e1 = p / (1.0 + kappa * (1.0 + p))
            e2 = 2.0 * (1.0 + p) / (1.0 + kappa * (1.0 + p))
            inner = 2.0 ** ((1.0 + 3.0 * p + 2.0 * kappa * (1.0 + p)) / (1.0 + p))
        left = (1.0 / (2.0 ** (3.0 + 4.0 * kappa) * eps * m ** kappa)) ** e1
        scale = 2.0 * c_delta ** 2
        return resolve_implicit_M(
            lambda ln: min(left, d / (scale * ln) * (inner * m ** kappa * eps) ** e2), d, K, gamma), "smooth p>=2"
    if kind == "disjoint":
        left = power_term(eps, p)
        return resolve_implicit_M(
            lambda ln: min(left, (eps ** 2 * d / (2.0 * c_delta ** 2 * ln)) ** (1.0 / 3.0)),
            d, K, gamma), "nonsmooth p>=2"
    alpha = _alpha(kind, p, d, d)
    cap = regime_cap(d, eps, gamma)
    rule = "inscribed" if kind == "inscribed" else "nonsmooth 1<p<=2"
    return resolve_implicit_M(
        lambda ln: min(cap, eps * math.sqrt(alpha) / (2.0 * c_delta * math.sqrt(ln))),
        d, K, gamma), rule


def plan_parameters(p, d, K, eps, gamma, kappa=0.0, mode="theorem-faithful", c_delta=None,
                    M=None, kind=None):
    """Choose family kind, alpha, delta_bar and M for a setting.

    Parameters
    ----------
    p, d, K, eps, gamma, kappa
        Setting. Requires eps, gamma in (0, 1/2), K >= 1, d >= 1, kappa in [0, 1].
    mode : {"theorem-faithful", "demonstration"}
        Theorem-faithful mode pins ``c_delta`` to 16 and rejects any plan that
        violates a construction inequality. Demonstration mode accepts smaller
        ``c_delta`` and records violations in ``plan.violations`` instead.
    c_delta : float, optional
        Offset constant in delta_bar = c_delta * sqrt(ln(MK/gamma)/alpha).
    M : int, optional
        Force the round count instead of deriving it.
    kind : {"dense", "disjoint", "inscribed"}, optional
        Defaults to dense for p <= 2 and disjoint for p > 2 or kappa > 0.

    Raises
    ------
    InfeasibleConfigError
        Naming each violated inequality (theorem-faithful mode), or when no
        M >= 1 exists.
    """
    p = as_exponent(p)
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 1/2)")
    if not 0 < gamma < 0.5:
        raise ValueError("gamma must lie in (0, 1/2)")
    if int(K) != K or K < 1:
        raise ValueError("K must be a positive integer")
    if int(d) != d or d < 1:
        raise ValueError("d must be a positive integer")
    if not 0 <= kappa <= 1:
        raise ValueError("kappa must lie in [0, 1]")
    d, K = int(d), int(K)
    if c_delta is None:
        c_delta = 16.0
    c_delta = float(c_delta)
    if mode == "theorem-faithful" and c_delta != 16.0:
        raise ValueError("theorem-faithful mode pins c_delta to 16")
    if kind is None:
        kind = "disjoint" if (kappa > 0 or p is INF or p > 2) else "dense"
    if kind not in KINDS:
        raise ValueError(f"unknown family kind {kind!r}")
    if kappa > 0:
        if p is not INF and p < 2:
            raise InfeasibleConfigError(["smoothing requires p >= 2"],
                                        [f"p={p} < 2: no infimal-convolution smoothing"])
        if kind != "disjoint":
            raise ValueError("weakly smooth instances use the disjoint construction")
    if kind == "inscribed" and (p is INF or p > 2):
        raise ValueError("the inscribed construction needs 1 <= p <= 2")

    if M is not None:
        M = int(M)
        if M < 1:
            raise ValueError("M must be >= 1")
        plan = _derive(p, d, K, eps, gamma, kappa, mode, kind, M, c_delta, "forced")
    else:
        M, rule = _auto_M(p, d, K, eps, gamma, kappa, kind, c_delta)
        if M < 1:
            raise InfeasibleConfigError(["M >= 1"], [f"the {rule} round-count formula gives M < 1"])
        plan = _derive(p, d, K, eps, gamma, kappa, mode, kind, M, c_delta, rule)
        # integer effects (floors in L) may break an inequality; step M down
        while plan.M > 1 and check_conditions(plan):
            plan = _derive(p, d, K, eps, gamma, kappa, mode, kind, plan.M - 1, c_delta, rule)
    viol = check_conditions(plan)
    if viol and mode == "theorem-faithful":
        raise InfeasibleConfigError([v[0] for v in viol], [f"{v[0]}: {v[1]}" for v in viol])
    return replace(plan, violations=tuple(f"{v[0]}: {v[1]}" for v in viol))


def sample_family(plan, seed):
    """Sample the direction family of ``plan`` deterministically from ``seed``."""
    return make_family(plan.p, plan.d, plan.M, plan.kind, seed, L=plan.L)


# ---------------------------------------------------------------------------
# hard objective

@dataclass(frozen=True)
class Evaluation:
    value: float
    active: int


class MaxAffineNorm:
    """f(y) = max{ max_j [<G_j, y> + b_j],  ||y||_p - c }, guard term optional.

    Generic form of the (undivided) hard objective, used by the smoothing
    solver. ``G`` has shape (J, d).
    """

    def __init__(self, G, b, p, c=None):
        self.G = np.atleast_2d(np.asarray(G, dtype=np.float64))
        self.b = np.asarray(b, dtype=np.float64).reshape(-1)
        if self.G.shape[0] != self.b.size:
            raise ValueError("G and b disagree on the number of pieces")
        self.p = as_exponent(p)
        self.c = None if c is None else float(c)
        self.d = self.G.shape[1]

    @classmethod
    def affine(cls, g, b=0.0, p=2.0):
        g = np.asarray(g, dtype=np.float64)
        return cls(g[None, :], [b], p)

    @classmethod
    def norm(cls, d, p, c=0.0):
        return cls(np.zeros((0, d)), [], p, c)

    def pieces_at(self, y):
        """Affine piece values at y (shape (J,)) and the guard value (or -inf)."""
        y = np.asarray(y, dtype=np.float64)
        a = self.G @ y + self.b if self.b.size else np.zeros(0)
        g = lp_norm(y, self.p) - self.c if self.c is not None else -math.inf
        return a, g

    def evaluate(self, y):
        a, g = self.pieces_at(y)
        amax = a.max() if a.size else -math.inf
        if g > amax:
            return Evaluation(float(g), GUARD)
        return Evaluation(float(amax), int(np.argmax(a)) + 1)

    def __call__(self, y):
        return self.evaluate(y).value

    def subgradient(self, y):
        ev = self.evaluate(y)
        if ev.active == GUARD:
            return norm_subgradient(y, self.p)
        return self.G[ev.active - 1].copy()

    def with_piece(self, j, g=None, b=None):
        """Copy with piece ``j`` (1-based) replaced."""
        G = self.G.copy()
        bb = self.b.copy()
        if g is not None:
            G[j - 1] = g
        if b is not None:
            bb[j - 1] = b
        return MaxAffineNorm(G, bb, self.p, self.c)


class HardInstance:
    """A sampled family together with its plan.

    ``outer`` multiplies the max-form (1/mu for the plan's mu); ``scale``
    multiplies the offsets and the guard and is 1 unless the instance was
    produced by :meth:`rescaled`.
    """

    def __init__(self, family, plan, outer=None, scale=1.0):
        if family.M != plan.M or family.d != plan.d or family.kind != plan.kind:
            raise ValueError("family does not match plan")
        self.family = family
        self.plan = plan
        self.outer = 1.0 / plan.mu if outer is None else float(outer)
        self.scale = float(scale)

    @property
    def d(self):
        return self.plan.d

    @property
    def p(self):
        return self.plan.p

    @property
    def M(self):
        return self.plan.M

    @property
    def kappa(self):
        return self.plan.kappa

    @property
    def delta_bar(self):
        return self.scale * self.plan.delta_bar

    @property
    def guard(self):
        return self.scale * self.plan.guard

    @property
    def feasible(self):
        q, rad = self.plan.feasible
        return q, rad * self.scale

    def rescaled(self, R, mu):
        """The instance moved to radius R and regularity constant mu.

        For kappa = 0 its value at R*x equals mu * R * (value of self at x).
        """
        if self.kappa != 0:
            raise ValueError("rescaling is implemented for the nonsmooth case only")
        return HardInstance(self.family, self.plan, outer=self.outer * mu, scale=self.scale * R)

    def objective(self):
        """The undivided max-form as a :class:`MaxAffineNorm` (dense copy)."""
        Z = self.family.dense()
        idx = np.arange(1, self.M + 1)
        return MaxAffineNorm(0.5 * Z, -0.5 * idx * self.delta_bar, self.p, self.guard)

    def branch_values(self, X, ip=None, norms=None):
        """Affine branch values (K, M) and guard values (K,) of the max-form.

        ``ip`` and ``norms`` (the l_p norms of the rows) may be passed in when
        already computed.
        """
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if ip is None:
            ip = self.family.inner(X)
        if norms is None:
            norms = lp_norm(X, self.p, axis=1)
        idx = np.arange(1, self.M + 1)
        aff = 0.5 * (ip - idx[None, :] * self.delta_bar)
        gv = norms - self.guard
        return aff, gv

    def evaluate_batch(self, X, ip=None, norms=None):
        """Values (K,) and active branches (K,) at a stack of points."""
        aff, gv = self.branch_values(X, ip, norms)
        amax = aff.max(axis=1)
        arg = aff.argmax(axis=1) + 1
        guard_on = gv > amax
        val = np.where(guard_on, gv, amax) * self.outer
        act = np.where(guard_on, GUARD, arg)
        return val, act.astype(int)

    def subgradient_batch(self, X, active):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.empty_like(X)
        for k, a in enumerate(active):
            if a == GUARD:
                out[k] = norm_subgradient(X[k], self.p)
            else:
                self.family.scaled_vector(a - 1, 0.5 * self.outer, out=out[k])
                continue
            out[k] *= self.outer
        return out


def evaluate_nonsmooth(inst, x):
    """Value and active branch of the hard objective at ``x``.

    Ties go to the lowest affine index; the guard is active only when it is
    strictly larger than every affine branch.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != inst.d:
        raise DimensionError(f"point has dimension {x.size}, space has d={inst.d}")
    val, act = inst.evaluate_batch(x[None, :])
    return Evaluation(float(val[0]), int(act[0]))


def subgradient_nonsmooth(inst, x):
    """Deterministic subgradient matching :func:`evaluate_nonsmooth`'s branch."""
    ev = evaluate_nonsmooth(inst, x)
    return inst.subgradient_batch(np.asarray(x, dtype=np.float64)[None, :], [ev.active])[0]


def build_instance(plan, seed):
    return HardInstance(sample_family(plan, seed), plan)


# ---------------------------------------------------------------------------
# serialization

def _fmt(v):
    if isinstance(v, bool) or v is None:
        return "true" if v is True else "false" if v is False else "null"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            raise ValueError("non-finite float in document")
        s = format(v, ".17g")
        if "e" not in s and "." not in s and "n" not in s:
            s += ".0"
        return s
    raise TypeError(type(v))


def dumps17(obj, indent=None, _level=0):
    """Deterministic JSON with sorted keys and floats at 17 significant digits."""
    import json
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [json.dumps(str(k)) + ": " + dumps17(obj[k], indent, _level + 1)
                 for k in sorted(obj)]
        if indent is None:
            return "{" + ", ".join(items) + "}"
        pad = " " * (indent * (_level + 1))
        return "{\n" + ",\n".join(pad + it for it in items) + "\n" + " " * (indent * _level) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps17(v, indent, _level + 1) for v in obj) + "]"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps17(obj.tolist(), indent, _level)
    return _fmt(obj)


def serialize(inst, explicit_bits=False):
    """Instance document (a dict). Sign bits are embedded when requested."""
    if inst.scale != 1.0 or inst.outer != 1.0 / inst.plan.mu:
        raise ValueError("rescaled instances are not serializable")
    pl = inst.plan
    doc = {
        "schema_version": SCHEMA_VERSION,
        "p": exponent_to_json(pl.p), "d": pl.d, "M": pl.M, "kind": pl.kind, "L": pl.L,
        "seed": None if inst.family.seed is None else int(inst.family.seed),
        "c_delta": pl.c_delta, "delta_bar": pl.delta_bar, "eps": pl.eps, "gamma": pl.gamma,
        "K": pl.K, "kappa": pl.kappa, "mu": pl.mu, "eta": pl.eta, "r": pl.r, "guard": pl.guard,
    }
    if explicit_bits or inst.family.seed is None:
        doc["entries_b64"] = base64.b64encode(inst.family.packed_bits().tobytes()).decode("ascii")
    return doc


def dumps_instance(inst, explicit_bits=False):
    return dumps17(serialize(inst, explicit_bits), indent=1) + "\n"


def validate_document(doc, schema_name="instance"):
    """Raise :class:`SchemaError` (with the failing field path) on a bad document."""
    import json
    from importlib import resources

    import jsonschema
    schema = json.loads(resources.files("lbx").joinpath(f"schemas/{schema_name}.schema.json").read_text())
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        path = "$" + "".join(f"[{x!r}]" if isinstance(x, int) else f".{x}" for x in e.absolute_path)
        raise SchemaError(f"{path}: {e.message}")


def deserialize(doc):
    """Rebuild an instance from a document produced by :func:`serialize`."""
    if isinstance(doc, (str, bytes)):
        import json
        doc = json.loads(doc)
    if isinstance(doc, dict) and doc.get("seed") is None and "entries_b64" not in doc:
        raise SchemaError("underdetermined family: neither seed nor explicit sign bits given")
    validate_document(doc)
    p = as_exponent(doc["p"])
    d, M, kind, L = doc["d"], doc["M"], doc["kind"], doc["L"]
    signs = None
    if "entries_b64" in doc:
        raw = np.frombuffer(base64.b64decode(doc["entries_b64"]), dtype=np.uint8)
        row = (L + 7) // 8
        if raw.size != M * row:
            raise SchemaError(f"$.entries_b64: expected {M * row} bytes, got {raw.size}")
        bits = np.unpackbits(raw.reshape(M, row), axis=1)[:, :L]
        signs = signs_from_bits(bits)
    fam = make_family(p, d, M, kind, doc["seed"], L=L, signs=signs)
    alpha = _alpha(kind, p, d, L)
    mode = "demonstration" if doc["c_delta"] != 16.0 else "theorem-faithful"
    plan = InstancePlan(p=p, d=d, K=doc["K"], eps=doc["eps"], gamma=doc["gamma"],
                        kappa=doc["kappa"], mode=mode, kind=kind, M=M, L=L, alpha=alpha,
                        c_delta=doc["c_delta"], delta_bar=doc["delta_bar"], mu=doc["mu"],
                        eta=doc["eta"], r=doc["r"], rule="loaded")
    if abs(plan.guard - doc["guard"]) > 1e-12 * max(1.0, abs(doc["guard"])):
        raise SchemaError("$.guard: inconsistent with r, M and delta_bar")
    return HardInstance(fam, plan)
