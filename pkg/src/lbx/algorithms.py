"""Baseline K-parallel first-order methods and round-complexity estimators.

Every method spends its first query of a round on a *center* whose trajectory
depends only on the answers at earlier centers, and its K - 1 remaining
queries on speculative probes. The center path is therefore identical for all
K, so a wider batch can only lower the best-so-far curve.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .geometry import INF, as_exponent, dual_exponent, lp_norm, project_lp_ball
from .instance import dumps17
from .oracle import answer_batch

ALGORITHMS = ("k_subgradient", "k_mirror_descent", "k_accelerated", "k_random_search", "grid_cover")
GRID_MAX_POINTS = 10 ** 7


@dataclass
class RunResult:
    """Outcome of one run.

    ``curve[t-1]`` is the best value seen after round t; ``hit_round`` the
    first round whose best value is at most ``f_ref + eps`` (None if never or
    if no reference value was given).
    """

    algorithm: str
    hyper: dict
    seed: int
    K: int
    best_value: float
    best_point: np.ndarray
    rounds_used: int
    curve: list
    hit_round: object = None
    f_ref: object = None
    eps: object = None
    instance_seed: object = None

    def summary(self):
        return {"algorithm": self.algorithm, "hyper": self.hyper, "seed": self.seed, "K": self.K,
                "best_value": self.best_value, "rounds_used": self.rounds_used,
                "hit_round": self.hit_round, "f_ref": self.f_ref, "eps": self.eps,
                "instance_seed": self.instance_seed}


# ---------------------------------------------------------------------------
# feasible sets

@dataclass(frozen=True)
class Ball:
    """The feasible set {x : ||x||_q <= R}."""

    q: object
    R: float
    d: int

    def project(self, x):
        return project_lp_ball(x, self.q, self.R)

    def project_inplace(self, y):
        """Overwrite ``y`` with its projection onto the ball."""
        if as_exponent(self.q) == 2.0:
            n = lp_norm(y, 2.0)
            if n > self.R:
                y *= self.R / n
        else:
            y[:] = self.project(y)

    @property
    def l2_radius(self):
        """Euclidean radius of the ball (largest l_2 norm of a member)."""
        q = as_exponent(self.q)
        if q is INF:
            return self.R * math.sqrt(self.d)
        return self.R * self.d ** max(0.0, 0.5 - 1.0 / q)

    def uniform(self, rng, n):
        """n points drawn uniformly from the ball.

        Uses the generalized-Gaussian representation: with |y_i| = G_i^(1/q),
        G_i ~ Gamma(1/q), random signs and W ~ Exp(1), the point
        y / (||y||_q^q + W)^(1/q) is uniform in the unit l_q ball.
        """
        q = as_exponent(self.q)
        if q is INF:
            return rng.uniform(-self.R, self.R, size=(n, self.d))
        if q == 2.0:
            # Gamma(1/2) magnitudes with random signs are N(0, 1/2) variates; with
            # y = g / sqrt(2) for standard normal g the point is g / sqrt(||g||^2 + 2W)
            y = rng.standard_normal(size=(n, self.d))
            ss = np.array([np.dot(r, r) for r in y])
            w = rng.exponential(1.0, size=n)
            y *= (self.R / np.sqrt(ss + 2.0 * w))[:, None]
            return y
        else:
            g = rng.gamma(1.0 / q, 1.0, size=(n, self.d))
            y = g ** (1.0 / q) * rng.choice((-1.0, 1.0), size=(n, self.d))
        w = rng.exponential(1.0, size=(n, 1))
        s = (np.sum(g, axis=1, keepdims=True) + w) ** (1.0 / q)
        return self.R * y / s

    def contains(self, x, tol=1e-9):
        return lp_norm(x, self.q) <= self.R * (1.0 + tol)


def feasible_ball(inst):
    q, R = inst.feasible
    return Ball(as_exponent(q), float(R), inst.d)


# ---------------------------------------------------------------------------
# update rules

def _unit(g, q=2.0):
    n = lp_norm(g, q)
    return g / n if n > 0 else np.zeros_like(g)


class _Method:
    """Center-plus-probes update rule; subclasses define the center step."""

    needs_gradient = False

    def __init__(self, ball, K, seed, c=None, memory=4):
        self.ball = ball
        self.K = K
        self.rng = np.random.default_rng(seed)
        self.c = float(ball.l2_radius if c is None else c)
        self.memory = int(memory)
        self.x = np.zeros(ball.d)
        self.past = []
        self.t = 0

    def hyper(self):
        return {"c": self.c, "memory": self.memory}

    def step_size(self):
        return self.c / math.sqrt(self.t)

    def center(self):
        return self.x

    def probes(self, xc, out=None):
        """K - 1 speculative points around the center, as rows of ``out``.

        Even slots step along stored past subgradient directions with
        multipliers 2, 1/2, 4, 1/4, ...; odd slots (and every slot before
        any history exists) are random sign perturbations of Euclidean size
        equal to the current step, projected back into the ball.
        """
        if out is None:
            out = np.empty((self.K - 1, self.ball.d))
        h = self.step_size()
        s = h / math.sqrt(self.ball.d)
        for j in range(self.K - 1):
            y = out[j]
            if j % 2 == 0 and self.past:
                k = j // 2
                g = self.past[-1 - (k % len(self.past))]
                level = k // len(self.past)
                mult = 2.0 ** ((level // 2 + 1) * (1 if level % 2 == 0 else -1))
                np.multiply(g, -h * mult, out=y)
            else:
                y[:] = self.rng.integers(0, 2, size=self.ball.d, dtype=np.int8)
                y *= 2.0 * s
                y -= s
            y += xc
            self.ball.project_inplace(y)
        return out

    def propose(self):
        self.t += 1
        xc = self.center()
        X = np.empty((self.K, self.ball.d))
        X[0] = xc
        self.probes(xc, X[1:])
        return X

    def observe(self, answers):
        g = answers[0].gradient
        u = _unit(g)
        if np.any(u):
            self.past.append(u)
            self.past = self.past[-self.memory:]
        self.update(g)

    def update(self, g):
        raise NotImplementedError


class KSubgradient(_Method):
    """Projected normalized subgradient steps x <- P(x - (c/sqrt t) g/||g||_2)."""

    name = "k_subgradient"

    def update(self, g):
        self.x = self.ball.project(self.x - self.step_size() * _unit(g))


def mirror_exponent(p, d):
    """Exponent q of the mirror map 1/2 ||x||_q^2.

    q = max(p, 1 + 1/ln d) for p <= 2; the Euclidean map (q = 2) for p > 2.
    """
    p = as_exponent(p)
    if p is INF or p > 2:
        return 2.0
    return max(p, 1.0 + 1.0 / math.log(max(d, 3)))


def _mirror_grad(x, q):
    """Gradient of 1/2 ||x||_q^2."""
    n = lp_norm(x, q)
    if n == 0:
        return np.zeros_like(x)
    return n ** (2.0 - q) * np.sign(x) * np.abs(x) ** (q - 1.0)


class KMirrorDescent(_Method):
    """Mirror descent with the map 1/2 ||x||_q^2.

    The Bregman projection onto the l_q ball is the radial scaling; when the
    feasible ball uses a different exponent the iterate is then projected onto
    it in the Euclidean metric.
    """

    name = "k_mirror_descent"

    def __init__(self, ball, K, seed, c=None, memory=4, q=None):
        super().__init__(ball, K, seed, c, memory)
        self.q = float(mirror_exponent(ball.q, ball.d) if q is None else q)
        self.qs = dual_exponent(self.q)

    def hyper(self):
        return {**super().hyper(), "q": self.q}

    def update(self, g):
        n = lp_norm(g, self.qs)
        if n == 0:
            return
        theta = _mirror_grad(self.x, self.q) - self.step_size() * g / n
        y = _mirror_grad(theta, self.qs)
        r = lp_norm(y, self.q)
        if r > self.ball.R:
            y *= self.ball.R / r
        self.x = self.ball.project(y) if as_exponent(self.ball.q) != self.q else y


class KAccelerated(_Method):
    """Projected accelerated gradient with constant step 1/L on smoothed instances.

    For p >= 2 the Euclidean smoothness constant is at most the l_p one, so the
    oracle's Hoelder constant serves as L.
    """

    name = "k_accelerated"
    needs_gradient = True

    def __init__(self, ball, K, seed, c=None, memory=4, L=1.0):
        super().__init__(ball, K, seed, c, memory)
        self.L = float(L)
        self.y = self.x.copy()
        self.a = 1.0

    def hyper(self):
        return {**super().hyper(), "L": self.L}

    def step_size(self):
        return 1.0 / self.L

    def center(self):
        return self.y

    def update(self, g):
        x_new = self.ball.project(self.y - g / self.L)
        a_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * self.a ** 2))
        self.y = x_new + ((self.a - 1.0) / a_new) * (x_new - self.x)
        self.x, self.a = x_new, a_new


class KRandomSearch:
    """K i.i.d. uniform feasible points per round."""

    name = "k_random_search"
    needs_gradient = False

    def __init__(self, ball, K, seed):
        self.ball = ball
        self.K = K
        self.rng = np.random.default_rng(seed)

    def hyper(self):
        return {}

    def propose(self):
        return self.ball.uniform(self.rng, self.K)

    def observe(self, answers):
        pass


class GridCover:
    """Lexicographic sweep of the grid (h Z)^d inside the feasible ball, K points per round.

    Meant for small d only; refuses grids with more than ``GRID_MAX_POINTS``
    cells in the bounding box. The final batch repeats the last grid point.
    """

    name = "grid_cover"
    needs_gradient = False

    def __init__(self, ball, K, seed, h=None, eps=0.1):
        self.ball = ball
        self.K = K
        self.h = float(eps if h is None else h)
        n = int(math.floor(ball.R / self.h))
        axis = np.arange(-n, n + 1) * self.h
        if axis.size ** ball.d > GRID_MAX_POINTS:
            raise ValueError(f"grid_cover needs {axis.size}^{ball.d} cells; limit {GRID_MAX_POINTS}")
        self._it = (np.array(pt) for pt in itertools.product(axis, repeat=ball.d)
                    if ball.contains(np.array(pt)))
        self.exhausted = False

    def hyper(self):
        return {"h": self.h}

    def propose(self):
        pts = list(itertools.islice(self._it, self.K))
        if not pts:
            self.exhausted = True
            return None
        if len(pts) < self.K:
            self.exhausted = True
            pts += [pts[-1]] * (self.K - len(pts))
        return np.array(pts)

    def observe(self, answers):
        pass


_REGISTRY = {cls.name: cls for cls in (KSubgradient, KMirrorDescent, KAccelerated,
                                       KRandomSearch, GridCover)}


def make_method(spec, session, seed=0, eps=None):
    """Instantiate an update rule from a name or a dict {"name": ..., **hyper}."""
    if isinstance(spec, str):
        spec = {"name": spec}
    spec = dict(spec)
    name = spec.pop("name")
    if name not in _REGISTRY:
        raise ValueError(f"unknown algorithm {name!r}; choose from {ALGORITHMS}")
    cls = _REGISTRY[name]
    if cls.needs_gradient and session.oracle_kind != "gradient":
        raise ValueError(f"{name} needs the smoothed gradient oracle")
    ball = feasible_ball(session.inst)
    if name == "grid_cover" and eps is not None:
        spec.setdefault("eps", eps)
    if name == "k_accelerated" and "L" not in spec:
        spec["L"] = session.inst.outer * session.smoothing.mu
    return cls(ball, session.K, seed, **spec)


def run(algorithm, session, budget, eps, f_ref=None, seed=0):
    """Drive ``session`` with an update rule for at most ``budget`` rounds.

    Stops early when the best value reaches ``f_ref + eps`` (if ``f_ref`` is
    given) or when a grid cover is exhausted.
    """
    if int(budget) != budget or budget < 1:
        raise ValueError("budget must be a positive integer")
    method = make_method(algorithm, session, seed, eps)
    best, best_x = math.inf, None
    curve, hit = [], None
    ball = feasible_ball(session.inst)
    for t in range(1, int(budget) + 1):
        X = method.propose()
        if X is None:
            break
        answers = answer_batch(session, X)
        vals = np.array([a.value for a in answers])
        k = int(np.argmin(vals))
        if vals[k] < best:
            best, best_x = float(vals[k]), X[k].copy()
        curve.append(best)
        method.observe(answers)
        if f_ref is not None and hit is None and best <= f_ref + eps:
            hit = t
            break
    assert best_x is None or ball.contains(best_x, 1e-8)
    return RunResult(algorithm=method.name, hyper=method.hyper(), seed=int(seed), K=session.K,
                     best_value=best, best_point=best_x, rounds_used=len(curve), curve=curve,
                     hit_round=hit, f_ref=f_ref, eps=eps,
                     instance_seed=session.inst.family.seed)


# ---------------------------------------------------------------------------
# complexity estimators

def _order_stat(sorted_T, level):
    """Smallest sample tau with empirical P[T <= tau] >= level."""
    n = len(sorted_T)
    k = max(1, math.ceil(level * n - 1e-9))
    return sorted_T[k - 1]


def estimate_complexity(results, eps=None, gamma=0.05):
    """Empirical high-probability and mean round counts.

    Parameters
    ----------
    results : sequence of RunResult or of numbers
        Runs (their ``hit_round``; runs that never reached the target count as
        ``rounds_used + 1``, a lower bound, and are reported as censored) or
        raw round counts.
    gamma : float
        Confidence parameter.

    Returns
    -------
    dict
        ``hp``: the (1 - gamma)-quantile; ``hp_gamma``: the gamma-quantile;
        ``mean``; ``n``; ``censored``; and the checks
        ``(1 - gamma) * hp <= mean`` (``hp_check``) and
        ``(1 - gamma) * hp_gamma <= mean`` (``hp_gamma_check``).
    """
    T, censored = [], 0
    for r in results:
        if isinstance(r, RunResult):
            if r.hit_round is None:
                censored += 1
                T.append(r.rounds_used + 1)
            else:
                T.append(r.hit_round)
        else:
            T.append(r)
    if not T:
        raise ValueError("empty collection")
    T = sorted(T)
    hp = _order_stat(T, 1.0 - gamma)
    hpg = _order_stat(T, gamma)
    mean = float(np.mean(T))
    tol = 1e-12 * max(1.0, abs(mean))
    return {"hp": hp, "hp_gamma": hpg, "mean": mean, "n": len(T), "censored": censored,
            "gamma": gamma, "eps": eps,
            "hp_check": bool((1.0 - gamma) * hp <= mean + tol),
            "hp_gamma_check": bool((1.0 - gamma) * hpg <= mean + tol)}


# ---------------------------------------------------------------------------
# export

def write_curves_csv(results, path):
    """CSV rows (algorithm, seed, round, best_value) for every run."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["algorithm", "seed", "round", "best_value"])
        for r in results:
            for t, v in enumerate(r.curve, start=1):
                w.writerow([r.algorithm, r.seed, t, format(v, ".17g")])


def write_summary_json(results, path, extra=None):
    doc = {"runs": [r.summary() for r in results]}
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps17(doc, indent=2) + "\n")
