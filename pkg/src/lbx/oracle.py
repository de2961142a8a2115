"""K-parallel local oracle: batched answers, round accounting and event instrumentation.

A session answers batches of exactly K queries. Each answer is a deterministic
function of its own query point. Alongside the answers the session records,
for every relevant query (norm at most 4), whether the good-history event of
the current round held:

    <z^t, x> > -delta_bar / 4   and   <z^i, x> < delta_bar / 4 for all i > t.

The instrumentation is observational only and never changes an answer.
"""
from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import DimensionError, exponent_to_json, lp_norm
from .instance import GUARD, HardInstance, build_instance, dumps17
from .smoothing import smooth_solve, smoothing_constants

ORACLE_KINDS = ("subgradient", "gradient")
RELEVANT_RADIUS = 4.0


class BatchSizeError(ValueError):
    """A batch did not contain exactly K queries."""


class OracleKindError(ValueError):
    """The oracle kind does not match the instance's smoothness order."""


@dataclass
class Answer:
    """One oracle reply.

    ``active`` is the branch tag (affine index >= 1, or 0 for the norm
    guard). For the smoothed oracle it is the largest affine index carried by
    the inner solution (0 if only the guard was used), ``gap`` the certified
    inner gap and ``near_tie`` the branch-tie flag.
    """

    value: float
    gradient: np.ndarray
    active: int
    gap: float = 0.0
    near_tie: bool = False


@dataclass
class RoundRecord:
    t: int
    queries: np.ndarray
    values: np.ndarray
    active: np.ndarray
    relevant: np.ndarray
    event_ok: np.ndarray
    event: bool


@dataclass
class Session:
    """Round-indexed interaction between one driver and the oracle of ``inst``."""

    inst: HardInstance
    oracle_kind: str
    K: int
    smoothing: object = None
    workers: int = 1
    transcript: list = field(default_factory=list)

    @property
    def round(self):
        return len(self.transcript)


def open_session(inst, oracle_kind, K, workers=None, inner_tol=1e-9, inner_cap=10000):
    """Start a fresh session.

    Parameters
    ----------
    inst : HardInstance
    oracle_kind : {"subgradient", "gradient"}
        Value plus subgradient for kappa = 0, value plus gradient of the
        smoothed objective for kappa > 0.
    K : int
        Batch width.
    workers : int, optional
        Threads used to answer the K queries of a batch (smoothed oracle
        only). Defaults to ``LBX_WORKERS`` or 1.
    """
    if oracle_kind not in ORACLE_KINDS:
        raise OracleKindError(f"oracle kind must be one of {ORACLE_KINDS}")
    if int(K) != K or K < 1:
        raise ValueError("K must be a positive integer")
    kappa = inst.kappa
    if (kappa == 0) != (oracle_kind == "subgradient"):
        raise OracleKindError(
            f"oracle kind {oracle_kind!r} is incompatible with kappa={kappa}: "
            "use 'subgradient' for kappa=0 and 'gradient' for kappa>0")
    cfg = None
    if kappa > 0:
        cfg = smoothing_constants(inst.p, inst.d, kappa, inst.plan.eta,
                                  inner_tol=inner_tol, inner_cap=inner_cap)
    if workers is None:
        workers = int(os.environ.get("LBX_WORKERS", "1") or 1)
    return Session(inst=inst, oracle_kind=oracle_kind, K=int(K), smoothing=cfg,
                   workers=max(1, int(workers)))


def _check_batch(session, queries):
    X = np.array(queries, dtype=np.float64)  # private copy, kept in the transcript
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] != session.K:
        raise BatchSizeError(f"batch has {X.shape[0] if X.ndim == 2 else '?'} queries, "
                             f"session requires exactly K={session.K}")
    if X.shape[1] != session.inst.d:
        raise DimensionError(f"queries have dimension {X.shape[1]}, space has d={session.inst.d}")
    return X


def event_flags(inst, X, t, ip=None, norms=None):
    """Relevant-query mask and per-query event indicator for round t (1-based).

    Returns
    -------
    relevant : (K,) bool
        Queries with norm at most 4 (times the instance scale).
    ok : (K,) bool
        Event indicator; True for irrelevant queries, which are excluded.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if ip is None:
        ip = inst.family.inner(X)
    if norms is None:
        norms = lp_norm(X, inst.p, axis=1)
    relevant = norms <= RELEVANT_RADIUS * inst.scale
    q = inst.delta_bar / 4.0
    M = inst.M
    ok = np.ones(X.shape[0], dtype=bool)
    if t <= M:
        ok &= ip[:, t - 1] > -q
    if t < M:
        ok &= ip[:, t:].max(axis=1) < q
    return relevant, ok | ~relevant


def _answer_nonsmooth(inst, X, ip, norms):
    vals, act = inst.evaluate_batch(X, ip, norms)
    grads = inst.subgradient_batch(X, act)
    return [Answer(float(v), g, int(a)) for v, g, a in zip(vals, grads, act)]


def _answer_smooth_one(inst, x, cfg):
    res = smooth_solve(inst, x, cfg)
    aff = [a for a in res.pieces if a != GUARD]
    return Answer(float(res.value * inst.outer), res.gradient * inst.outer,
                  max(aff) if aff else GUARD, float(res.gap), bool(res.near_tie))


def answer_batch(session, queries):
    """Answer K queries, commit the round and return the K answers."""
    X = _check_batch(session, queries)
    inst = session.inst
    ip = inst.family.inner(X)
    norms = lp_norm(X, inst.p, axis=1)
    if session.smoothing is None:
        answers = _answer_nonsmooth(inst, X, ip, norms)
    elif session.workers > 1:
        with ThreadPoolExecutor(session.workers) as pool:
            answers = list(pool.map(lambda x: _answer_smooth_one(inst, x, session.smoothing), X))
    else:
        answers = [_answer_smooth_one(inst, x, session.smoothing) for x in X]
    t = session.round + 1
    relevant, ok = event_flags(inst, X, t, ip, norms)
    session.transcript.append(RoundRecord(
        t=t, queries=X, values=np.array([a.value for a in answers]),
        active=np.array([a.active for a in answers], dtype=int), relevant=relevant,
        event_ok=ok, event=bool(ok.all())))
    return answers


@dataclass
class EventSummary:
    per_round: list
    all_held: bool
    first_failure: object


def event_log(session):
    """Per-round good-history indicators and whether all of them held."""
    if session.round < 1:
        raise ValueError("session has no answered rounds")
    flags = [rec.event for rec in session.transcript]
    first = next((i + 1 for i, f in enumerate(flags) if not f), None)
    return EventSummary(per_round=flags, all_held=first is None, first_failure=first)


def learned_prefix(session):
    """Largest affine index that was active at some answered query (0 if none)."""
    best = 0
    for rec in session.transcript:
        best = max(best, int(rec.active.max(initial=0)))
    return best


def learned_prefix_curve(session):
    """Running maximum of the learned prefix after each round."""
    out, best = [], 0
    for rec in session.transcript:
        best = max(best, int(rec.active.max(initial=0)))
        out.append(best)
    return out


def query_hash(x):
    """SHA-256 of the little-endian float64 bytes of a query."""
    return hashlib.sha256(np.ascontiguousarray(x, dtype="<f8").tobytes()).hexdigest()


def transcript_records(session, full_queries=False):
    """One JSON-ready dict per round."""
    out = []
    for rec in session.transcript:
        q = rec.queries.tolist() if full_queries else [query_hash(x) for x in rec.queries]
        out.append({
            "t": rec.t, "queries": q, "values": rec.values.tolist(),
            "active": rec.active.tolist(), "relevant": rec.relevant.tolist(),
            "event_ok": rec.event_ok.tolist(), "event": rec.event,
        })
    return out


def export_transcript(session, path, full_queries=False):
    """Write the transcript as JSON lines, one record per round."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in transcript_records(session, full_queries):
            fh.write(dumps17(rec) + "\n")


def event_rate(plan, queries, seeds, rounds=None):
    """Replay a fixed batch over fresh instances and count runs where every event held.

    The same K queries are issued at every round t = 1..rounds (default M),
    the setting of the empirical good-history audit.

    Returns
    -------
    dict with ``held`` (count), ``n`` (runs), ``frequency`` and ``sigma``
    (binomial standard error at the empirical frequency).
    """
    X = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    rounds = plan.M if rounds is None else int(rounds)
    held = 0
    n = 0
    for s in seeds:
        inst = build_instance(plan, s)
        ip = inst.family.inner(X)
        ok = all(event_flags(inst, X, t, ip)[1].all() for t in range(1, rounds + 1))
        held += ok
        n += 1
    if n == 0:
        raise ValueError("no seeds given")
    f = held / n
    return {"held": held, "n": n, "frequency": f, "sigma": float(np.sqrt(f * (1 - f) / n)),
            "p": exponent_to_json(plan.p), "K": X.shape[0], "rounds": rounds}
