import json

import numpy as np
import pytest

from lbx.algorithms import run
from lbx.geometry import DimensionError, lp_norm
from lbx.instance import GUARD, build_instance, plan_parameters
from lbx.oracle import (BatchSizeError, OracleKindError, answer_batch, event_flags, event_log,
                        event_rate, export_transcript, learned_prefix, learned_prefix_curve,
                        open_session, query_hash)
from lbx.smoothing import smooth_solve


def nonsmooth(d=100, M=5, K=2, seed=0, c_delta=1.0):
    plan = plan_parameters(2, d, K, 0.1, 0.05, M=M, mode="demonstration", c_delta=c_delta)
    return build_instance(plan, seed)


def smooth(d=200, M=4, K=3, seed=0):
    plan = plan_parameters(2, d, K, 0.1, 0.05, kappa=1, M=M, kind="disjoint", mode="demonstration",
                           c_delta=0.01)
    return build_instance(plan, seed)


def test_open_session():
    inst = nonsmooth()
    s = open_session(inst, "subgradient", 4)
    assert s.round == 0 and s.transcript == []
    with pytest.raises(OracleKindError):
        open_session(smooth(), "subgradient", 4)
    with pytest.raises(OracleKindError):
        open_session(inst, "gradient", 4)
    with pytest.raises(OracleKindError):
        open_session(inst, "prox", 4)
    s2 = open_session(inst, "subgradient", 4)
    answer_batch(s, np.zeros((4, inst.d)))
    assert s2.round == 0 and s.round == 1


def test_identical_queries_identical_answers():
    inst = nonsmooth()
    s = open_session(inst, "subgradient", 2)
    a = answer_batch(s, np.zeros((2, inst.d)))
    assert s.round == 1
    assert a[0].value == a[1].value and np.array_equal(a[0].gradient, a[1].gradient)


@pytest.mark.parametrize("kind", ["nonsmooth", "smooth"])
def test_permutation_and_locality(kind):
    inst = nonsmooth(K=3) if kind == "nonsmooth" else smooth(K=3)
    ok = "subgradient" if kind == "nonsmooth" else "gradient"
    X = np.random.default_rng(0).normal(size=(3, inst.d)) * 0.05
    a = answer_batch(open_session(inst, ok, 3), X)
    b = answer_batch(open_session(inst, ok, 3), X[[2, 0, 1]])
    for i, j in enumerate([2, 0, 1]):
        assert b[i].value == a[j].value and np.array_equal(b[i].gradient, a[j].gradient)
    # each answer equals the answer to the same query in a different batch
    c = answer_batch(open_session(inst, ok, 3), np.stack([X[0], -X[1], 2 * X[2]]))
    assert c[0].value == a[0].value and np.array_equal(c[0].gradient, a[0].gradient)


def test_smoothed_answers_scaled_and_threaded():
    inst = smooth()
    X = np.random.default_rng(1).normal(size=(3, inst.d)) * 0.03
    s1 = open_session(inst, "gradient", 3, workers=1)
    s4 = open_session(inst, "gradient", 3, workers=4)
    a1, a4 = answer_batch(s1, X), answer_batch(s4, X)
    for x, u, v in zip(X, a1, a4):
        res = smooth_solve(inst, x, s1.smoothing)
        assert u.value == res.value * inst.outer
        assert np.array_equal(u.gradient, res.gradient * inst.outer)
        assert u.value == v.value and np.array_equal(u.gradient, v.gradient)


def test_no_guard_inside_unit_ball():
    inst = nonsmooth(K=8)
    s = open_session(inst, "subgradient", 8)
    rng = np.random.default_rng(2)
    for _ in range(20):
        X = rng.normal(size=(8, inst.d))
        X *= (rng.random(8) / np.linalg.norm(X, axis=1))[:, None]
        assert all(a.active != GUARD for a in answer_batch(s, X))


def test_batch_errors():
    inst = nonsmooth()
    s = open_session(inst, "subgradient", 2)
    with pytest.raises(BatchSizeError):
        answer_batch(s, np.zeros((1, inst.d)))
    with pytest.raises(BatchSizeError):
        answer_batch(s, np.zeros((3, inst.d)))
    with pytest.raises(DimensionError):
        answer_batch(s, np.zeros((2, inst.d + 1)))
    assert s.round == 0


def test_events_at_origin():
    inst = nonsmooth()
    s = open_session(inst, "subgradient", 2)
    for _ in range(3):
        answer_batch(s, np.zeros((2, inst.d)))
    log = event_log(s)
    assert log.all_held and log.per_round == [True] * 3 and log.first_failure is None


def test_event_violated_by_future_direction():
    inst = nonsmooth(M=5, c_delta=0.5)
    z = inst.family.vector(1)  # z^2
    x = z / lp_norm(z, 2)
    assert inst.family.inner(x)[1] >= inst.delta_bar / 4
    s = open_session(inst, "subgradient", 2)
    answer_batch(s, np.stack([x, np.zeros(inst.d)]))  # round 1 < 2
    log = event_log(s)
    assert not log.all_held and log.first_failure == 1
    assert learned_prefix(s) == 2


def test_irrelevant_queries_excluded():
    inst = nonsmooth(c_delta=0.5)
    z = inst.family.vector(2)
    far = 5.0 * z / lp_norm(z, 2)
    relevant, ok = event_flags(inst, far[None, :], 1)
    assert not relevant[0] and ok[0]


def test_event_log_needs_rounds():
    with pytest.raises(ValueError):
        event_log(open_session(nonsmooth(), "subgradient", 2))


def test_learned_prefix():
    inst = nonsmooth()
    s = open_session(inst, "subgradient", 2)
    assert learned_prefix(s) == 0
    answer_batch(s, np.zeros((2, inst.d)))
    assert learned_prefix(s) == 1
    rng = np.random.default_rng(3)
    for _ in range(5):
        answer_batch(s, rng.normal(size=(2, inst.d)) * 0.3)
    curve = learned_prefix_curve(s)
    assert all(a <= b for a, b in zip(curve, curve[1:]))


def test_one_vector_per_round_under_events():
    plan = plan_parameters(2, 4000, 4, 0.05, 0.05, M=6, mode="demonstration", c_delta=4)
    for seed in range(10):
        for algo in ("k_subgradient", "k_random_search"):
            s = open_session(build_instance(plan, seed), "subgradient", 4)
            run(algo, s, 6, 0.05, seed=seed)
            held = True
            for t, (rec, pref) in enumerate(zip(s.transcript, learned_prefix_curve(s)), start=1):
                if held:
                    assert pref <= t + 1
                held = held and rec.event


def test_transcript_export(tmp_path):
    inst = nonsmooth()
    s = open_session(inst, "subgradient", 2)
    X = np.random.default_rng(4).normal(size=(2, inst.d))
    answer_batch(s, X)
    path = tmp_path / "t.jsonl"
    export_transcript(s, path)
    rec = json.loads(path.read_text().splitlines()[0])
    assert rec["t"] == 1 and rec["queries"] == [query_hash(x) for x in X]
    export_transcript(s, path, full_queries=True)
    rec = json.loads(path.read_text().splitlines()[0])
    assert np.array_equal(np.array(rec["queries"]), X)


def test_event_rate_origin():
    plan = plan_parameters(2, 500, 2, 0.1, 0.05, M=3, mode="demonstration", c_delta=1)
    out = event_rate(plan, np.zeros((2, 500)), range(20))
    assert out["held"] == 20 and out["frequency"] == 1.0 and out["sigma"] == 0.0
