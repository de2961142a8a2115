import csv
import json

import numpy as np
import pytest

from lbx.algorithms import (ALGORITHMS, Ball, RunResult, estimate_complexity, feasible_ball,
                            mirror_exponent, run, write_curves_csv, write_summary_json)
from lbx.audit import instance_fstar_bound
from lbx.geometry import INF, lp_norm
from lbx.instance import build_instance, plan_parameters
from lbx.oracle import open_session


def inst_for(p=2.0, d=400, M=6, K=4, seed=0, kappa=0.0, kind=None, c_delta=2.0):
    plan = plan_parameters(p, d, K, 0.1, 0.05, kappa=kappa, M=M, kind=kind, mode="demonstration",
                           c_delta=c_delta)
    return build_instance(plan, seed)


def session(inst, K=None):
    kind = "subgradient" if inst.kappa == 0 else "gradient"
    return open_session(inst, kind, K or inst.plan.K)


def test_random_search_budget_and_transcript():
    inst = inst_for()
    s = session(inst)
    r = run("k_random_search", s, 7, 0.1)
    assert r.rounds_used == 7 and s.round == 7
    assert sum(rec.queries.shape[0] for rec in s.transcript) == 7 * 4


@pytest.mark.parametrize("algo", ["k_subgradient", "k_mirror_descent", "k_random_search"])
@pytest.mark.parametrize("p", [1.5, 2.0, 4.0, INF])
def test_runs_are_feasible_and_curves_monotone(algo, p):
    inst = inst_for(p=p)
    s = session(inst)
    r = run(algo, s, 15, 0.1, seed=3)
    ball = feasible_ball(inst)
    assert all(ball.contains(x, 1e-9) for rec in s.transcript for x in rec.queries)
    assert all(a >= b for a, b in zip(r.curve, r.curve[1:]))
    assert r.best_value == min(v for rec in s.transcript for v in rec.values)
    assert r.curve[-1] == r.best_value


def test_sequential_subgradient_monotone():
    inst = inst_for(K=1)
    r = run("k_subgradient", session(inst, 1), 50, 0.1)
    assert all(a >= b for a, b in zip(r.curve, r.curve[1:]))


def test_wider_batch_dominates():
    for seed in range(3):
        r1 = run("k_subgradient", open_session(inst_for(K=1, seed=seed), "subgradient", 1), 40, 0.1, seed=seed)
        r8 = run("k_subgradient", open_session(inst_for(K=8, seed=seed), "subgradient", 8), 40, 0.1, seed=seed)
        assert all(b <= a for a, b in zip(r1.curve, r8.curve))


def test_mirror_exponent():
    assert mirror_exponent(1.0, 1000) == pytest.approx(1 + 1 / np.log(1000))
    assert mirror_exponent(1.5, 1000) == 1.5
    assert mirror_exponent(4.0, 1000) == 2.0
    assert mirror_exponent(INF, 1000) == 2.0


def test_accelerated_needs_gradient_oracle():
    with pytest.raises(ValueError):
        run("k_accelerated", session(inst_for()), 3, 0.1)
    inst = inst_for(p=4.0, d=300, M=3, K=2, kappa=1.0, kind="disjoint", c_delta=0.05)
    r = run("k_accelerated", session(inst), 5, 0.1)
    assert r.rounds_used == 5 and r.hyper["L"] > 0


def test_stops_at_target():
    inst = inst_for(d=100, M=3, K=4, c_delta=0.2)
    fref = instance_fstar_bound(inst)
    r = run("k_subgradient", session(inst), 500, 0.5, f_ref=fref)
    assert r.hit_round is not None and r.rounds_used == r.hit_round
    assert r.best_value <= fref + 0.5


def test_grid_cover_small_dimension():
    inst = inst_for(d=2, M=1, K=16, c_delta=0.1)
    r = run("grid_cover", session(inst), 10 ** 4, 0.1)
    grid = {(i, j) for i in range(-10, 11) for j in range(-10, 11) if np.hypot(i, j) <= 10 * (1 + 1e-9)}
    assert r.rounds_used == -(-len(grid) // 16)
    with pytest.raises(ValueError):
        run("grid_cover", session(inst_for(d=40)), 1, 0.1)


def test_invalid_inputs():
    inst = inst_for()
    with pytest.raises(ValueError):
        run("newton", session(inst), 3, 0.1)
    with pytest.raises(ValueError):
        run("k_subgradient", session(inst), 0, 0.1)


@pytest.mark.parametrize("q", [1.0, 1.5, 2.0, 4.0, INF])
def test_uniform_ball_sampler(q):
    ball = Ball(q, 2.0, 5)
    pts = ball.uniform(np.random.default_rng(0), 4000)
    norms = lp_norm(pts, q, axis=1) / 2.0
    assert np.all(norms <= 1 + 1e-12)
    # volume scaling: P[||x|| <= t] = t^d
    assert np.mean(norms <= 0.8) == pytest.approx(0.8 ** 5, abs=0.03)


# --- complexity estimators -----------------------------------------------------

def test_estimator_constant_sample():
    est = estimate_complexity([3] * 10, gamma=0.05)
    assert est["hp"] == 3 and est["mean"] == 3.0


def test_estimator_quantile_example():
    est = estimate_complexity([1, 2, 3, 4, 5, 6, 7, 8, 9, 100], gamma=0.1)
    assert est["hp"] == 9
    assert est["mean"] == 14.5
    assert est["hp_check"] is True
    assert est["hp_gamma"] == 1


def test_estimator_censoring_and_errors():
    def rr(hit, used):
        return RunResult("k_subgradient", {}, 0, 1, 0.0, None, used, [0.0] * used, hit)
    est = estimate_complexity([rr(2, 2), rr(None, 10)], gamma=0.5)
    assert est["censored"] == 1 and est["mean"] == 6.5
    with pytest.raises(ValueError):
        estimate_complexity([])


def test_exports(tmp_path):
    inst = inst_for()
    res = [run(a, session(inst), 3, 0.1, seed=1) for a in ("k_subgradient", "k_random_search")]
    write_curves_csv(res, tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["algorithm", "seed", "round", "best_value"] and len(rows) == 7
    write_summary_json(res, tmp_path / "s.json", {"note": "x"})
    doc = json.loads((tmp_path / "s.json").read_text())
    assert [r["algorithm"] for r in doc["runs"]] == ["k_subgradient", "k_random_search"]


def test_registry_complete():
    assert set(ALGORITHMS) == {"k_subgradient", "k_mirror_descent", "k_accelerated",
                               "k_random_search", "grid_cover"}
