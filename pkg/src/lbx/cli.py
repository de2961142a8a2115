"""Command-line front end: gen | run | audit | bound | report.

Every subcommand is driven by one JSON config; flags only choose the config
path, the output directory and dotted-path overrides of scalar fields
(``--set setting.eps=0.1``). Outputs are byte-deterministic given the config;
wall-clock timestamps go only to the sidecar log ``lbx.log``.

Exit codes: 0 ok, 1 internal error, 2 infeasible or unusable configuration,
3 audit flags raised.
"""
from __future__ import annotations

import argparse
import copy
import csv
import glob
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from types import SimpleNamespace

import numpy as np

from . import algorithms as alg
from . import audit as aud
from .geometry import as_exponent
from .instance import (SCHEMA_VERSION, InfeasibleConfigError, SchemaError, build_instance,
                       deserialize, dumps17, plan_parameters, serialize,
                       validate_document)
from .oracle import open_session, transcript_records

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_FLAGS = 0, 1, 2, 3
LARGE_D = 10 ** 15

DEFAULTS = {
    "setting": {"p": 2.0, "d": 1000, "K": 1, "eps": 0.1, "gamma": 0.05, "kappa": 0.0,
                "mode": "theorem-faithful", "c_delta": None, "M": None, "kind": None},
    "seeds": {"count": 1, "master": 0},
    "algorithms": ["k_subgradient"],
    "run": {"budget": None, "stop_at_target": False, "full_queries": False,
            "transcripts": True},
    "audit": {
        "certificate": True,
        "concentration": {"enabled": False, "deltas": [0.1, 0.2, 0.4], "N": 10000,
                          "probes": ["e1", "uniform"], "seed": 0},
        "minimax": {"enabled": False, "N": 50, "seed0": 0},
        "gap": {"enabled": True, "min_respected": 0.9},
        "complexity": {"enabled": True},
    },
    "bound": {"c_regime": 200.0, "c_kappa": 1.0, "nu": 1.0, "kappas": [0.0, 1.0]},
    "output": {"dir": "lbx_out"},
}


class ConfigError(ValueError):
    """The configuration cannot be executed as given."""


# ---------------------------------------------------------------------------
# config handling

def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_scalar(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg, assignment):
    """Set one scalar field from ``a.b.c=value`` (value parsed as JSON when possible)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form path=value")
    path, text = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    value = _parse_scalar(text)
    if isinstance(value, (dict, list)):
        raise ConfigError(f"override {path} must be a scalar")
    node[keys[-1]] = value
    return cfg


def load_config(path=None, overrides=()):
    """Defaults, then the config file, then the overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
    for a in overrides:
        apply_override(cfg, a)
    validate_document(cfg, "config")
    return cfg


def config_hash(cfg):
    """SHA-256 of the canonical JSON form of the effective config (output dir excluded)."""
    c = copy.deepcopy(cfg)
    c.pop("output", None)
    return hashlib.sha256(dumps17(c).encode("utf-8")).hexdigest()


def seed_list(cfg):
    """Explicit list, or ``count`` seeds drawn from ``master`` via SeedSequence."""
    s = cfg["seeds"]
    if isinstance(s, list):
        return [int(v) for v in s]
    count, master = int(s.get("count", 1)), int(s.get("master", 0))
    if count < 1:
        raise ConfigError("seeds.count must be >= 1")
    return [int(v) for v in np.random.SeedSequence(master).generate_state(count, dtype=np.uint32)]


def make_plan(setting):
    s = setting
    return plan_parameters(s["p"], s["d"], s["K"], s["eps"], s["gamma"], kappa=s.get("kappa", 0.0),
                           mode=s.get("mode", "theorem-faithful"), c_delta=s.get("c_delta"),
                           M=s.get("M"), kind=s.get("kind"))


# ---------------------------------------------------------------------------
# output helpers

def _stamp(doc, chash):
    out = {"schema_version": SCHEMA_VERSION, "config_hash": chash}
    out.update(doc)
    return out


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps17(doc, indent=2) + "\n")


def _write_csv(path, header, rows, chash):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION} config_hash={chash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _logger(out_dir):
    log = logging.getLogger("lbx")
    log.setLevel(logging.INFO)
    for h in list(log.handlers):
        log.removeHandler(h)
        h.close()
    h = logging.FileHandler(os.path.join(out_dir, "lbx.log"), encoding="utf-8")
    h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(h)
    return log


def _workers():
    try:
        return max(1, int(os.environ.get("LBX_WORKERS", "1") or 1))
    except ValueError:
        return 1


def _out_dir(cfg, create=True):
    d = cfg["output"]["dir"]
    if create:
        os.makedirs(d, exist_ok=True)
    return d


def _instance_paths(out):
    return sorted(glob.glob(os.path.join(out, "instances", "instance_*.json")))


def _load_instances(out):
    paths = _instance_paths(out)
    if not paths:
        raise ConfigError(f"no instance files under {out}/instances; run `lbx gen` first")
    insts = []
    for p in paths:
        doc = _read_json(p)
        doc.pop("config_hash", None)
        insts.append((doc, deserialize(doc)))
    insts.sort(key=lambda t: t[0]["seed"])
    return insts


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(cfg, stdout=None):
    """Plan the setting, write plan.json and one instance document per seed."""
    stdout = stdout or sys.stdout
    chash = config_hash(cfg)
    out = _out_dir(cfg)
    log = _logger(out)
    plan = make_plan(cfg["setting"])
    os.makedirs(os.path.join(out, "instances"), exist_ok=True)
    seeds = seed_list(cfg)
    for s in seeds:
        doc = serialize(build_instance(plan, s))
        doc["config_hash"] = chash
        _write_json(os.path.join(out, "instances", f"instance_{s}.json"), doc)
    summary = plan.summary()
    _write_json(os.path.join(out, "plan.json"), _stamp({"plan": summary, "seeds": seeds}, chash))
    log.info("gen: %d instances, M=%d", len(seeds), plan.M)
    print(f"plan: kind={plan.kind} M={plan.M} alpha={plan.alpha:.6g} delta_bar={plan.delta_bar:.6g} "
          f"mode={plan.mode}", file=stdout)
    print("feasibility: " + ("all construction conditions hold" if not plan.violations
                             else "VIOLATED " + "; ".join(plan.violations)), file=stdout)
    print(f"wrote {len(seeds)} instance files to {os.path.join(out, 'instances')}", file=stdout)
    return EXIT_OK


def _algo_specs(cfg):
    specs = cfg["algorithms"]
    if isinstance(specs, (str, dict)):
        specs = [specs]
    out = []
    for s in specs:
        s = {"name": s} if isinstance(s, str) else dict(s)
        if s.get("name") not in alg.ALGORITHMS:
            raise ConfigError(f"unknown algorithm {s.get('name')!r}; choose from {alg.ALGORITHMS}")
        out.append(s)
    return out


def _cell_name(spec, seed):
    return f"{spec['name']}__seed{seed}"


def _run_cell(doc, inst, spec, seed, budget, eps, rcfg, chash, out, log):
    name = _cell_name(spec, seed)
    path = os.path.join(out, "runs", name + ".json")
    key = hashlib.sha256(dumps17({"instance": doc, "algorithm": spec, "seed": seed, "budget": budget,
                                  "stop_at_target": rcfg["stop_at_target"],
                                  "full_queries": rcfg["full_queries"],
                                  "transcripts": rcfg["transcripts"]}).encode()).hexdigest()
    if os.path.exists(path):
        old = _read_json(path)
        if old.get("cell_hash") == key:
            if old.get("config_hash") != chash:
                old["config_hash"] = chash
                _write_json(path, old)
            log.info("run: %s resumed (cell unchanged)", name)
            return old
    kind = "subgradient" if inst.kappa == 0 else "gradient"
    session = open_session(inst, kind, inst.plan.K, workers=1)
    f_ref = aud.instance_fstar_bound(inst) if rcfg["stop_at_target"] else None
    res = alg.run(spec, session, budget, eps, f_ref=f_ref, seed=seed)
    if rcfg["transcripts"]:
        with open(os.path.join(out, "runs", name + ".transcript.jsonl"), "w", encoding="utf-8") as fh:
            fh.write(dumps17({"schema_version": SCHEMA_VERSION, "config_hash": chash}) + "\n")
            for rec in transcript_records(session, rcfg["full_queries"]):
                fh.write(dumps17(rec) + "\n")
    cell = _stamp({"cell_hash": key, "run": res.summary(), "curve": res.curve}, chash)
    _write_json(path, cell)
    log.info("run: %s done in %d rounds", name, res.rounds_used)
    return _read_json(path)


def cmd_run(cfg, stdout=None):
    """Execute the algorithm x seed matrix on the generated instances."""
    stdout = stdout or sys.stdout
    chash = config_hash(cfg)
    out = _out_dir(cfg)
    log = _logger(out)
    insts = _load_instances(out)
    specs = _algo_specs(cfg)
    rcfg = cfg["run"]
    os.makedirs(os.path.join(out, "runs"), exist_ok=True)
    cells = [(doc, inst, spec) for spec in specs for doc, inst in insts]

    def work(c):
        doc, inst, spec = c
        budget = rcfg["budget"] if rcfg["budget"] is not None else inst.M
        return _run_cell(doc, inst, spec, int(doc["seed"]), int(budget), inst.plan.eps, rcfg,
                         chash, out, log)

    w = min(_workers(), len(cells))
    if w > 1:
        with ThreadPoolExecutor(w) as pool:
            cells_out = list(pool.map(work, cells))
    else:
        cells_out = [work(c) for c in cells]
    rows, curves = [], []
    for c in cells_out:
        r = c["run"]
        rows.append([r["algorithm"], r["seed"], r["instance_seed"], r["K"], r["rounds_used"],
                     r["best_value"], r["hit_round"]])
        curves.extend([r["algorithm"], r["seed"], t, v] for t, v in enumerate(c["curve"], start=1))
    _write_csv(os.path.join(out, "results.csv"),
               ["algorithm", "seed", "instance_seed", "K", "rounds_used", "best_value", "hit_round"],
               rows, chash)
    _write_csv(os.path.join(out, "curves.csv"), ["algorithm", "seed", "round", "best_value"],
               curves, chash)
    print(f"{len(rows)} result rows written to {os.path.join(out, 'results.csv')}", file=stdout)
    return EXIT_OK


def _probe(name, plan):
    qf, R = plan.feasible
    x = np.zeros(plan.d)
    if name == "e1":
        x[0] = R
        return x
    if name == "uniform":
        q = as_exponent(qf)
        scale = 1.0 if q == math.inf else plan.d ** (-1.0 / q)
        return np.full(plan.d, R * scale)
    raise ConfigError(f"unknown probe {name!r}; use 'e1' or 'uniform'")


def _load_cells(out):
    return [_read_json(p) for p in sorted(glob.glob(os.path.join(out, "runs", "*__seed*.json")))]


def cmd_audit(cfg, stdout=None):
    """Run the selected audits and write audit.json plus audit.csv."""
    stdout = stdout or sys.stdout
    chash = config_hash(cfg)
    out = _out_dir(cfg)
    log = _logger(out)
    acfg = cfg["audit"]
    insts = _load_instances(out)
    plan = insts[0][1].plan
    warnings = [f"construction condition violated: {v}" for v in plan.violations]
    checks = []
    bounds = {}

    if acfg.get("certificate", True):
        for doc, inst in insts:
            cert = aud.dual_certificate(inst.family)
            bounds[int(doc["seed"])] = aud.instance_fstar_bound(inst, cert.value)
            row = {"check": "certificate", "seed": int(doc["seed"]), "value": cert.value,
                   "gap": cert.gap, "method": cert.method, "fstar_bound": bounds[int(doc["seed"])]}
            if inst.plan.kind == "disjoint":
                pe = as_exponent(inst.p)
                expected = 1.0 if pe == math.inf else inst.M ** (-1.0 / pe)
                row.update(expected=expected, status="pass" if abs(cert.value - expected) <= 1e-6 else "flag")
            else:
                row["status"] = "info"
            checks.append(row)

    ccfg = acfg.get("concentration", {})
    if ccfg.get("enabled"):
        for name in ccfg.get("probes", ["e1", "uniform"]):
            rep = aud.concentration_audit(plan, _probe(name, plan), ccfg["deltas"], int(ccfg["N"]),
                                          seed=int(ccfg.get("seed", 0)))
            for r in rep["rows"]:
                checks.append({"check": "concentration", "probe": name, "delta": r["delta"],
                               "upper_tail": r["upper_tail"], "lower_tail": r["lower_tail"],
                               "bound": r["bound"], "status": "flag" if r["flag"] else "pass"})

    mcfg = acfg.get("minimax", {})
    if mcfg.get("enabled"):
        if plan.kind != "dense":
            warnings.append("minimax audit skipped: needs the dense family")
        else:
            rep = aud.dense_minimax_audit(plan.p, plan.d, plan.M, int(mcfg["N"]),
                                          seed0=int(mcfg.get("seed0", 0)), eps=plan.eps,
                                          gamma=plan.gamma)
            if not rep["regime_ok"]:
                warnings.append(f"minimax regime violated: M={plan.M} > cap {rep['regime_cap']:.6g}")
            checks.append({"check": "minimax", "threshold": rep["threshold"],
                           "fraction_below": rep["fraction_below"], "N": rep["N"],
                           "status": "pass" if rep["fraction_below"] <= plan.gamma else "flag"})

    cells = _load_cells(out)
    gcfg = acfg.get("gap", {})
    if gcfg.get("enabled", True) and cells:
        if not bounds:
            bounds = {int(doc["seed"]): aud.instance_fstar_bound(inst) for doc, inst in insts}
        by_seed = {int(doc["seed"]): inst for doc, inst in insts}
        per_algo = {}
        for c in cells:
            r = c["run"]
            inst = by_seed[int(r["instance_seed"])]
            v = aud.gap_audit(SimpleNamespace(best_value=r["best_value"], rounds_used=r["rounds_used"],
                                              instance_seed=r["instance_seed"]),
                              inst, bounds[int(r["instance_seed"])], inst.plan.eps)
            per_algo.setdefault(r["algorithm"], []).append(v["respected"])
            if r["rounds_used"] > inst.M:
                warnings.append(f"{r['algorithm']} seed {r['seed']}: {r['rounds_used']} rounds exceed M={inst.M}")
        for a in sorted(per_algo):
            frac = float(np.mean(per_algo[a]))
            checks.append({"check": "gap", "algorithm": a, "runs": len(per_algo[a]),
                           "respected_fraction": frac,
                           "status": "pass" if frac >= gcfg.get("min_respected", 0.9) else "flag"})

    if acfg.get("complexity", {}).get("enabled", True) and cells:
        by_algo = {}
        for c in cells:
            r = c["run"]
            by_algo.setdefault(r["algorithm"], []).append(alg.RunResult(
                r["algorithm"], r["hyper"], r["seed"], r["K"], r["best_value"], None,
                r["rounds_used"], [], r["hit_round"], r["f_ref"], r["eps"], r["instance_seed"]))
        for a in sorted(by_algo):
            est = alg.estimate_complexity(by_algo[a], eps=plan.eps, gamma=plan.gamma)
            checks.append({"check": "complexity", "algorithm": a, "hp": est["hp"],
                           "hp_gamma": est["hp_gamma"], "mean": est["mean"],
                           "censored": est["censored"],
                           "status": "pass" if est["hp_check"] else "flag"})

    flags = sum(c["status"] == "flag" for c in checks)
    doc = _stamp({"warnings": warnings, "checks": checks, "flags": flags}, chash)
    _write_json(os.path.join(out, "audit.json"), doc)
    keys = sorted({k for c in checks for k in c})
    order = ["check", "status"] + [k for k in keys if k not in ("check", "status")]
    _write_csv(os.path.join(out, "audit.csv"), order, [[c.get(k) for k in order] for c in checks], chash)
    for w in warnings:
        print("WARNING: " + w, file=stdout)
    print(f"{len(checks)} checks, {flags} flagged; report in {os.path.join(out, 'audit.json')}", file=stdout)
    log.info("audit: %d checks, %d flags", len(checks), flags)
    return EXIT_FLAGS if flags else EXIT_OK


def cmd_bound(cfg, stdout=None, write=True):
    """Print the bound report for the setting; optionally export JSON and CSV."""
    stdout = stdout or sys.stdout
    chash = config_hash(cfg)
    s, b = cfg["setting"], cfg["bound"]
    c_delta = 16.0 if s.get("c_delta") is None else float(s["c_delta"])
    consts = {"c_delta": c_delta, "c_regime": float(b["c_regime"]), "c_kappa": float(b["c_kappa"]),
              "nu": float(b["nu"])}
    rep = aud.bound_table(s["p"], float(s["kappa"]), float(s["eps"]), s["d"], int(s["K"]),
                          float(s["gamma"]), **consts)
    text = aud.report_csv(rep)
    stdout.write(text)
    if write:
        out = _out_dir(cfg)
        doc = _stamp(json.loads(rep.to_json()), chash)
        _write_json(os.path.join(out, "bound.json"), doc)
        with open(os.path.join(out, "bound.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# schema_version={SCHEMA_VERSION} config_hash={chash}\n" + text)
        table = aud.table1_csv(float(s["eps"]), s["d"], int(s["K"]), float(s["gamma"]),
                               kappas=tuple(float(k) for k in b["kappas"]), **consts)
        with open(os.path.join(out, "table1.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# schema_version={SCHEMA_VERSION} config_hash={chash}\n" + table)
    return EXIT_OK


def cmd_report(cfg, stdout=None):
    """Assemble plan, results, audits and bounds found in the output directory into report.md."""
    stdout = stdout or sys.stdout
    chash = config_hash(cfg)
    out = _out_dir(cfg)
    buf = io.StringIO()
    buf.write(f"# lbx report\n\nschema_version: {SCHEMA_VERSION}\nconfig_hash: {chash}\n\n")
    if os.path.exists(os.path.join(out, "plan.json")):
        plan = _read_json(os.path.join(out, "plan.json"))["plan"]
        buf.write("## plan\n\n")
        for k in sorted(plan):
            buf.write(f"- {k}: {plan[k]}\n")
        buf.write("\n")
    cells = _load_cells(out)
    if cells:
        buf.write("## runs\n\n| algorithm | runs | mean best value | mean rounds |\n|---|---|---|---|\n")
        by = {}
        for c in cells:
            by.setdefault(c["run"]["algorithm"], []).append(c["run"])
        for a in sorted(by):
            rs = by[a]
            buf.write(f"| {a} | {len(rs)} | {format(float(np.mean([r['best_value'] for r in rs])), '.6g')} "
                      f"| {format(float(np.mean([r['rounds_used'] for r in rs])), '.6g')} |\n")
        buf.write("\n")
    if os.path.exists(os.path.join(out, "audit.json")):
        a = _read_json(os.path.join(out, "audit.json"))
        buf.write(f"## audit\n\nflags: {a['flags']}\n\n")
        for w in a["warnings"]:
            buf.write(f"- WARNING: {w}\n")
        for c in a["checks"]:
            extra = ", ".join(f"{k}={c[k]}" for k in sorted(c) if k not in ("check", "status"))
            buf.write(f"- {c['check']} [{c['status']}] {extra}\n")
        buf.write("\n")
    if os.path.exists(os.path.join(out, "bound.csv")):
        with open(os.path.join(out, "bound.csv"), encoding="utf-8") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        buf.write("## bounds\n\n```\n" + "".join(lines) + "```\n")
    with open(os.path.join(out, "report.md"), "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
    print(f"report written to {os.path.join(out, 'report.md')}", file=stdout)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

COMMANDS = {"gen": cmd_gen, "run": cmd_run, "audit": cmd_audit, "bound": cmd_bound,
            "report": cmd_report}


def build_parser():
    ap = argparse.ArgumentParser(prog="lbx", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("-c", "--config", help="JSON config file")
        sp.add_argument("-o", "--out", help="output directory (overrides output.dir)")
        sp.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override a scalar config field, e.g. setting.eps=0.1")
        if name == "run":
            sp.add_argument("--budget", type=int, help="rounds per run (overrides run.budget)")
        if name == "bound":
            for f in ("p", "kappa", "eps", "d", "K", "gamma"):
                sp.add_argument(f"--{f}", help=f"shorthand for --set setting.{f}=...")
            sp.add_argument("--large-d", action="store_true",
                            help=f"evaluate at d = {LARGE_D:.0e}, deep in the high-dimensional regime")
            sp.add_argument("--no-write", action="store_true", help="print only")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.set)
        if args.command == "run" and args.budget is not None:
            overrides.append(f"run.budget={args.budget}")
        if args.command == "bound":
            for f in ("p", "kappa", "eps", "d", "K", "gamma"):
                v = getattr(args, f)
                if v is not None:
                    overrides.append(f"setting.{f}={v}")
            if args.large_d:
                overrides.append(f"setting.d={LARGE_D}")
        cfg = load_config(args.config, overrides)
        if args.out:
            cfg["output"]["dir"] = args.out
        if args.command == "bound":
            return cmd_bound(cfg, write=not args.no_write)
        return COMMANDS[args.command](cfg)
    except InfeasibleConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, SchemaError, ValueError, KeyError, TypeError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
