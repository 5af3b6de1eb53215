"""Batch front end: config parsing, orchestration, result emission.

Subcommands:
  simulate      advance a configuration and write its event log
  rho-direct    correlation function by direct marginalization
  rho-tree      single tree value
  rho-series    full tree expansion with per-tree breakdown
  verify-step   one-particle integration identity check
  verify-cancel recollision cancellation check
  verify-bbgky  hierarchy residual check along a trajectory
  count-trees   exact tree count
  sweep         repeat an estimator over a parameter grid

Configs are YAML; results are JSON documents echoing the fully
defaulted config, the seed and the package version.  Exit codes:
0 success, 1 statistical verification failure, 2 configuration error.
"""
import argparse
import copy
import csv
import json
import os
import sys

import numpy as np
import yaml

from . import __version__, densities, dynamics, estimators, trees
from .dynamics import Box, Configuration, SingularSample, Tolerances
from .trees import Tree


class ConfigError(Exception):
    pass


DEFAULT_CONFIG = {
    "box": {"lengths": [1.0, 1.0, 1.0], "a": 0.1},
    "measure": {"variant": "perturbed", "beta": 1.0, "N": 3, "lam": 0.3,
                "wavevector": [1, 0, 0], "activity": None, "n_max": None},
    "calibration": {"n_samples": 200000, "seed": 12345},
    "n": 1,
    "point": "sample-generic",
    "t": 0.5,
    "t_grid": None,
    "duration": 1.0,
    "samples": 100000,
    "antisym_samples": 100,
    "seed": 0,
    "threads": 1,
    "nsigma": 3.0,
    "max_redraws": 20,
    "tolerances": {"eps_graze": 1e-9, "eps_time": 1e-12,
                   "max_events": 10000},
    "tree": None,
    "node": 1,
    "inner": "direct",
    "sweep": None,
    "out": None,
}


def load_config(path=None, overrides=None):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as f:
                user = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError("cannot read config %s: %s" % (path, e))
        if not isinstance(user, dict):
            raise ConfigError("config must be a mapping")
        for key, val in user.items():
            if key not in cfg:
                raise ConfigError("unknown config key %r" % key)
            if isinstance(cfg[key], dict) and isinstance(val, dict):
                for sub, sv in val.items():
                    if sub not in cfg[key]:
                        raise ConfigError(
                            "unknown config key %s.%s" % (key, sub))
                    cfg[key][sub] = sv
            else:
                cfg[key] = val
    for key, val in (overrides or {}).items():
        if val is not None:
            cfg[key] = val
    return cfg


def build_box(cfg):
    b = cfg["box"]
    try:
        return Box(tuple(float(x) for x in b["lengths"]), float(b["a"]))
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError("bad box spec: %s" % e)


def build_tolerances(cfg):
    t = cfg["tolerances"]
    try:
        return Tolerances(eps_graze=float(t["eps_graze"]),
                          eps_time=float(t["eps_time"]),
                          max_events=int(t["max_events"]))
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError("bad tolerances: %s" % e)


def build_measure(cfg, box, calibrate=True):
    m = cfg["measure"]
    try:
        measure = densities.InitialMeasure(
            variant=m["variant"], beta=float(m["beta"]),
            N=None if m.get("N") is None else int(m["N"]),
            lam=float(m.get("lam") or 0.0),
            wavevector=tuple(m.get("wavevector") or (1, 0, 0)),
            activity=None if m.get("activity") is None
            else float(m["activity"]),
            n_max=None if m.get("n_max") is None else int(m["n_max"]))
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError("bad measure spec: %s" % e)
    if calibrate:
        cal = cfg["calibration"]
        measure.calibrate(box, n_samples=int(cal["n_samples"]),
                          seed=int(cal["seed"]),
                          processes=int(cfg["threads"]))
    return measure


def build_point(cfg, measure, box, rng):
    point = cfg["point"]
    if point == "sample-generic":
        return estimators.draw_evaluation_point(
            measure, box, int(cfg["n"]), rng), True
    try:
        z = Configuration(np.asarray(point["q"], dtype=float),
                          np.asarray(point["p"], dtype=float))
    except (TypeError, KeyError, ValueError) as e:
        raise ConfigError("bad evaluation point: %s" % e)
    if not dynamics.is_admissible(z, box):
        raise ConfigError("evaluation point is not admissible")
    return z, False


def parse_tree(text, expect_n=None):
    if text is None:
        raise ConfigError("this command needs a tree (e.g. \"1:[1]\")")
    try:
        tr = Tree.parse(str(text))
    except (ValueError, TypeError) as e:
        raise ConfigError("bad tree %r: %s" % (text, e))
    if expect_n is not None and tr.n != expect_n:
        raise ConfigError("tree has %d root lines, expected %d"
                          % (tr.n, expect_n))
    return tr


def _estimate_doc(est):
    return est.to_dict()


def run_with_redraws(cfg, measure, box, tol, fn):
    """Evaluate fn(spec) at the configured point; sampled generic
    points hit by a singular trajectory are redrawn and logged."""
    rng = np.random.default_rng([int(cfg["seed"]), 0xE0A1])
    redraws = []
    for attempt in range(int(cfg["max_redraws"])):
        z, generic = build_point(cfg, measure, box, rng)
        spec = estimators.ExperimentSpec(
            measure=measure, box=box, z_n=z, t=float(cfg["t"]),
            seed=int(cfg["seed"]), tol=tol,
            n_samples=int(cfg["samples"]), processes=int(cfg["threads"]))
        try:
            return spec, fn(spec), redraws
        except SingularSample as e:
            if not generic:
                raise ConfigError(
                    "explicit evaluation point is singular: %s" % e.reason)
            redraws.append(e.reason)
    raise ConfigError("all %d sampled evaluation points were singular"
                      % int(cfg["max_redraws"]))


def emit(doc, cfg, name):
    text = json.dumps(doc, indent=1, sort_keys=True)
    out = cfg.get("out")
    if out:
        os.makedirs(out, exist_ok=True)
        path = os.path.join(out, name + ".json")
        with open(path, "w") as f:
            f.write(text + "\n")
        print("wrote %s" % path)
    else:
        print(text)


def base_doc(command, cfg):
    return {"command": command, "version": __version__, "config": cfg,
            "seed": int(cfg["seed"])}


def point_doc(spec):
    return {"q": spec.z_n.q.tolist(), "p": spec.z_n.p.tolist()}


def cmd_simulate(cfg):
    box = build_box(cfg)
    tol = build_tolerances(cfg)
    measure = build_measure(cfg, box, calibrate=False)
    rng = np.random.default_rng([int(cfg["seed"]), 0xE0A1])
    duration = float(cfg["duration"])
    for _ in range(int(cfg["max_redraws"])):
        z, generic = build_point(cfg, measure, box, rng)
        try:
            final, log = dynamics.advance(z, box, duration, tol)
            break
        except SingularSample as e:
            if not generic:
                raise ConfigError("trajectory is singular: %s" % e.reason)
    else:
        raise ConfigError("all sampled configurations were singular")
    doc = base_doc("simulate", cfg)
    doc["result"] = {
        "n_events": len(log), "duration": duration,
        "initial": {"q": z.q.tolist(), "p": z.p.tolist()},
        "final": {"q": final.q.tolist(), "p": final.p.tolist()},
    }
    out = cfg.get("out")
    if out:
        os.makedirs(out, exist_ok=True)
        csv_path = os.path.join(out, "events.csv")
        log.to_csv(csv_path)
        doc["result"]["events_csv"] = csv_path
    emit(doc, cfg, "simulate")
    return 0


def cmd_rho_direct(cfg):
    box = build_box(cfg)
    tol = build_tolerances(cfg)
    measure = build_measure(cfg, box)
    spec, est, redraws = run_with_redraws(
        cfg, measure, box, tol, lambda sp: estimators.rho_direct(sp))
    doc = base_doc("rho-direct", cfg)
    doc["point"] = point_doc(spec)
    doc["redraws"] = redraws
    doc["result"] = _estimate_doc(est)
    emit(doc, cfg, "rho_direct")
    return 0


def cmd_rho_tree(cfg):
    box = build_box(cfg)
    tol = build_tolerances(cfg)
    measure = build_measure(cfg, box)
    tr = parse_tree(cfg["tree"], expect_n=int(cfg["n"]))
    spec, est, redraws = run_with_redraws(
        cfg, measure, box, tol, lambda sp: estimators.tree_value(tr, sp))
    doc = base_doc("rho-tree", cfg)
    doc["tree"] = tr.serialize()
    doc["point"] = point_doc(spec)
    doc["redraws"] = redraws
    doc["result"] = _estimate_doc(est)
    emit(doc, cfg, "rho_tree")
    return 0


def cmd_rho_series(cfg):
    box = build_box(cfg)
    tol = build_tolerances(cfg)
    measure = build_measure(cfg, box)
    spec, est, redraws = run_with_redraws(
        cfg, measure, box, tol, lambda sp: estimators.rho_series(sp))
    doc = base_doc("rho-series", cfg)
    doc["point"] = point_doc(spec)
    doc["redraws"] = redraws
    doc["result"] = _estimate_doc(est)
    emit(doc, cfg, "rho_series")
    return 0


def cmd_verify_step(cfg):
    box = build_box(cfg)
    tol = build_tolerances(cfg)
    measure = build_measure(cfg, box)
    n = int(cfg["n"])
    tr = parse_tree(cfg["tree"], expect_n=n + 1)
    spec, out, redraws = run_with_redraws(
        cfg, measure, box, tol,
        lambda sp: estimators.verify_integration_step(tr, sp))
    lhs, rhs = out["lhs"], out["rhs"]
    gap = abs(lhs.value - rhs.value)
    bound = float(cfg["nsigma"]) * float(np.hypot(lhs.stderr, rhs.stderr))
    ok = gap <= bound
    doc = base_doc("verify-step", cfg)
    doc["tree"] = tr.serialize()
    doc["point"] = point_doc(spec)
    doc["redraws"] = redraws
    doc["result"] = {"lhs": _estimate_doc(lhs), "rhs": _estimate_doc(rhs),
                     "gap": gap, "bound": bound, "pass": ok}
    emit(doc, cfg, "verify_step")
    if not ok:
        print("FAIL: |lhs - rhs| = %g > %g" % (gap, bound),
              file=sys.stderr)
        return 1
    return 0


def cmd_verify_cancel(cfg):
    box = build_box(cfg)
    tol = build_tolerances(cfg)
    measure = build_measure(cfg, box)
    tr = parse_tree(cfg["tree"], expect_n=int(cfg["n"]))
    node = int(cfg["node"])
    if not 1 <= node <= tr.m:
        raise ConfigError("node %d outside 1..%d" % (node, tr.m))
    spec, out, redraws = run_with_redraws(
        cfg, measure, box, tol,
        lambda sp: estimators.verify_cancellation(
            tr, node, sp, n_antisym=int(cfg["antisym_samples"])))
    total = out["total"]
    anti = out["antisymmetry"]
    nv = int(np.sum(anti["violations"] > 1e-9)) if len(
        anti["violations"]) else 0
    bound = float(cfg["nsigma"]) * total.stderr
    ok = abs(total.value) <= bound and nv == 0
    doc = base_doc("verify-cancel", cfg)
    doc["tree"] = tr.serialize()
    doc["node"] = node
    doc["point"] = point_doc(spec)
    doc["redraws"] = redraws
    doc["result"] = {
        "minus": _estimate_doc(out["minus"]),
        "plus": _estimate_doc(out["plus"]),
        "total": _estimate_doc(total), "bound": bound,
        "antisymmetry": {
            "n_found": anti["n_found"], "n_tries": anti["n_tries"],
            "n_tol_rejected": anti["n_tol_rejected"],
            "max_violation": float(np.max(anti["violations"]))
            if len(anti["violations"]) else 0.0,
            "n_violating": nv},
        "pass": ok}
    emit(doc, cfg, "verify_cancel")
    if not ok:
        print("FAIL: cancellation total %g (bound %g), %d anti-symmetry "
              "violations" % (total.value, bound, nv), file=sys.stderr)
        return 1
    return 0


def cmd_verify_bbgky(cfg):
    box = build_box(cfg)
    tol = build_tolerances(cfg)
    measure = build_measure(cfg, box)
    t_grid = cfg["t_grid"]
    if not t_grid:
        raise ConfigError("verify-bbgky needs t_grid")
    t_grid = [float(x) for x in t_grid]
    cfg = dict(cfg, t=t_grid[-1])
    spec, rows, redraws = run_with_redraws(
        cfg, measure, box, tol,
        lambda sp: estimators.bbgky_residual(
            sp, t_grid, inner=cfg["inner"]))
    nsig = float(cfg["nsigma"])
    results = []
    ok = True
    for row in rows:
        bound = nsig * (row["stderr"] + row["quad_bound"])
        good = abs(row["residual"]) <= bound
        ok = ok and good
        results.append({
            "t": row["t"], "lhs": _estimate_doc(row["lhs"]),
            "rhs": _estimate_doc(row["rhs"]),
            "residual": row["residual"], "stderr": row["stderr"],
            "quad_bound": row["quad_bound"], "bound": bound,
            "pass": good})
    doc = base_doc("verify-bbgky", cfg)
    doc["point"] = point_doc(spec)
    doc["redraws"] = redraws
    doc["result"] = {"grid": results, "pass": ok}
    emit(doc, cfg, "verify_bbgky")
    if not ok:
        for r in results:
            if not r["pass"]:
                print("FAIL at t=%g: residual %g > %g"
                      % (r["t"], r["residual"], r["bound"]),
                      file=sys.stderr)
        return 1
    return 0


def cmd_count_trees(cfg, n, m):
    count = trees.count_trees(n, m)
    print(count)
    doc = base_doc("count-trees", cfg)
    doc["result"] = {"n": n, "m": m, "count": count}
    if cfg.get("out"):
        emit(doc, cfg, "count_trees")
    return 0


def cmd_sweep(cfg):
    sweep = cfg["sweep"]
    if not sweep:
        raise ConfigError("sweep needs a sweep section")
    param = sweep.get("parameter")
    values = sweep.get("values")
    command = sweep.get("command", "rho-series")
    if param not in ("t", "lam"):
        raise ConfigError("sweep parameter must be 't' or 'lam'")
    if not values:
        raise ConfigError("sweep needs a values list")
    if command not in ("rho-direct", "rho-series"):
        raise ConfigError("sweep command must be rho-direct or rho-series")
    box = build_box(cfg)
    tol = build_tolerances(cfg)
    rows = []
    measure = None
    if param == "t":
        measure = build_measure(cfg, box)
    for val in values:
        sub = dict(cfg)
        if param == "t":
            sub["t"] = float(val)
            meas = measure
        else:
            sub["measure"] = dict(cfg["measure"], lam=float(val))
            meas = build_measure(sub, box)
        fn = estimators.rho_direct if command == "rho-direct" \
            else estimators.rho_series
        spec, est, redraws = run_with_redraws(sub, meas, box, tol, fn)
        rows.append({"value_of_%s" % param: float(val),
                     "estimate": _estimate_doc(est),
                     "redraws": redraws})
    doc = base_doc("sweep", cfg)
    doc["result"] = {"parameter": param, "command": command, "rows": rows}
    out = cfg.get("out")
    if out:
        os.makedirs(out, exist_ok=True)
        csv_path = os.path.join(out, "sweep.csv")
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([param, "value", "stderr", "n_samples",
                        "n_rejected"])
            for r in rows:
                e = r["estimate"]
                w.writerow([r["value_of_%s" % param], e["value"],
                            e["stderr"], e["n_samples"], e["n_rejected"]])
        doc["result"]["csv"] = csv_path
    emit(doc, cfg, "sweep")
    return 0


def make_parser():
    p = argparse.ArgumentParser(
        prog="hstrees",
        description="Hard-sphere correlation function experiments")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config path")
    common.add_argument("--seed", type=int, help="master RNG seed")
    common.add_argument("--samples", type=int,
                        help="MC sample count override")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker process count")
    for name in ("simulate", "rho-direct", "rho-series", "verify-bbgky",
                 "sweep"):
        sub.add_parser(name, parents=[common])
    for name in ("rho-tree", "verify-step"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--tree", help="tree as n:[j1,j2,...]")
    sp = sub.add_parser("verify-cancel", parents=[common])
    sp.add_argument("--tree", help="tree as n:[j1,j2,...]")
    sp.add_argument("--node", type=int, help="node index, 1-based")
    sp = sub.add_parser("count-trees", parents=[common])
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--m", type=int, required=True)
    return p


_COMMANDS = {
    "simulate": cmd_simulate,
    "rho-direct": cmd_rho_direct,
    "rho-tree": cmd_rho_tree,
    "rho-series": cmd_rho_series,
    "verify-step": cmd_verify_step,
    "verify-cancel": cmd_verify_cancel,
    "verify-bbgky": cmd_verify_bbgky,
    "sweep": cmd_sweep,
}


def main(argv=None):
    args = make_parser().parse_args(argv)
    overrides = {"seed": args.seed, "samples": args.samples,
                 "out": args.out, "threads": args.threads}
    for key in ("tree", "node"):
        if hasattr(args, key) and getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "count-trees":
            return cmd_count_trees(cfg, args.n, args.m)
        return _COMMANDS[args.command](cfg)
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return 2
    except (ValueError, trees.EnumerationTooLarge,
            densities.PackingTooTight) as e:
        print("config error: %s" % e, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
