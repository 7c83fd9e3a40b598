"""Command-line front end: ``procrisk eval | decompose | check``."""

from __future__ import annotations

import argparse
import csv
import io as _stdio
import sys

import numpy as np

from . import calibration, consistency
from .errors import EvaluationError, InconsistentInput, ValidationError
from .io import dumps, load_json, load_measure, load_tree, write_atomic
from .measures import ProductMeasure, compose, decompose
from .tree import AdaptedProcess, iid_tree
from .zoo import AVaRRisk, PenaltyTableRisk, risk_from_spec

PROPERTIES = (
    "time-consistency", "acceptance", "rejection", "weak", "cash-subadditivity",
    "cash-additivity", "calibration", "maximal-inequality", "doob-riesz", "bubble-profile",
    "stability",
)

EXIT_PASS, EXIT_FAIL, EXIT_INVALID, EXIT_EVAL = 0, 1, 2, 3


class UsageError(Exception):
    """Bad or missing input named on the command line."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="procrisk", description="Risk measures for cash-flow processes on event trees.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--tree", required=True, help="tree JSON file (may hold named processes)")
        p.add_argument("--seed", type=int, default=42)
        p.add_argument("--budget", type=int, default=500, help="probe count for randomized checks")
        p.add_argument("--tol", type=float, default=1e-9)
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.add_argument("--out", help="write the report here instead of stdout")

    ev = sub.add_parser("eval", help="risk of a process at every node")
    common(ev)
    ev.add_argument("--process", required=True, help="name of a process in the tree file")
    ev.add_argument("--risk", required=True, help="risk measure spec JSON file")

    de = sub.add_parser("decompose", help="split a product measure into model and discounting")
    common(de)
    de.add_argument("--measure", required=True, help="measure JSON file with density Z")

    ch = sub.add_parser("check", help="test a consistency or calibration property")
    common(ch)
    ch.add_argument("--risk", required=True)
    ch.add_argument("--property", required=True)
    ch.add_argument("--process", help="process name (maximal-inequality)")
    ch.add_argument("--measure", help="measure JSON file (maximal-inequality, doob-riesz)")
    ch.add_argument("--term", help="term structure JSON file (calibration)")
    ch.add_argument("--horizons", default="1,2,3,4", help="comma-separated horizons (bubble-profile)")
    ch.add_argument("--tilt", type=float, default=0.6, help="per-step up-probability of the model (bubble-profile)")
    ch.add_argument("--levels", default="0.05,0.1,0.5", help="thresholds c (maximal-inequality)")
    return parser


# -- helpers -------------------------------------------------------------------


def _process(procs, name):
    if name not in procs:
        raise UsageError(f"processes.{name} not found")
    return procs[name]


def _risk(tree, path):
    return risk_from_spec(tree, load_json(path))


def _node_table(tree, per_time, quantity):
    rows = []
    for t, vals in per_time.items():
        for v, val in zip(tree.level(t), vals):
            rows.append((t, tree.ids[v], quantity, val))
    return rows


def _node_rows(tree, values, quantity):
    return [(int(tree.time[i]), tree.ids[i], quantity, float(values[i])) for i in range(tree.n)]


def _csv(rows) -> str:
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "node", "quantity", "value"])
    for t, node, q, val in rows:
        w.writerow([t, node, q, repr(float(val)) if isinstance(val, (float, int, np.floating)) else val])
    return buf.getvalue()


def _emit(args, report: dict, rows) -> None:
    text = dumps(report) if args.format == "json" else _csv(rows)
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)


# -- commands --------------------------------------------------------------------


def cmd_eval(args) -> int:
    tree, procs = load_tree(args.tree)
    X = _process(procs, args.process)
    rm = _risk(tree, args.risk)
    per_time = {t: rm.evaluate(X, t) for t in range(tree.horizon + 1)}
    values = {str(t): {str(tree.ids[v]): float(x) for v, x in zip(tree.level(t), vals)}
              for t, vals in per_time.items()}
    report = {"command": "eval", "risk": rm.to_spec(), "process": args.process, "values": values}
    _emit(args, report, _node_table(tree, per_time, "rho"))
    return EXIT_PASS


def cmd_decompose(args) -> int:
    tree, _ = load_tree(args.tree)
    Q = load_measure(tree, args.measure)
    dis = decompose(Q)
    back = compose(dis.M, dis.gamma)
    on = Q.Z > 0
    residual = float(np.max(np.abs(back.Z - Q.Z)[on])) if on.any() else 0.0
    report = {"command": "decompose", **dis.to_mapping(), "U": _mapping(tree, Q.tail_mass),
              "residual": residual}
    rows = (_node_rows(tree, dis.M.values, "M") + _node_rows(tree, dis.D.values, "D")
            + _node_rows(tree, dis.gamma.values, "gamma"))
    rows.append(("", "", "residual", residual))
    _emit(args, report, rows)
    return EXIT_PASS if residual <= args.tol else EXIT_FAIL


def _mapping(tree, vals):
    return {str(i): float(v) for i, v in zip(tree.ids, vals)}


def _needs(args, name):
    if getattr(args, name) is None:
        raise UsageError(f"--{name} is required for property {args.property!r}")
    return getattr(args, name)


def _check(args, tree, procs, rm):
    prop = args.property
    budget, seed, tol = args.budget, args.seed, args.tol
    if prop in ("time-consistency", "acceptance", "rejection"):
        mode = {"time-consistency": "strong"}.get(prop, prop)
        return consistency.check_time_consistent(rm, budget, mode=mode, tol=tol, seed=seed).to_json()
    if prop == "weak":
        return consistency.check_weak_acceptance(rm, budget, tol=tol, seed=seed).to_json()
    if prop == "cash-subadditivity":
        return calibration.cash_subadditivity_battery(rm, draws=budget, seed=seed, tol=tol).to_json()
    if prop == "cash-additivity":
        details, status, cex = {}, "pass", None
        for s in range(1, tree.horizon + 1):
            v = calibration.check_cash_additive_at(rm, 0, s, budget=min(budget, 50), seed=seed, tol=tol)
            details[str(s)] = v.details
            if not v and status == "pass":
                status, cex = "fail", v.counterexample
        return {"property": prop, "status": status, "tolerance": tol, "counterexample": cex, "details": details}
    if prop == "calibration":
        term = calibration.TermStructure.from_mapping(tree, load_json(_needs(args, "term")))
        details, status, cex = {}, "pass", None
        times = sorted({int(tree.time[v]) for v in term.zcb})
        for t in times:
            if not all(int(v) in term.zcb for v in tree.level(t)):
                continue
            v = calibration.check_zcb_calibration(rm, term, t, tol=tol, seed=seed)
            details[str(t)] = v.details
            if not v and status == "pass":
                status, cex = "fail", v.counterexample
        return {"property": prop, "status": status, "tolerance": tol, "counterexample": cex, "details": details}
    if prop == "maximal-inequality":
        X = _process(procs, _needs(args, "process"))
        Q = load_measure(tree, args.measure) if args.measure else ProductMeasure.reference(tree)
        results = {}
        ok = True
        for c in (float(s) for s in args.levels.split(",")):
            res = consistency.maximal_inequality_experiment(rm, Q, X, c)
            results[repr(c)] = res.to_json()
            ok &= res.holds
        return {"property": prop, "status": "pass" if ok else "fail", "tolerance": tol,
                "counterexample": None if ok else results, "details": results}
    if prop == "doob-riesz":
        Q = load_measure(tree, _needs(args, "measure"))
        try:
            dec = consistency.doob_riesz(rm, Q, tol=tol)
        except InconsistentInput as exc:
            return {"property": prop, "status": "fail", "tolerance": tol,
                    "counterexample": {"reason": str(exc)}, "details": {}}
        N = dec.residual_martingale
        worst = float(np.nanmax(np.abs(N))) if np.isfinite(N).any() else 0.0
        status = "pass" if worst <= tol else "fail"
        return {"property": prop, "status": status, "tolerance": tol,
                "counterexample": None if status == "pass" else {"max_abs_N": worst},
                "details": dec.to_json(tree)}
    if prop == "bubble-profile":
        spec = load_json(args.risk)
        horizons = [int(h) for h in args.horizons.split(",")]
        tilt = args.tilt

        def rm_family(T):
            return risk_from_spec(iid_tree(T, [0.5, 0.5]), spec)

        def q_family(tr):
            M = np.ones(tr.n)
            for t in range(1, tr.horizon + 1):
                for v in tr.level(t):
                    first = tr.children[tr.parent[v]][0] == v
                    M[v] = M[tr.parent[v]] * (tilt if first else 1 - tilt) / tr.prob[v]
            return compose(AdaptedProcess(tr, M), tr.mu)

        prof = consistency.bubble_profile(rm_family, q_family, horizons)
        return {"property": prop, "status": "pass", "tolerance": tol, "counterexample": None,
                "details": prof.to_json()}
    if prop == "stability":
        if isinstance(rm, AVaRRisk):
            family = rm.defining_vertices(0)
        elif isinstance(rm, PenaltyTableRisk):
            family = [Q for (mid, t), row in sorted(rm.table.items()) if t == 0 and row[0] == 0
                      for Q in [rm.measures[mid]]]
        else:
            raise UsageError(f"stability needs a coherent family (avar or penalty-table), not {rm.kind!r}")
        return consistency.check_stability(family, tol=tol).to_json()
    raise UsageError(f"unknown property {prop!r}; choose from {', '.join(PROPERTIES)}")


def cmd_check(args) -> int:
    if args.property not in PROPERTIES:
        raise UsageError(f"unknown property {args.property!r}; choose from {', '.join(PROPERTIES)}")
    tree, procs = load_tree(args.tree)
    rm = _risk(tree, args.risk)
    report = _check(args, tree, procs, rm)
    report["risk"] = rm.to_spec() if rm.kind != "penalty-table" else {"kind": rm.kind}
    rows = [("", "", "status", report["status"])]
    for key, val in sorted(report.get("details", {}).items()):
        if isinstance(val, (int, float)) and not isinstance(val, bool):
            rows.append(("", "", key, val))
    _emit(args, report, rows)
    return EXIT_PASS if report["status"] == "pass" else EXIT_FAIL


COMMANDS = {"eval": cmd_eval, "decompose": cmd_decompose, "check": cmd_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ValidationError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"procrisk: error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except EvaluationError as exc:
        print(f"procrisk: evaluation failed: {exc}", file=sys.stderr)
        return EXIT_EVAL


if __name__ == "__main__":
    sys.exit(main())
