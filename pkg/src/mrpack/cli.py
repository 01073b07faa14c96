"""Command-line front end: gen, profile, run, explain, optimize, verify.

Exit codes: 0 success, 1 verify found differences, 2 bad input (usage,
parse or validation errors), 3 execution error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import search
from .executor import ExecutionError, compare_outputs, read_dataset, run_plan, write_dataset
from .ir import ClusterSpec, PlanParseError, PlanValidationError, parse_plan, write_plan
from .transforms import TransformError
from .workloads import WORKLOADS, UnknownWorkloadError, generate, install_profiles

log = logging.getLogger("mrpack")

EXIT_OK, EXIT_DIFF, EXIT_INPUT, EXIT_RUN = 0, 1, 2, 3
SEED_ENV = "MRPACK_SEED"


class InputError(Exception):
    pass


def _default_seed():
    try:
        return int(os.environ.get(SEED_ENV, "0"))
    except ValueError:
        raise InputError(f"{SEED_ENV} must be an integer")


def _load_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {what} {path}: {exc}")


def _cluster(args, plan):
    if getattr(args, "cluster", None):
        return ClusterSpec.from_obj(_load_json(args.cluster, "cluster file"))
    return plan.cluster or ClusterSpec()


def load_inputs(plan, data_dir):
    data_dir = Path(data_dir)
    inputs = {}
    for d in plan.base_datasets():
        ds = plan.datasets[d]
        a = ds.annotations
        if a.key_fields is None or a.value_fields is None:
            raise InputError(f"dataset {d} declares no field types; cannot load delimited files")
        try:
            inputs[d] = read_dataset(data_dir / d, a.key_fields, a.value_fields, ds.layout)
        except (OSError, ValueError) as exc:
            raise InputError(f"dataset {d}: {exc}")
    return inputs


def save_datasets(plan, datasets, out_dir):
    for d, ds in sorted(datasets.items()):
        a = plan.datasets[d].annotations if d in plan.datasets else None
        kf = a.key_fields if a and a.key_fields else [[f, "str"] for f in sorted({k for r in ds.records() for k in r[0]})]
        vf = a.value_fields if a and a.value_fields else [[f, "str"] for f in sorted({k for r in ds.records() for k in r[1]})]
        write_dataset(ds, Path(out_dir) / d, kf, vf)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    try:
        plan, inputs = generate(args.workload, args.scale, args.seed, profile=not args.no_profile)
    except UnknownWorkloadError as exc:
        raise InputError(exc.args[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_plan(plan, out / "plan.json")
    save_datasets(plan, inputs, out / "data")
    print(f"wrote {out / 'plan.json'} ({len(plan.jobs)} jobs) and {len(inputs)} base datasets under {out / 'data'}")
    return EXIT_OK


def cmd_profile(args):
    plan = parse_plan(args.plan)
    inputs = load_inputs(plan, args.data)
    if not any(len(ds) for ds in inputs.values()):
        raise InputError("all inputs are empty; nothing to profile (an empty job costs only its start-up floor)")
    install_profiles(plan, inputs)
    out = args.out or args.plan
    write_plan(plan, out)
    print(f"profiled {len(plan.jobs)} jobs -> {out}")
    return EXIT_OK


def cmd_run(args):
    plan = parse_plan(args.plan)
    inputs = load_inputs(plan, args.data)
    t0 = time.perf_counter()
    outputs, trace = run_plan(plan, inputs=inputs)
    elapsed = time.perf_counter() - t0
    if args.out:
        save_datasets(plan, outputs, args.out)
    for jid, jt in trace.jobs.items():
        print(f"{jid}\tmap_in={jt.map_input_records}\tshuffle={jt.shuffle_records}\tout="
              + ",".join(f"{d}:{n}" for d, n in sorted(jt.output_records.items())))
    print(f"ran {len(plan.jobs)} jobs in {elapsed:.3f}s")
    return EXIT_OK


def cmd_explain(args):
    plan = parse_plan(args.plan)
    rep = search.explain(plan)
    if args.json:
        print(json.dumps(rep, indent=2, sort_keys=True))
        return EXIT_OK
    for i, u in enumerate(rep["units"], 1):
        print(f"unit {i}: producers={','.join(u['unit']['producers'])} consumers={','.join(u['unit']['consumers'])}")
        for c in u["checks"]:
            why = f": {c['reason']}" if c["reason"] else ""
            print(f"  {c['transform']:<14} {','.join(c['target']):<24} {c['status'].replace('-', ' ')}{why}")
    return EXIT_OK


def _rrs_params(args, cfg):
    p = search.RrsParams()
    for k in ("explore_samples", "exploit_samples", "shrink_ratio", "restart_threshold", "total_budget"):
        if k in cfg:
            setattr(p, k, cfg[k])
    p.seed = args.seed if args.seed is not None else cfg.get("seed", _default_seed())
    if args.budget is not None:
        p.total_budget = args.budget
    p.explore_samples = min(p.explore_samples, p.total_budget)
    p.__post_init__()
    return p


def format_report(rep):
    lines = []
    for ph in rep["phases"]:
        for i, u in enumerate(ph["units"], 1):
            unit = u["unit"]
            lines.append(f"[{ph['phase']} unit {i}] producers={','.join(unit['producers'])} "
                         f"consumers={','.join(unit['consumers'])}" + (" (job-count fallback)" if u["fallback"] else ""))
            for row in u["subplans"]:
                mark = "*" if row["index"] == u["chosen"] else " "
                lines.append(f" {mark} p{row['index'] + 1}\t{row['cost']}\t{' ; '.join(row['signature'])}")
    s = rep["summary"]
    lines.append(f"jobs {s['jobs_before']} -> {s['jobs_after']}; estimated cost {s['cost_before']} -> {s['cost_after']}"
                 f" ({rep['cost_model']})")
    return "\n".join(lines)


def cmd_optimize(args):
    cfg = _load_json(args.config, "config file") if args.config else {}
    plan = parse_plan(args.plan)
    cluster = _cluster(args, plan)
    params = _rrs_params(args, cfg)
    phases = tuple(cfg.get("phases", (search.VERTICAL, search.HORIZONTAL)))
    if args.only_vertical:
        phases = (search.VERTICAL,)
    elif args.only_horizontal:
        phases = (search.HORIZONTAL,)
    model = args.cost_model or cfg.get("cost_model", "analytical")
    out, rep = search.optimize(plan, cluster, params, model, phases)
    write_plan(out, args.out)
    if args.report:
        Path(args.report).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    print(format_report(rep))
    return EXIT_OK


def cmd_verify(args):
    a = parse_plan(args.plan_a)
    b = parse_plan(args.plan_b)
    if set(a.base_datasets()) != set(b.base_datasets()):
        raise InputError(f"plans read different base datasets: {a.base_datasets()} vs {b.base_datasets()}")
    if args.gen:
        try:
            _, inputs = generate(args.gen, args.scale, args.seed if args.seed is not None else _default_seed(),
                                 profile=False)
        except UnknownWorkloadError as exc:
            raise InputError(exc.args[0])
    elif args.data:
        inputs = load_inputs(a, args.data)
    else:
        raise InputError("verify needs --data DIR or --gen WORKLOAD")
    oa, _ = run_plan(a, inputs=inputs)
    ob, _ = run_plan(b, inputs=inputs)
    shared = set(a.datasets) & set(b.datasets)
    res = compare_outputs({d: v for d, v in oa.items() if d in shared}, {d: v for d, v in ob.items() if d in shared})
    if res.equal:
        print(f"equal: {len([d for d in oa if d in shared])} datasets match")
        return EXIT_OK
    print("outputs differ:")
    print(res.report())
    return EXIT_DIFF


# ---------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="mrpack", description="Optimize annotated MapReduce workflows by packing jobs.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic workload (plan + data)")
    g.add_argument("workload", help=", ".join(WORKLOADS))
    g.add_argument("--scale", type=int, default=None, help="number of base records")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--no-profile", action="store_true", help="skip the profiling run")
    g.set_defaults(func=cmd_gen)

    p = sub.add_parser("profile", help="run a plan once and install profile annotations")
    p.add_argument("plan")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="where to write the profiled plan (default: overwrite)")
    p.set_defaults(func=cmd_profile)

    r = sub.add_parser("run", help="execute a plan over delimited data")
    r.add_argument("plan")
    r.add_argument("--data", required=True)
    r.add_argument("--out", help="directory for output datasets")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("explain", help="list every packing check per optimization unit")
    e.add_argument("plan")
    e.add_argument("--cluster")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_explain)

    o = sub.add_parser("optimize", help="search for a cheaper equivalent plan")
    o.add_argument("plan")
    o.add_argument("--cluster", help="cluster spec JSON (default: the plan's own, else 51 nodes)")
    o.add_argument("--config", help="optimizer options JSON")
    o.add_argument("--out", required=True)
    o.add_argument("--report")
    o.add_argument("--cost-model", choices=["analytical", "jobcount"])
    o.add_argument("--seed", type=int, default=None)
    o.add_argument("--budget", type=int, default=None, help="RRS evaluations per subplan")
    grp = o.add_mutually_exclusive_group()
    grp.add_argument("--only-vertical", action="store_true")
    grp.add_argument("--only-horizontal", action="store_true")
    o.set_defaults(func=cmd_optimize)

    v = sub.add_parser("verify", help="check that two plans produce identical outputs")
    v.add_argument("plan_a")
    v.add_argument("plan_b")
    v.add_argument("--data")
    v.add_argument("--gen", help="generate the inputs of this workload instead of reading --data")
    v.add_argument("--scale", type=int, default=None)
    v.add_argument("--seed", type=int, default=None)
    v.set_defaults(func=cmd_verify)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if getattr(args, "seed", None) is None and args.command == "gen":
            args.seed = _default_seed()
        return args.func(args)
    except (InputError, PlanParseError, PlanValidationError, TransformError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc.strerror or exc}: {exc.filename}", file=sys.stderr)
        return EXIT_INPUT
    except ExecutionError as exc:
        print(f"execution failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
