"""Two-phase greedy plan search.

The plan is walked in topological order one optimization unit at a time: a
set of concurrently runnable producer jobs plus their direct consumers. For
each unit every composition of the phase's transformations is enumerated,
each resulting subplan gets its configurations tuned by recursive random
search, and the cheapest subplan is kept before moving on. The vertical
group runs over the whole plan first, then the horizontal group.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import transforms as T
from .cost import COST_MODELS, estimate_plan, fallback_cost
from .ir import ClusterSpec, Configuration, _id_key, constraint_violations, job_depths

log = logging.getLogger(__name__)

VERTICAL, HORIZONTAL = "vertical", "horizontal"
SORT_BUFFERS = (64, 128, 256, 512)
MAX_SUBPLANS = 64


# ---------------------------------------------------------------------------
# optimization units


@dataclass
class OptimizationUnit:
    producers: list
    consumers: list
    phase: str

    def jobs(self):
        return list(self.producers) + [c for c in self.consumers if c not in self.producers]

    def members(self):
        """Original job ids covered by the unit."""
        return {x for j in self.jobs() for x in T.constituents(j)}

    def to_dict(self):
        return {"producers": list(self.producers), "consumers": list(self.consumers), "phase": self.phase}


def _covered(job_id, cursor):
    return all(x in cursor for x in T.constituents(job_id))


def next_optimization_unit(plan, cursor=frozenset(), phase=VERTICAL):
    """Next unit over the current plan, or ``None`` once every job is covered.

    ``cursor`` is the set of original job ids already used as producers.
    Returns ``(unit, new_cursor)``.
    """
    depth = job_depths(plan)
    open_jobs = [j for j in plan.jobs if not _covered(j, cursor)]
    if not open_jobs:
        return None
    d = min(depth[j] for j in open_jobs)
    producers = sorted((j for j in open_jobs if depth[j] == d), key=_id_key)
    consumers = sorted({c for p in producers for c in plan.downstream_jobs(p)}, key=_id_key)
    new_cursor = frozenset(cursor) | {x for p in producers for x in T.constituents(p)}
    return OptimizationUnit(producers, consumers, phase), new_cursor


# ---------------------------------------------------------------------------
# subplan enumeration


@dataclass
class Subplan:
    base: object
    applied: list
    result: object
    cost: float | None = None
    configs: dict = field(default_factory=dict)

    def signature(self):
        return [a.signature() for a in self.applied] or ["identity"]

    def is_identity(self):
        return not self.applied


def structural_key(plan):
    d = plan.to_dict()
    d.pop("annotations")
    return json.dumps(d, sort_keys=True)


def _candidates(plan, members, phase):
    def inside(j):
        return all(x in members for x in T.constituents(j))

    jobs = sorted((j for j in plan.jobs if inside(j)), key=_id_key)
    apps = []
    if phase == VERTICAL:
        for c in jobs:
            if all(inside(p) for p in plan.upstream_jobs(c)):
                chk = T.check_intra_vertical(plan, c)
                if chk:
                    apps += chk.applications
        for d in sorted(plan.datasets):
            prods, cons = plan.producers_of(d), plan.consumers_of(d)
            if len(prods) == 1 and cons and inside(prods[0]) and all(inside(c) for c in cons):
                chk = T.check_inter_vertical(plan, d)
                if chk:
                    apps += chk.applications
    else:
        groups = {}
        for j in jobs:
            groups.setdefault(tuple(plan.inputs_of(j)), []).append(j)
        sets = [tuple(g) for g in groups.values() if len(g) >= 2]
        for i, a in enumerate(jobs):
            for b in jobs[i + 1:]:
                if (a, b) not in sets:
                    sets.append((a, b))
        for s in sets:
            chk = T.check_horizontal(plan, list(s))
            if chk:
                apps += chk.applications
    for j in jobs:
        for spec, prune in T.partition_candidates(plan, j):
            chk = T.partition_application(plan, j, spec, [c for c in prune if inside(c)])
            if chk:
                apps += chk.applications
    return apps


def enumerate_subplans(plan, unit, limit=MAX_SUBPLANS):
    """Every distinct composition of the unit's transformations, identity
    first, the rest ordered by their applied-transform signatures."""
    members = unit.members()
    seen = {structural_key(plan)}
    out = [Subplan(plan, [], plan)]
    frontier = [(plan, [])]
    while frontier and len(out) < limit:
        nxt = []
        for cur, applied in frontier:
            for app in _candidates(cur, members, unit.phase):
                try:
                    res = T.apply(cur, app)
                except (T.TransformError, ValueError) as exc:
                    log.debug("skipping %s: %s", app.signature(), exc)
                    continue
                key = structural_key(res)
                if key in seen:
                    continue
                seen.add(key)
                sp = Subplan(plan, applied + [app], res)
                out.append(sp)
                nxt.append((res, sp.applied))
                if len(out) >= limit:
                    break
            if len(out) >= limit:
                break
        frontier = nxt
    rest = sorted(out[1:], key=lambda s: s.signature())
    return [out[0]] + rest


# ---------------------------------------------------------------------------
# recursive random search


@dataclass
class RrsParams:
    explore_samples: int = 20
    exploit_samples: int = 40
    shrink_ratio: float = 0.5
    restart_threshold: int = 5
    total_budget: int = 200
    seed: int = 0

    def __post_init__(self):
        if not (self.total_budget >= self.explore_samples >= 1):
            raise ValueError("need total_budget >= explore_samples >= 1")
        if not 0 < self.shrink_ratio < 1:
            raise ValueError("shrink_ratio must lie in (0, 1)")


@dataclass
class RrsResult:
    point: tuple
    cost: float
    evaluations: int
    trace: list  # best-so-far cost after each evaluation


def rrs_minimize(sizes, f, params, start=None):
    """Minimise ``f`` over the integer grid ``prod(range(n) for n in sizes)``.

    Explore with uniform samples, then exploit a box around the best point,
    shrinking it after ``restart_threshold`` consecutive misses and starting a
    fresh exploration once it is narrower than one grid step everywhere.
    """
    rng = np.random.default_rng(params.seed)
    sizes = [int(n) for n in sizes]
    cache = {}
    trace = []
    best = [None, math.inf]

    def ev(p):
        p = tuple(int(x) for x in p)
        if p not in cache:
            cache[p] = f(p)
            c = cache[p]
            if c < best[1]:
                best[0], best[1] = p, c
            trace.append(best[1])
        return cache[p]

    if not sizes:
        c = ev(())
        return RrsResult((), c, 1, trace)
    space = math.prod(sizes)
    budget = min(params.total_budget, space)
    if start is not None:
        ev(start)
    draws = 0
    max_draws = 50 * params.total_budget

    def uniform():
        return tuple(int(rng.integers(0, n)) for n in sizes)

    while len(cache) < budget and draws < max_draws:
        # explore
        center, c_cost = None, math.inf
        for _ in range(params.explore_samples):
            if len(cache) >= budget:
                break
            draws += 1
            p = uniform()
            c = ev(p)
            if c < c_cost:
                center, c_cost = p, c
        if best[0] is not None and best[1] <= c_cost:
            center, c_cost = best[0], best[1]
        if center is None:
            continue
        # exploit
        radius = 0.5
        misses = 0
        used = 0
        while len(cache) < budget and draws < max_draws and used < params.exploit_samples:
            half = [radius * n / 2 for n in sizes]
            if all(h < 1 for h in half):
                break
            draws += 1
            used += 1
            p = tuple(int(np.clip(round(c + rng.uniform(-h, h)), 0, n - 1)) for c, h, n in zip(center, half, sizes))
            c = ev(p)
            if c < c_cost:
                center, c_cost = p, c
                misses = 0
            else:
                misses += 1
                if misses >= params.restart_threshold:
                    radius *= params.shrink_ratio
                    misses = 0
    return RrsResult(best[0], best[1], len(cache), trace)


# ---------------------------------------------------------------------------
# configuration space


@dataclass
class Dimension:
    job: str
    name: str
    values: list


def config_space(plan, jobs, cluster):
    """Free configuration dimensions of ``jobs`` once constraints are pinned."""
    dims = []
    for jid in sorted(jobs, key=_id_key):
        job = plan.jobs[jid]
        cfg = job.config
        prog = job.program
        pinned_maps = bool(job.constraint("orderPreservingInput") or job.constraint("mapTasksEqualProducerReduceTasks"))
        if not pinned_maps:
            hi = max(cfg.num_map_tasks, min(T.CONFIG_BOUNDS["num_map_tasks"][1], 2 * cluster.map_slots))
            dims.append(Dimension(jid, "num_map_tasks", list(range(1, hi + 1))))
        if not prog.is_map_only():
            pinned_r = prog.partition.kind == "range" or any(
                "reduce_tasks" in c.payload for c in job.constraint("rangeSplitsFixed"))
            if not pinned_r:
                hi = max(cfg.num_reduce_tasks, min(T.CONFIG_BOUNDS["num_reduce_tasks"][1], 2 * cluster.reduce_slots))
                dims.append(Dimension(jid, "num_reduce_tasks", list(range(1, hi + 1))))
            dims.append(Dimension(jid, "sort_buffer_mb", sorted(set(SORT_BUFFERS) | {cfg.sort_buffer_mb})))
            dims.append(Dimension(jid, "map_output_compression", [False, True]))
            has_comb = prog.combine is not None or any(b.combine is not None for s in prog.map_pipeline
                                                        if s.kind == "bundle" for b in s.branches)
            if has_comb:
                dims.append(Dimension(jid, "combiner_enabled", [False, True]))
        dims.append(Dimension(jid, "output_compression", [False, True]))
    return dims


def _configured(plan, assignment):
    """Shallow copy of ``plan`` with new configurations; ``None`` if any
    constraint breaks."""
    new = dataclasses.replace(plan)
    new.jobs = dict(plan.jobs)
    new.datasets = {d: dataclasses.replace(ds) for d, ds in plan.datasets.items()}
    for jid, cfg in assignment.items():
        new.jobs[jid] = dataclasses.replace(plan.jobs[jid], config=cfg)
    for jid in assignment:
        r = new.jobs[jid].effective_reduce_tasks()
        for o in list(new.jobs.values()):
            for c in o.constraint("mapTasksEqualProducerReduceTasks"):
                if c.payload.get("producer") == jid and o.config.num_map_tasks != r:
                    new.jobs[o.id] = dataclasses.replace(o, config=dataclasses.replace(o.config, num_map_tasks=r))
    T.refresh_layouts(new)
    for j in new.jobs.values():
        if constraint_violations(new, j):
            return None
    return new


def _assignment(plan, dims, point):
    cfgs = {}
    for dim, idx in zip(dims, point):
        cfg = cfgs.setdefault(dim.job, copy.copy(plan.jobs[dim.job].config))
        setattr(cfg, dim.name, dim.values[idx])
    return cfgs


def rrs_optimize_config(plan, dims, params, cost_fn):
    """Tune the configurations named by ``dims``; returns ``(configs, cost,
    result)`` where ``configs`` holds only the jobs whose configuration
    changed."""
    if not dims:
        c = cost_fn(plan)
        return {}, c, RrsResult((), c, 1, [c])
    start = tuple(d.values.index(getattr(plan.jobs[d.job].config, d.name)) for d in dims)

    def f(point):
        cand = _configured(plan, _assignment(plan, dims, point))
        return math.inf if cand is None else cost_fn(cand)

    res = rrs_minimize([len(d.values) for d in dims], f, params, start=start)
    cfgs = _assignment(plan, dims, res.point)
    changed = {j: c for j, c in cfgs.items() if c != plan.jobs[j].config}
    return changed, res.cost, res


# ---------------------------------------------------------------------------
# greedy optimizer


def make_cost_fn(model, cluster):
    if model == "analytical":
        return lambda p: estimate_plan(p, cluster).total_seconds
    if model in COST_MODELS:
        return COST_MODELS[model]
    raise ValueError(f"unknown cost model {model!r}")


def _config_apps(plan, changed):
    apps = []
    for jid in sorted(changed, key=_id_key):
        apps.append(T.TransformApplication("configuration", [jid], {"config": changed[jid].to_dict()}))
    return apps


def optimize_unit(plan, unit, params, cost_fn, cluster, tune=True):
    """Pick the cheapest subplan of one unit. Returns ``(plan, report,
    applied)``."""
    subplans = enumerate_subplans(plan, unit)
    fallback = False
    try:
        for sp in subplans:
            cost_fn(sp.result)
    except T.ProfileMissingError as exc:
        log.info("unit %s: %s; falling back to job count", unit.producers, exc)
        cost_fn = COST_MODELS["jobcount"]
        fallback = True
    rows = []
    best = None
    for idx, sp in enumerate(subplans):
        members = unit.members()
        jobs = [j for j in sp.result.jobs if all(x in members for x in T.constituents(j))]
        dims = config_space(sp.result, jobs, cluster) if tune and not fallback else []
        rp = dataclasses.replace(params, seed=(params.seed * 1000003 + idx) % 2 ** 63)
        changed, c, _ = rrs_optimize_config(sp.result, dims, rp, cost_fn)
        sp.cost, sp.configs = c, changed
        key = (c, len(sp.result.jobs), 0 if sp.is_identity() else 1, idx)
        if best is None or key < best[0]:
            best = (key, sp)
        rows.append({"index": idx, "signature": sp.signature(), "cost": _num(c), "jobs": len(sp.result.jobs),
                     "config": {j: cfg.to_dict() for j, cfg in sorted(changed.items())}})
    chosen = best[1]
    applied = list(chosen.applied) + _config_apps(chosen.result, chosen.configs)
    result = T.replay(plan, applied)
    report = {
        "unit": unit.to_dict(),
        "fallback": fallback,
        "subplans": rows,
        "chosen": subplans.index(chosen),
        "chosen_signature": chosen.signature(),
        "checks": explain_unit(plan, unit),
    }
    return result, report, applied


def _num(x):
    return None if x is None or math.isinf(x) else round(float(x), 6)


def optimize(plan, cluster=None, params=None, cost_model="analytical", phases=(VERTICAL, HORIZONTAL), tune=True):
    """Two-phase greedy optimization. Returns ``(plan, report)``."""
    cluster = cluster or plan.cluster or ClusterSpec()
    params = params or RrsParams()
    cost_fn = make_cost_fn(cost_model, cluster)
    before = _plan_cost(plan, cost_fn)
    report = {"cost_model": cost_model, "phases": [], "applied": []}
    cur = plan
    for phase in phases:
        units = []
        cursor = frozenset()
        while True:
            nxt = next_optimization_unit(cur, cursor, phase)
            if nxt is None:
                break
            unit, cursor = nxt
            cur, urep, applied = optimize_unit(cur, unit, params, cost_fn, cluster, tune)
            units.append(urep)
            report["applied"] += [a.to_dict() for a in applied]
        report["phases"].append({"phase": phase, "units": units})
    after = _plan_cost(cur, cost_fn)
    report["summary"] = {
        "jobs_before": len(plan.jobs),
        "jobs_after": len(cur.jobs),
        "cost_before": _num(before[0]),
        "cost_after": _num(after[0]),
        "fallback": before[1] or after[1],
        "final_jobs": sorted(cur.jobs, key=_id_key),
    }
    return cur, report


def _plan_cost(plan, cost_fn):
    try:
        return cost_fn(plan), False
    except T.ProfileMissingError:
        return fallback_cost(plan).total_seconds, True


def replay_report(plan, report):
    apps = [T.TransformApplication.from_obj(a) for a in report["applied"]]
    return T.replay(plan, apps)


# ---------------------------------------------------------------------------
# explanation


def explain_unit(plan, unit):
    """Tri-state verdict of every packing check touching the unit."""
    out = []
    members = unit.members()

    def inside(j):
        return all(x in members for x in T.constituents(j))

    jobs = sorted((j for j in plan.jobs if inside(j)), key=_id_key)
    for c in jobs:
        if plan.jobs[c].program.is_map_only():
            continue
        chk = T.check_intra_vertical(plan, c)
        out.append({"transform": "intraVertical", "target": [c], "status": chk.status, "reason": chk.reason})
    for d in sorted(plan.datasets):
        prods = plan.producers_of(d)
        if len(prods) == 1 and inside(prods[0]) and plan.consumers_of(d):
            chk = T.check_inter_vertical(plan, d)
            out.append({"transform": "interVertical", "target": [d], "status": chk.status, "reason": chk.reason,
                        "variants": [a.signature() for a in chk.applications]})
    for i, a in enumerate(jobs):
        for b in jobs[i + 1:]:
            chk = T.check_horizontal(plan, [a, b])
            out.append({"transform": "horizontal", "target": [a, b], "status": chk.status, "reason": chk.reason})
    return out


def explain(plan):
    """Walk the units of the unmodified plan and report every check."""
    units = []
    cursor = frozenset()
    while True:
        nxt = next_optimization_unit(plan, cursor, VERTICAL)
        if nxt is None:
            break
        unit, cursor = nxt
        units.append({"unit": unit.to_dict(), "checks": explain_unit(plan, unit)})
    return {"units": units, "plan_fingerprint": plan.fingerprint(), "jobs": len(plan.jobs),
            "edges": [list(e) for e in plan.edges]}


__all__ = [
    "OptimizationUnit", "Subplan", "RrsParams", "Configuration", "next_optimization_unit", "enumerate_subplans",
    "rrs_minimize", "rrs_optimize_config", "config_space", "optimize_unit", "optimize", "explain",
]
