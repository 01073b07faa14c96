"""Plan rewrites: vertical packing (intra- and inter-job), horizontal packing,
partition-function changes, partition pruning and configuration changes.

Each family is a pair of functions. ``check_*`` is pure and returns a
:class:`Check` carrying a tri-state verdict and, when applicable, ready-made
:class:`TransformApplication` objects. ``apply_*`` takes an application
produced against the same plan and returns a new, validated plan.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

from .ir import (
    TAG_FIELD,
    Branch,
    ConfigConstraint,
    Configuration,
    Job,
    JobAnnotations,
    Program,
    Layout,
    PartitionSpec,
    PhaseProfile,
    PlanValidationError,
    ProfileAnnotation,
    SchemaAnnotation,
    Stage,
    _id_key,
    branch_partition,
    canon,
    check_partition_spec,
    classify_subgraph,
    clone,
    constraint_violations,
    fields_flow_unchanged,
    tail_writes,
    validate,
    write_location,
)

APPLICABLE, NOT_APPLICABLE, UNKNOWN = "applicable", "not-applicable", "unknown"
KINDS = ("intraVertical", "interVertical", "horizontal", "partitionFn", "configuration")

# bounds of the configuration space; the search samples inside them
CONFIG_BOUNDS = {
    "num_map_tasks": (1, 2000),
    "num_reduce_tasks": (1, 2000),
    "sort_buffer_mb": (16, 2048),
}

PARTITION_PINS = ("partitionKeyFixed", "sortKeyFixed", "rangeSplitsFixed")


class TransformError(ValueError):
    pass


class StaleApplicationError(TransformError):
    pass


class ConstraintViolation(TransformError):
    pass


class ProfileMissingError(TransformError):
    """Raised when costing or adjustment needs a profile annotation that is
    absent; callers should fall back to the job-count cost model."""


class SkewedKeyError(TransformError):
    """No useful range split exists (the key domain has a single value)."""


@dataclass
class TransformApplication:
    kind: str
    targets: list
    params: dict = field(default_factory=dict)
    fingerprint: str = ""

    def signature(self):
        extra = ""
        if self.kind == "interVertical":
            extra = f";{self.params['variant']}"
            if self.params["variant"] == "pack":
                extra += f"={self.params['consumers'][0]}"
        elif self.kind == "partitionFn":
            spec = self.params["spec"]
            extra = f";{spec['kind']}({','.join(spec['partition_fields'])})"
            if self.params.get("prune"):
                extra += "+prune"
        elif self.kind == "intraVertical":
            extra = f";{self.params['mode']}"
        return f"{self.kind}({','.join(self.targets)}{extra})"

    def to_dict(self):
        return {"kind": self.kind, "targets": list(self.targets), "params": copy.deepcopy(self.params),
                "fingerprint": self.fingerprint}

    @classmethod
    def from_obj(cls, obj):
        return cls(obj["kind"], list(obj["targets"]), dict(obj.get("params") or {}), obj.get("fingerprint", ""))


@dataclass
class Check:
    status: str
    reason: str = ""
    applications: list = field(default_factory=list)

    def __bool__(self):
        return self.status == APPLICABLE

    @property
    def application(self):
        return self.applications[0] if self.applications else None


def _na(reason):
    return Check(NOT_APPLICABLE, reason)


def _unknown(reason):
    return Check(UNKNOWN, reason)


def _ok(plan, kind, targets, params_list):
    fp = plan.fingerprint()
    return Check(APPLICABLE, "", [TransformApplication(kind, list(targets), p, fp) for p in params_list])


def _fresh(plan, app):
    if app.fingerprint and app.fingerprint != plan.fingerprint():
        raise StaleApplicationError(f"{app.signature()} was checked against a different plan")
    for j in app.targets:
        if j not in plan.jobs:
            raise StaleApplicationError(f"{app.signature()}: job {j} no longer exists")


def constituents(job_id):
    """Original job ids packed into ``job_id``."""
    return [p for part in job_id.split("|") for p in part.split("+")]


# ---------------------------------------------------------------------------
# profile adjustment


def adjust_profile(a, b, kind="vertical"):
    """Combine two phase profiles.

    Vertical: ``b`` consumes the output of ``a``; selectivities multiply and
    CPU costs add (``b``'s cost rescaled when its measured input differs from
    ``a``'s output). Horizontal: flows and costs add.
    """
    if a is None or b is None:
        raise ProfileMissingError("profile annotation missing; use the job-count cost model")
    if kind == "horizontal":
        return PhaseProfile(a.records_in + b.records_in, a.records_out + b.records_out,
                            a.bytes_in + b.bytes_in, a.bytes_out + b.bytes_out, a.cpu_seconds + b.cpu_seconds)
    sel = a.selectivity * b.selectivity
    out = a.records_in * sel
    scale = a.records_out / b.records_in if b.records_in and a.records_out != b.records_in else 1.0
    return PhaseProfile(a.records_in, out, a.bytes_in, out * b.out_record_bytes, a.cpu_seconds + b.cpu_seconds * scale)


def _chain(phases):
    phases = [p for p in phases if p is not None]
    acc = phases[0]
    for p in phases[1:]:
        acc = adjust_profile(acc, p)
    return acc


def _job_selectivity(prof, combiner):
    s = prof.map.selectivity
    if combiner and prof.combine is not None:
        s *= prof.combine.selectivity
    if prof.reduce is not None:
        s *= prof.reduce.selectivity
    return s


def _out_bytes(prof):
    last = prof.reduce or prof.map
    return last.out_record_bytes


def _profiles(plan, *jobs):
    profs = [plan.jobs[j].annotations.profile for j in jobs]
    return None if any(p is None for p in profs) else profs


# ---------------------------------------------------------------------------
# layouts


def refresh_layouts(plan):
    """Recompute the layout of every job-produced dataset from its producer's
    partition spec and configuration."""
    for job in plan.jobs.values():
        prog = job.program
        sch = job.annotations.schema
        for d in plan.outputs_of(job.id):
            side, tag = write_location(prog, d)
            old = plan.datasets[d].layout
            if side == "map":
                lay = Layout("none", [], [], job.config.output_compression, job.config.num_map_tasks, None)
            else:
                spec = branch_partition(prog, tag)
                n = spec.num_partitions(job.config.num_reduce_tasks)
                lay = Layout("hash", [], [], job.config.output_compression, n, None)
                if sch is not None and tag is None:
                    flow = sch.reduce_flow_fields() & sch.output_fields()
                    pf = list(spec.partition_fields or sch.K2)
                    sf = spec.effective_sort_fields() or list(sch.K2)
                    if spec.kind == "range" and pf[0] in flow:
                        lay.partition_kind = "range"
                        lay.partition_fields = pf[:1]
                        lay.range_bounds = list(spec.range_splits)
                    elif pf and set(pf) <= flow:
                        lay.partition_fields = pf
                    prefix = []
                    for f in sf:
                        if f not in flow:
                            break
                        prefix.append(f)
                    lay.sort_fields = prefix if lay.partition_fields and prefix[: len(lay.partition_fields)] == lay.partition_fields else []
            if lay != old:
                plan.datasets[d].layout = lay
    return plan


def _finish(plan):
    refresh_layouts(plan)
    validate(plan)
    return plan


def _rename_refs(plan, mapping):
    for job in plan.jobs.values():
        for c in job.constraints:
            for key in ("producer", "consumer"):
                if c.payload.get(key) in mapping:
                    c.payload[key] = mapping[c.payload[key]]


def _dedupe_constraints(cons):
    out, seen = [], set()
    for c in cons:
        key = repr(c.to_dict())
        if key not in seen:
            seen.add(key)
            out.append(c)
    return out


def _sync_map_tasks(plan, producer):
    """Keep consumers tied by mapTasksEqualProducerReduceTasks in lockstep."""
    r = plan.jobs[producer].effective_reduce_tasks()
    for job in plan.jobs.values():
        for c in job.constraint("mapTasksEqualProducerReduceTasks"):
            if c.payload.get("producer") == producer:
                job.config.num_map_tasks = r


# ---------------------------------------------------------------------------
# intra-job vertical packing


def check_intra_vertical(plan, consumer):
    job = plan.jobs.get(consumer)
    if job is None:
        return _na(f"unknown job {consumer}")
    prog = job.program
    if prog.is_map_only():
        return _na("consumer has no reduce function")
    if prog.is_bundled():
        return _na("consumer is a horizontally packed job")
    if job.input_selection:
        return _na("consumer reads a pruned subset of its input")
    if any(job.constraint(k) for k in PARTITION_PINS):
        return _na("consumer's partitioning is pinned by a packed downstream job")
    ins = plan.inputs_of(consumer)
    for d in ins:
        kind = classify_subgraph(plan, d)
        if kind == "hybrid":
            return _na(f"hybrid subgraph at {d}")
        if len(plan.consumers_of(d)) > 1:
            return _na(f"input {d} has other consumers")
    sch = job.annotations.schema
    if sch is None:
        return _unknown("missing schema annotation on consumer")
    if not sch.K2:
        return _unknown("consumer K2 not annotated")
    produced = [d for d in ins if plan.producers_of(d)]
    if not produced:
        return _check_none_to_one(plan, job, ins)
    if len(produced) != len(ins):
        return _na("consumer mixes base and produced inputs")
    producers = [plan.producer_of(d) for d in ins]
    if len(set(producers)) != len(producers):
        return _na("one producer feeds several consumer inputs")
    unknown = None
    for p in producers:
        pj = plan.jobs[p]
        if pj.program.is_map_only():
            return _na(f"producer {p} is Map-only")
        if pj.program.is_bundled():
            return _na(f"producer {p} emits tagged keys")
        if pj.annotations.schema is None:
            unknown = f"missing schema annotation on producer {p}"
            continue
        flow = fields_flow_unchanged(plan, p, "K2", consumer, "K2", sch.K2)
        if flow is None:
            unknown = "missing schema annotation on the path"
        elif not flow:
            return _na(f"consumer K2 {sch.K2} does not flow unchanged from {p}'s reduce input")
    if unknown:
        return _unknown(unknown)
    inter = list(sch.K2)
    specs = []
    for p in producers:
        pk2 = plan.jobs[p].annotations.schema.K2
        rest_p = [f for f in pk2 if f not in inter]
        rest_c = [f for f in sch.K2 if f not in inter and f not in rest_p]
        specs.append(inter + rest_p + rest_c)
    mode = "many-to-one" if len(producers) > 1 else "one-to-one"
    if mode == "many-to-one":
        sort_fields = inter
    else:
        sort_fields = specs[0]
    reduce_tasks = max(plan.jobs[p].effective_reduce_tasks() for p in producers)
    new_specs = {}
    for p in producers:
        pj = plan.jobs[p]
        cur = pj.program.partition
        kind, splits = "hash", None
        if cur.kind == "range":
            if cur.partition_fields != inter or mode == "many-to-one":
                return _na(f"producer {p} is range-partitioned on other fields")
            kind, splits = "range", list(cur.range_splits)
        spec = PartitionSpec(kind, list(inter), list(sort_fields), splits)
        trial = copy.deepcopy(pj)
        trial.program.partition = spec
        if kind == "hash":
            trial.config.num_reduce_tasks = reduce_tasks
        bad = constraint_violations(plan, trial)
        if bad:
            return _na(f"producer {p} constraints conflict: {'; '.join(bad)}")
        new_specs[p] = spec.to_dict()
    params = {"mode": mode, "producers": producers, "specs": new_specs, "reduce_tasks": reduce_tasks,
              "merge_fields": inter}
    return _ok(plan, "intraVertical", [consumer], [params])


def _check_none_to_one(plan, job, ins):
    if len(ins) != 1:
        return _na("none-to-one packing needs a single input dataset")
    sch = job.annotations.schema
    lay = plan.datasets[ins[0]].layout
    k2 = set(sch.K2)
    if lay.partition_kind not in ("hash", "range") or not lay.partition_fields:
        return _na(f"input {ins[0]} layout is not partitioned on known fields")
    if not set(lay.partition_fields) <= k2:
        return _na(f"input partitioned on {lay.partition_fields}, not a subset of K2 {sch.K2}")
    if len(lay.sort_fields) < len(k2) or set(lay.sort_fields[: len(k2)]) != k2:
        return _na(f"input sorted on {lay.sort_fields}, which does not lead with K2 {sch.K2}")
    if not k2 <= sch.map_flow_fields() or not k2 <= sch.input_fields():
        return _na("K2 fields do not flow unchanged through the map function")
    params = {"mode": "none-to-one", "producers": [], "specs": {}, "reduce_tasks": 0,
              "merge_fields": list(lay.sort_fields[: len(k2)]), "map_tasks": lay.partition_count}
    return _ok(plan, "intraVertical", [job.id], [params])


def apply_intra_vertical(plan, app):
    _fresh(plan, app)
    new = clone(plan)
    cid = app.targets[0]
    c = new.jobs[cid]
    p = app.params
    for pid in p["producers"]:
        pj = new.jobs[pid]
        spec = PartitionSpec.from_obj(p["specs"][pid])
        pj.program.partition = spec
        if spec.kind == "hash":
            pj.config.num_reduce_tasks = p["reduce_tasks"]
        pj.constraints.append(ConfigConstraint("partitionKeyFixed", {"fields": list(spec.partition_fields), "consumer": cid}))
        pj.constraints.append(ConfigConstraint("sortKeyFixed", {"fields": spec.effective_sort_fields(), "consumer": cid}))
        if p["mode"] == "many-to-one":
            pj.constraints.append(ConfigConstraint("rangeSplitsFixed", {
                "kind": spec.kind, "splits": spec.range_splits, "reduce_tasks": p["reduce_tasks"], "consumer": cid}))
        pj.constraints = _dedupe_constraints(pj.constraints)
    prog = c.program
    stages = list(prog.map_pipeline)
    if c.config.combiner_enabled and prog.combine is not None:
        stages.append(Stage("combine", prog.combine))
    stages.extend(prog.reduce_pipeline)
    old_prof = c.annotations.profile
    combiner = c.config.combiner_enabled
    prog.map_pipeline = stages
    prog.reduce_pipeline = []
    prog.combine = None
    prog.partition = PartitionSpec()
    maps = p["map_tasks"] if p["mode"] == "none-to-one" else new.jobs[p["producers"][0]].effective_reduce_tasks()
    c.config = Configuration(maps, 0, c.config.sort_buffer_mb, False, c.config.output_compression, False)
    c.constraints.append(ConfigConstraint("orderPreservingInput", {"merge_fields": list(p["merge_fields"])}))
    for pid in p["producers"]:
        c.constraints.append(ConfigConstraint("mapTasksEqualProducerReduceTasks", {"producer": pid}))
    c.constraints = _dedupe_constraints(c.constraints)
    if old_prof is not None:
        phases = [old_prof.map, old_prof.combine if combiner else None, old_prof.reduce]
        c.annotations.profile = ProfileAnnotation(
            map=_chain(phases), histograms=old_prof.histograms, distinct_keys=old_prof.distinct_keys,
            io_costs=old_prof.io_costs, side_outputs=old_prof.side_outputs,
            provenance=[[cid, "map"], [cid, "reduce"]] + ([[cid, "combine"]] if combiner and old_prof.combine else []))
    return _finish(new)


# ---------------------------------------------------------------------------
# inter-job vertical packing


def check_inter_vertical(plan, dataset):
    if dataset not in plan.datasets:
        return _na(f"unknown dataset {dataset}")
    producers = plan.producers_of(dataset)
    consumers = plan.consumers_of(dataset)
    if len(producers) != 1 or not consumers:
        return _na("dataset needs exactly one producer and at least one consumer")
    pid = producers[0]
    pj = plan.jobs[pid]
    if pj.program.is_bundled():
        return _na(f"producer {pid} is a horizontally packed job")
    tail = tail_writes(pj.program.reduce_pipeline or pj.program.map_pipeline)
    if dataset not in tail:
        return _na(f"{dataset} is not written at the end of {pid}'s pipeline")
    for c in consumers:
        cj = plan.jobs[c]
        if plan.inputs_of(c) != [dataset]:
            return _na(f"consumer {c} reads other datasets too")
        if cj.program.is_bundled():
            return _na(f"consumer {c} is a horizontally packed job")
    missing = [j for j in [pid] + list(consumers) if plan.jobs[j].annotations.schema is None]
    if missing:
        return _unknown(f"missing schema annotation on {', '.join(missing)}")
    if len(consumers) == 1:
        cid = consumers[0]
        cj = plan.jobs[cid]
        if pj.program.is_map_only():
            if cj.constraint("orderPreservingInput"):
                return _na(f"consumer {cid} depends on the producer's reduce-side order")
            mode = "map"
        elif cj.program.is_map_only():
            mode = "reduce"
        else:
            return _na("neither job is Map-only")
        return _ok(plan, "interVertical", [pid, cid],
                   [{"dataset": dataset, "producer": pid, "consumers": [cid], "variant": "one-to-one", "side": mode}])
    if not pj.program.is_map_only():
        return _na("one-to-many packing needs a Map-only producer")
    for c in consumers:
        if plan.jobs[c].constraint("orderPreservingInput"):
            return _na(f"consumer {c} depends on the producer's reduce-side order")
    params = []
    if plan.outputs_of(pid) == [dataset]:
        params.append({"dataset": dataset, "producer": pid, "consumers": list(consumers), "variant": "replicate",
                       "side": "map"})
    for c in consumers:
        params.append({"dataset": dataset, "producer": pid, "consumers": [c], "variant": "pack", "side": "map"})
    return _ok(plan, "interVertical", [pid] + list(consumers), params)


def _without_write(stages, dataset):
    return [s for s in stages if not (s.kind == "write" and s.dataset == dataset)]


def _compose_schema(ps, cs, side):
    if ps is None or cs is None:
        return None
    c_through = cs.map_flow_fields() & cs.reduce_flow_fields()
    out3 = (cs.K3 if cs.K3 is not None else cs.K2, cs.V3 if cs.V3 is not None else cs.V2)
    if side == "reduce":
        return SchemaAnnotation(list(ps.K1), list(ps.V1), list(ps.K2), list(ps.V2), list(out3[0]), list(out3[1]),
                                map_flow=sorted(ps.map_flow_fields()),
                                reduce_flow=sorted(ps.reduce_flow_fields() & c_through))
    p_through = ps.map_flow_fields() & ps.reduce_flow_fields()
    return SchemaAnnotation(list(ps.K1), list(ps.V1), list(cs.K2), list(cs.V2),
                            None if cs.K3 is None else list(cs.K3), None if cs.V3 is None else list(cs.V3),
                            map_flow=sorted(p_through & cs.map_flow_fields()),
                            reduce_flow=sorted(cs.reduce_flow_fields()))


def _compose_profile(plan, pj, cj, side, dataset, keep):
    pp, cp = pj.annotations.profile, cj.annotations.profile
    if pp is None or cp is None:
        return None
    prov = [[pj.id, "map"], [cj.id, "map"]]
    if side == "reduce":
        r = _job_selectivity(pp, pj.config.combiner_enabled)
        side_out = dict(pp.side_outputs)
        for d in tail_writes(pj.program.reduce_pipeline):
            if d != dataset or keep:
                side_out[d] = [r, _out_bytes(pp)]
        for d, (ratio, b) in cp.side_outputs.items():
            side_out[d] = [ratio * r, b]
        return ProfileAnnotation(
            map=pp.map, combine=pp.combine, reduce=adjust_profile(pp.reduce, cp.map),
            histograms=pp.histograms, distinct_keys=pp.distinct_keys, io_costs=pp.io_costs,
            side_outputs=side_out, provenance=[[pj.id, "reduce"], [cj.id, "map"]])
    s = pp.map.selectivity
    side_out = dict(pp.side_outputs)
    for d in tail_writes(pj.program.map_pipeline):
        if d != dataset or keep:
            side_out[d] = [s, pp.map.out_record_bytes]
    for d, (ratio, b) in cp.side_outputs.items():
        side_out[d] = [ratio * s, b]
    io = dict(cp.io_costs)
    if "read" in pp.io_costs:
        io["read"] = pp.io_costs["read"]
    return ProfileAnnotation(
        map=adjust_profile(pp.map, cp.map), combine=cp.combine, reduce=cp.reduce,
        histograms={k: h.scaled(1.0) for k, h in cp.histograms.items()}, distinct_keys=cp.distinct_keys,
        io_costs=io, side_outputs=side_out, provenance=prov)


def _merge_job(plan, pj, cj, side, dataset, keep_write):
    mid = f"{pj.id}+{cj.id}"
    pprog, cprog = pj.program, cj.program
    if side == "reduce":
        red = list(pprog.reduce_pipeline) if keep_write else _without_write(pprog.reduce_pipeline, dataset)
        prog = Program(copy.deepcopy(pprog.map_pipeline), copy.deepcopy(red + cprog.map_pipeline),
                       copy.deepcopy(pprog.combine), copy.deepcopy(pprog.partition))
        cfg = copy.deepcopy(pj.config)
        cfg.output_compression = pj.config.output_compression or cj.config.output_compression
        cons = [c for c in pj.constraints]
        cons += [c for c in cj.constraints if c.kind not in ("mapTasksEqualProducerReduceTasks", "orderPreservingInput")]
        selection = copy.deepcopy(pj.input_selection)
    else:
        mp = list(pprog.map_pipeline) if keep_write else _without_write(pprog.map_pipeline, dataset)
        prog = Program(copy.deepcopy(mp + cprog.map_pipeline), copy.deepcopy(cprog.reduce_pipeline),
                       copy.deepcopy(cprog.combine), copy.deepcopy(cprog.partition))
        cfg = copy.deepcopy(cj.config)
        cfg.num_map_tasks = pj.config.num_map_tasks
        cfg.output_compression = pj.config.output_compression or cj.config.output_compression
        cons = list(pj.constraints) + list(cj.constraints)
        selection = copy.deepcopy(pj.input_selection)
    ann = JobAnnotations(
        schema=_compose_schema(pj.annotations.schema, cj.annotations.schema, side),
        filter=copy.deepcopy(pj.annotations.filter),
        profile=_compose_profile(plan, pj, cj, side, dataset, keep_write),
    )
    return Job(mid, prog, cfg, ann, copy.deepcopy(_dedupe_constraints(cons)), selection)


def apply_inter_vertical(plan, app):
    _fresh(plan, app)
    p = app.params
    d, pid, side, variant = p["dataset"], p["producer"], p["side"], p["variant"]
    new = clone(plan)
    pj = new.jobs[pid]
    consumers = p["consumers"]
    keep = variant == "pack"
    merged = []
    for cid in consumers:
        cj = new.jobs[cid]
        mj = _merge_job(new, pj, cj, side, d, keep)
        merged.append((cid, mj))
    mapping = {}
    new.edges = [e for e in new.edges if e[0] not in {pid, *consumers}]
    p_in = plan.inputs_of(pid)
    p_out = plan.outputs_of(pid)
    for cid, mj in merged:
        del new.jobs[cid]
        new.jobs[mj.id] = mj
        mapping[cid] = mj.id
        outs = set(plan.outputs_of(cid))
        if variant == "replicate":
            pass
        else:
            outs |= {x for x in p_out if x != d or keep}
        new.edges += [(mj.id, x, "input") for x in p_in]
        new.edges += [(mj.id, x, "output") for x in sorted(outs)]
    del new.jobs[pid]
    mapping[pid] = merged[0][1].id
    if not keep:
        del new.datasets[d]
    _rename_refs(new, mapping)
    return _finish(new)


# ---------------------------------------------------------------------------
# horizontal packing


def check_horizontal(plan, jobs):
    jobs = sorted(set(jobs), key=_id_key)
    if len(jobs) < 2:
        return _na("horizontal packing needs at least two jobs")
    for j in jobs:
        if j not in plan.jobs:
            return _na(f"unknown job {j}")
    for a in jobs:
        for b in jobs:
            if a != b and plan.reachable(a, b):
                return _na(f"dependency path {a} -> {b}")
    js = [plan.jobs[j] for j in jobs]
    if any(j.program.is_bundled() for j in js):
        return _na("a job is already horizontally packed")
    if len({j.program.is_map_only() for j in js}) != 1:
        return _na("cannot pack Map-only jobs with jobs that reduce")
    if any(j.program.partition.kind == "range" for j in js):
        return _na("range-partitioned jobs fix their own partition counts")
    missing = [j.id for j in js if j.annotations.schema is None]
    if missing:
        return _unknown(f"missing schema annotation on {', '.join(missing)}")
    ins = [tuple(plan.inputs_of(j)) for j in jobs]
    if len(set(ins)) == 1:
        mode = "shared"
    elif all(len(i) == 1 for i in ins) and len({i[0] for i in ins}) == len(ins):
        mode = "concurrent"
    else:
        return _na("jobs neither share their inputs nor read disjoint single datasets")
    order = [sorted(repr(c.to_dict()) for c in j.constraints
                    if c.kind in ("orderPreservingInput", "mapTasksEqualProducerReduceTasks")) for j in js]
    if any(o != order[0] for o in order):
        return _na("jobs disagree on order-preserving input splits")
    if order[0] and mode != "shared":
        return _na("order-preserving jobs can only share the same input")
    sels = [j.input_selection for j in js]
    if mode == "shared" and any(s != sels[0] for s in sels):
        return _na("jobs read different partition subsets of the shared input")
    if not js[0].program.is_map_only():
        r = max(j.config.num_reduce_tasks for j in js)
        for j in js:
            if _reduce_pinned(plan, j) and j.config.num_reduce_tasks != r:
                return _na(f"{j.id} has pinned reduce tasks {j.config.num_reduce_tasks} != {r}")
    return _ok(plan, "horizontal", jobs, [{"jobs": jobs, "mode": mode}])


def _reduce_pinned(plan, job):
    # consumers tied by mapTasksEqualProducerReduceTasks follow along, so only
    # fixed range splits really pin the count
    return any("reduce_tasks" in c.payload for c in job.constraint("rangeSplitsFixed"))


def _horizontal_schema(js):
    schs = [j.annotations.schema for j in js]
    if any(s is None for s in schs):
        return None

    def union(name):
        out = []
        for s in schs:
            for f in (s.slot(name) or []):
                if f not in out:
                    out.append(f)
        return out

    mf = set.intersection(*[s.map_flow_fields() for s in schs])
    rf = set.intersection(*[s.reduce_flow_fields() for s in schs])
    return SchemaAnnotation(union("K1"), union("V1"), [TAG_FIELD] + union("K2"), union("V2"),
                            None if all(s.K3 is None for s in schs) else union("K3"),
                            None if all(s.V3 is None for s in schs) else union("V3"),
                            map_flow=sorted(mf), reduce_flow=sorted(rf))


def _horizontal_profile(js, mode):
    profs = [j.annotations.profile for j in js]
    if any(p is None for p in profs):
        return None

    def total(attr, shared_input=False):
        phases = [getattr(p, attr) for p in profs]
        if all(x is None for x in phases):
            return None
        acc = None
        for x in phases:
            if x is None:
                continue
            acc = x if acc is None else adjust_profile(acc, x, "horizontal")
        if shared_input:
            first = phases[0]
            acc = PhaseProfile(first.records_in, acc.records_out, first.bytes_in, acc.bytes_out, acc.cpu_seconds)
        return acc

    branches = {}
    for i, (j, p) in enumerate(zip(js, profs)):
        b = copy.deepcopy(p)
        b.branches = {}
        b.provenance = [[j.id, "map"]]
        branches[i] = b
    io = {}
    for p in profs:
        for k, v in p.io_costs.items():
            io[k] = max(io.get(k, 0.0), v)
    side = {}
    for p in profs:
        side.update(p.side_outputs)
    return ProfileAnnotation(map=total("map", mode == "shared"), combine=total("combine"), reduce=total("reduce"),
                             io_costs=io, side_outputs=side, branches=branches,
                             provenance=[[j.id, "map"] for j in js])


def apply_horizontal(plan, app):
    _fresh(plan, app)
    jobs, mode = app.params["jobs"], app.params["mode"]
    new = clone(plan)
    js = [new.jobs[j] for j in jobs]
    mid = "|".join(jobs)
    map_only = js[0].program.is_map_only()
    mbranches, rbranches = [], []
    cons = []
    for tag, j in enumerate(js):
        src = None if mode == "shared" else new.inputs_of(j.id)[0]
        comb = j.program.combine if j.config.combiner_enabled else None
        mbranches.append(Branch(tag, j.program.map_pipeline, src, None if map_only else j.program.partition, comb))
        if not map_only:
            rbranches.append(Branch(tag, j.program.reduce_pipeline))
        for c in j.constraints:
            c = copy.deepcopy(c)
            if c.kind in PARTITION_PINS:
                c.payload["tag"] = tag
            cons.append(c)
    prog = Program([Stage("bundle", branches=mbranches)],
                   [] if map_only else [Stage("bundle", branches=rbranches)])
    cfg = Configuration(
        num_map_tasks=max(j.config.num_map_tasks for j in js),
        num_reduce_tasks=0 if map_only else max(j.config.num_reduce_tasks for j in js),
        sort_buffer_mb=max(j.config.sort_buffer_mb for j in js),
        map_output_compression=any(j.config.map_output_compression for j in js),
        output_compression=any(j.config.output_compression for j in js),
        combiner_enabled=any(j.config.combiner_enabled for j in js),
    )
    selection = {}
    for j in js:
        selection.update(copy.deepcopy(j.input_selection))
    ann = JobAnnotations(schema=_horizontal_schema(js), filter=None, profile=_horizontal_profile(js, mode))
    merged = Job(mid, prog, cfg, ann, _dedupe_constraints(cons), selection)
    ins = sorted({d for j in jobs for d in new.inputs_of(j)})
    outs = sorted({d for j in jobs for d in new.outputs_of(j)})
    new.edges = [e for e in new.edges if e[0] not in jobs]
    new.edges += [(mid, d, "input") for d in ins] + [(mid, d, "output") for d in outs]
    for j in jobs:
        del new.jobs[j]
    new.jobs[mid] = merged
    _rename_refs(new, {j: mid for j in jobs})
    if not map_only:
        _sync_map_tasks(new, mid)
    return _finish(new)


# ---------------------------------------------------------------------------
# partition function and pruning


def derive_range_splits(profile, field_name, partitions):
    """Equi-depth split points for ``partitions`` ranges over the map-output
    histogram of ``field_name``."""
    if profile is None or field_name not in (profile.histograms or {}):
        raise ProfileMissingError(f"partition transform needs profile annotation: no histogram on {field_name!r}")
    if partitions < 2:
        raise TransformError("range partitioning needs at least 2 partitions")
    h = profile.histograms[field_name]
    if h.values is not None:
        cands, below, acc = [], [], 0
        for v, c in h.values:
            cands.append(v)
            below.append(acc)
            acc += c
        total = acc
    else:
        n = len(h.counts)
        width = (h.hi - h.lo) / n
        ints = isinstance(h.lo, int) and isinstance(h.hi, int)
        cands, below, acc = [], [], 0
        for i, c in enumerate(h.counts):
            edge = h.lo + i * width
            cands.append(math.ceil(edge) if ints else edge)
            below.append(acc)
            acc += c
        total = acc
    if len(cands) < 2 or total <= 0:
        raise SkewedKeyError(f"key {field_name!r} has a single value; range partitioning would be degenerate")
    splits = []
    for k in range(1, partitions):
        target = total * k / partitions
        best = min(range(1, len(cands)), key=lambda i: (abs(below[i] - target), i))
        v = cands[best]
        if not splits or canon(v) > canon(splits[-1]):
            splits.append(v)
    return splits


def _filter_interval(preds):
    lo = hi = None  # (value, inclusive)
    for p in preds:
        v = canon(p.value)
        if p.op in (">", ">=", "="):
            inc = p.op != ">"
            if lo is None or v > lo[0] or (v == lo[0] and not inc):
                lo = (v, inc)
        if p.op in ("<", "<=", "="):
            inc = p.op != "<"
            if hi is None or v < hi[0] or (v == hi[0] and not inc):
                hi = (v, inc)
    return lo, hi


def pruned_partitions(bounds, preds):
    """Indexes of the ranges ``(-inf,b0), [b0,b1), ..., [bn,+inf)`` that can
    hold a value satisfying every predicate."""
    lo, hi = _filter_interval(preds)
    keep = []
    cb = [canon(b) for b in bounds]
    for i in range(len(bounds) + 1):
        start = cb[i - 1] if i > 0 else None  # inclusive
        end = cb[i] if i < len(cb) else None  # exclusive
        ok = True
        if hi is not None and start is not None:
            ok = start < hi[0] or (start == hi[0] and hi[1])
        if ok and lo is not None and end is not None:
            ok = lo[0] < end
        if ok:
            keep.append(i)
    return keep


def check_partition_pruning(plan, consumer):
    job = plan.jobs.get(consumer)
    if job is None:
        return _na(f"unknown job {consumer}")
    flt = job.annotations.filter
    if flt is None or not flt.predicates:
        return _na("consumer has no filter annotation")
    if job.constraint("orderPreservingInput"):
        return _na("consumer's map tasks are tied to its input partitions")
    if job.program.is_bundled():
        return _na("consumer is a horizontally packed job")
    for d in plan.inputs_of(consumer):
        lay = plan.datasets[d].layout
        if lay.partition_kind != "range" or not lay.partition_fields:
            continue
        f = lay.partition_fields[0]
        preds = [p for p in flt.predicates if p.field == f]
        if not preds:
            continue
        parts = pruned_partitions(lay.range_bounds, preds)
        return _ok(plan, "partitionFn", [consumer], [{"prune_only": True, "dataset": d, "partitions": parts}])
    return _na("no input is range-partitioned on a filtered field")


def apply_partition_pruning(plan, consumer, _check=None):
    chk = _check or check_partition_pruning(plan, consumer)
    if not chk:
        raise TransformError(f"partition pruning not applicable to {consumer}: {chk.reason}")
    p = chk.application.params
    new = clone(plan)
    lay = new.datasets[p["dataset"]].layout
    job = new.jobs[consumer]
    if len(p["partitions"]) == lay.partition_count:
        job.input_selection.pop(p["dataset"], None)
    else:
        job.input_selection[p["dataset"]] = list(p["partitions"])
    validate(new)
    return new


def _flows_to_input(plan, src, consumer, fields):
    verdicts = [fields_flow_unchanged(plan, src, "K2", consumer, slot, fields) for slot in ("K1", "V1")]
    return any(v is True for v in verdicts)


def partition_candidates(plan, job_id):
    """Range specs worth trying for a job: equi-depth over the histogram of
    its leading key field, and the same splits widened with the literals of
    downstream filters so that consumers can prune."""
    job = plan.jobs[job_id]
    prog = job.program
    sch = job.annotations.schema
    prof = job.annotations.profile
    if prog.is_map_only() or prog.is_bundled() or sch is None or prof is None or not sch.K2:
        return []
    cur = prog.partition
    if cur.kind == "range":
        return []
    f = (cur.partition_fields or sch.K2)[0]
    if f not in prof.histograms:
        return []
    try:
        base = derive_range_splits(prof, f, max(2, job.config.num_reduce_tasks))
    except (SkewedKeyError, TransformError):
        return []
    sort = [f] + [x for x in (cur.effective_sort_fields() or sch.K2) if x != f]
    out = []
    specs = [(base, [])]
    literals, prunable = [], []
    for d in plan.outputs_of(job_id):
        for c in plan.consumers_of(d):
            cf = plan.jobs[c].annotations.filter
            if cf is None:
                continue
            lits = [p.value for p in cf.predicates if p.field == f]
            if lits and _flows_to_input(plan, job_id, c, [f]):
                literals += lits
                prunable.append(c)
    if literals:
        merged = sorted({canon(v): v for v in base + literals}.values(), key=canon)
        specs.append((merged, sorted(set(prunable), key=_id_key)))
    for splits, prune in specs:
        spec = PartitionSpec("range", [f], sort, splits)
        if spec == cur:
            continue
        out.append((spec, prune))
    return out


def check_partition_transform(plan, job_id, spec):
    job = plan.jobs.get(job_id)
    if job is None:
        return _na(f"unknown job {job_id}")
    if job.program.is_map_only():
        return _na("Map-only jobs have no partition function")
    if job.program.is_bundled():
        return _na("partition functions of packed jobs are per pipeline")
    try:
        check_partition_spec(spec)
    except PlanValidationError as exc:
        return _na(str(exc))
    sch = job.annotations.schema
    if sch is not None and sch.K2 and not set(spec.partition_fields) | set(spec.sort_fields) <= set(sch.K2):
        return _na(f"partition fields outside K2 {sch.K2}")
    trial = copy.deepcopy(job)
    trial.program.partition = spec
    bad = constraint_violations(plan, trial)
    if bad:
        return _na("constraint violation: " + "; ".join(bad))
    return Check(APPLICABLE)


def apply_partition_transform(plan, job_id, new_spec, prune=()):
    if isinstance(new_spec, dict):
        new_spec = PartitionSpec.from_obj(new_spec)
    chk = check_partition_transform(plan, job_id, new_spec)
    if not chk:
        raise ConstraintViolation(f"partition transform on {job_id} rejected: {chk.reason}")
    new = clone(plan)
    job = new.jobs[job_id]
    job.program.partition = copy.deepcopy(new_spec)
    if new_spec.kind == "range":
        job.config.num_reduce_tasks = len(new_spec.range_splits) + 1
    _sync_map_tasks(new, job_id)
    for d in new.outputs_of(job_id):
        for c in new.consumers_of(d):
            new.jobs[c].input_selection.pop(d, None)
    refresh_layouts(new)
    validate(new)
    for c in prune:
        chk = check_partition_pruning(new, c)
        if chk:
            new = apply_partition_pruning(new, c, chk)
    return new


# ---------------------------------------------------------------------------
# configuration


def check_configuration(plan, job_id, config):
    job = plan.jobs.get(job_id)
    if job is None:
        return _na(f"unknown job {job_id}")
    for name, (lo, hi) in CONFIG_BOUNDS.items():
        v = getattr(config, name)
        if name == "num_reduce_tasks" and job.program.is_map_only():
            if v != 0:
                return _na("Map-only jobs run 0 reduce tasks")
            continue
        if not lo <= v <= hi:
            return _na(f"{name}={v} outside [{lo}, {hi}]")
    spec = job.program.partition
    if spec.kind == "range" and config.num_reduce_tasks != len(spec.range_splits) + 1:
        return _na("range partitioning fixes the reduce task count")
    trial = clone(plan)
    trial.jobs[job_id].config = copy.deepcopy(config)
    _sync_map_tasks(trial, job_id)
    refresh_layouts(trial)
    for j in trial.jobs.values():
        bad = constraint_violations(trial, j)
        if bad:
            return _na(f"constraint violation on {j.id}: " + "; ".join(bad))
    return Check(APPLICABLE)


def apply_configuration(plan, job_id, config):
    if isinstance(config, dict):
        config = Configuration.from_obj(config)
    chk = check_configuration(plan, job_id, config)
    if not chk:
        raise ConstraintViolation(f"configuration of {job_id} rejected: {chk.reason}")
    if plan.jobs[job_id].config == config:
        return plan
    new = clone(plan)
    new.jobs[job_id].config = copy.deepcopy(config)
    _sync_map_tasks(new, job_id)
    return _finish(new)


# ---------------------------------------------------------------------------
# dispatch


def apply(plan, app):
    if app.kind == "intraVertical":
        return apply_intra_vertical(plan, app)
    if app.kind == "interVertical":
        return apply_inter_vertical(plan, app)
    if app.kind == "horizontal":
        return apply_horizontal(plan, app)
    if app.kind == "partitionFn":
        _fresh(plan, app)
        if app.params.get("prune_only"):
            return apply_partition_pruning(plan, app.targets[0])
        return apply_partition_transform(plan, app.targets[0], app.params["spec"], app.params.get("prune", ()))
    if app.kind == "configuration":
        _fresh(plan, app)
        return apply_configuration(plan, app.targets[0], app.params["config"])
    raise TransformError(f"unknown transformation kind {app.kind!r}")


def replay(plan, apps):
    """Apply a recorded sequence, re-stamping fingerprints as it goes."""
    for a in apps:
        a = copy.deepcopy(a)
        a.fingerprint = plan.fingerprint()
        plan = apply(plan, a)
    return plan


def partition_application(plan, job_id, spec, prune=()):
    chk = check_partition_transform(plan, job_id, spec)
    if not chk:
        return chk
    return _ok(plan, "partitionFn", [job_id], [{"spec": spec.to_dict(), "prune": list(prune)}])


def configuration_application(plan, job_id, config):
    chk = check_configuration(plan, job_id, config)
    if not chk:
        return chk
    return _ok(plan, "configuration", [job_id], [{"config": config.to_dict()}])
