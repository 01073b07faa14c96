"""What-if cost model.

A deliberately small analytical phase model: each job runs a read, map,
spill/sort, shuffle, merge, reduce and write phase whose per-task times are
multiplied by the number of task waves the cluster needs. Per-record CPU
costs, selectivities and record sizes come from profile annotations; disk,
network, sort and compression rates from the cluster spec unless the profile
carries measured seconds-per-byte figures.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

from .ir import ClusterSpec, branch_partition, canon, iter_stages, job_depths, main_outputs, write_location
from .transforms import ProfileMissingError

MB = 2 ** 20
PHASES = ("read", "mapCompute", "spillSort", "shuffle", "merge", "reduceCompute", "write")


@dataclass
class JobCostEstimate:
    phase_seconds: dict
    map_waves: int
    reduce_waves: int
    total_seconds: float
    predicted_output: dict  # dataset -> (records, bytes)
    setup_seconds: float = 0.0
    map_slot_work: float = 0.0
    reduce_slot_work: float = 0.0

    def to_dict(self):
        return {
            "phase_seconds": {k: round(v, 6) for k, v in self.phase_seconds.items()},
            "map_waves": self.map_waves,
            "reduce_waves": self.reduce_waves,
            "total_seconds": round(self.total_seconds, 6),
            "predicted_output": {d: [round(r, 3), round(b, 3)] for d, (r, b) in sorted(self.predicted_output.items())},
        }


@dataclass
class PlanCostEstimate:
    per_job: dict
    total_seconds: float
    critical_path: list
    fallback: bool = False
    levels: list = field(default_factory=list)

    def to_dict(self):
        return {
            "total_seconds": round(self.total_seconds, 6),
            "critical_path": list(self.critical_path),
            "fallback": self.fallback,
            "per_job": {j: (e.to_dict() if isinstance(e, JobCostEstimate) else e) for j, e in sorted(self.per_job.items())},
        }


def _rate(prof, key, default):
    v = (prof.io_costs or {}).get(key) if prof is not None else None
    return v if v else default


def _waves(tasks, slots):
    return max(1, math.ceil(tasks / slots)) if tasks else 0


class _Branch:
    """Dataflow of one pipeline (the whole job unless horizontally packed)."""

    def __init__(self, prof, records, nbytes, combiner, tag=None):
        self.prof = prof
        self.tag = tag
        self.rin = records
        self.bin = nbytes
        m = prof.map
        self.map_cpu = records * m.cpu_per_record
        self.map_out = records * m.selectivity
        self.map_out_bytes = self.map_out * m.out_record_bytes
        self.comb_cpu = 0.0
        self.shuf = self.map_out
        self.shuf_bytes = self.map_out_bytes
        if combiner and prof.combine is not None and prof.reduce is not None:
            c = prof.combine
            self.comb_cpu = self.map_out * c.cpu_per_record
            self.shuf = self.map_out * c.selectivity
            self.shuf_bytes = self.shuf * (c.out_record_bytes or m.out_record_bytes)
        if prof.reduce is not None:
            r = prof.reduce
            self.red_cpu = self.shuf * r.cpu_per_record
            self.out = self.shuf * r.selectivity
            self.out_bytes = self.out * r.out_record_bytes
        else:
            self.red_cpu = 0.0
            self.out = self.map_out
            self.out_bytes = self.map_out_bytes


def _input_share(plan, job, d, records, nbytes):
    sel = job.input_selection.get(d)
    if not sel:
        return records, nbytes
    lay = plan.datasets[d].layout
    share = len(sel) / lay.partition_count
    prod = plan.producer_of(d)
    prof = plan.jobs[prod].annotations.profile if prod else None
    f = lay.partition_fields[0] if lay.partition_fields else None
    if prof is not None and f in prof.histograms and lay.range_bounds and prof.histograms[f].values is not None:
        bounds = [canon(b) for b in lay.range_bounds]
        mass = [0.0] * lay.partition_count
        for v, c in prof.histograms[f].values:
            mass[bisect.bisect_right(bounds, canon(v))] += c
        tot = sum(mass)
        if tot:
            share = sum(mass[i] for i in sel) / tot
    return records * share, nbytes * share


def estimate_job(job, inputs, cluster=None, plan=None):
    """Estimate one job.

    ``inputs`` maps each input dataset id to ``(records, bytes, compressed)``
    as seen by this job (pruning already applied).
    """
    cluster = cluster or ClusterSpec()
    prof = job.annotations.profile
    if prof is None:
        raise ProfileMissingError(f"job {job.id} has no profile annotation; use the job-count cost model")
    cfg = job.config
    prog = job.program
    cf = cluster.compression_factor
    tot_rec = sum(r for r, _, _ in inputs.values())
    read_bytes = 0.0
    decompress = 0.0
    for r, b, comp in inputs.values():
        read_bytes += b * cf if comp else b
        decompress += b / MB * cluster.compress_cost_per_mb if comp else 0.0
    tot_bytes = sum(b for _, b, _ in inputs.values())

    combiner = cfg.combiner_enabled
    if prog.is_bundled():
        branches = []
        for b in prog.map_pipeline[-1].branches:
            bp = prof.branches.get(b.tag)
            if bp is None:
                raise ProfileMissingError(f"job {job.id} lacks the profile of pipeline {b.tag}")
            if b.source is None:
                rec, byt = tot_rec, tot_bytes
            else:
                rec, byt = inputs.get(b.source, (0, 0, False))[:2]
            branches.append(_Branch(bp, rec, byt, combiner and b.combine is not None, b.tag))
    else:
        branches = [_Branch(prof, tot_rec, tot_bytes, combiner and prog.combine is not None)]

    M = max(1, cfg.num_map_tasks)
    if not job.constraint("orderPreservingInput"):
        # small inputs cannot be cut into more splits than they have bytes for
        split = cluster.min_split_mb * MB
        M = min(M, sum(max(1, math.ceil(b / split)) for _, b, _ in inputs.values()) or 1)
    map_only = prog.is_map_only()
    R = job.effective_reduce_tasks()
    mw = _waves(M, cluster.map_slots)
    rw = _waves(R, cluster.reduce_slots) if not map_only else 0
    stages = sum(1 for s in iter_stages(prog.map_pipeline + prog.reduce_pipeline) if s.kind != "bundle")

    read_rate = _rate(prof, "read", 1.0 / (cluster.disk_mbps * MB))
    write_rate = _rate(prof, "write", 1.0 / (cluster.disk_mbps * MB))
    spill_rate = _rate(prof, "spill", (cluster.sort_cost_per_mb + 1.0 / cluster.disk_mbps) / MB)
    merge_rate = _rate(prof, "merge", cluster.merge_cost_per_mb / MB)
    net_rate = _rate(prof, "shuffle", 1.0 / (cluster.network_mbps * MB))

    ph = dict.fromkeys(PHASES, 0.0)
    map_out_bytes = sum(b.map_out_bytes for b in branches)
    shuf_bytes = sum(b.shuf_bytes for b in branches)
    per_map = {
        "read": (read_bytes * read_rate + decompress) / M,
        "mapCompute": sum(b.map_cpu + b.comb_cpu for b in branches) / M,
    }
    if prog.is_bundled():
        per_map["mapCompute"] += map_out_bytes / MB * cluster.tag_cost_per_mb / M

    outputs = _predict_outputs(job, prof, branches)
    out_bytes = sum(b for _, b in outputs.values())
    out_write = out_bytes * cf if cfg.output_compression else out_bytes
    out_comp = out_bytes / MB * cluster.compress_cost_per_mb if cfg.output_compression else 0.0

    per_red = {}
    if map_only:
        per_map["write"] = (out_write * write_rate + out_comp) / M
    else:
        sb = shuf_bytes
        comp_cpu = 0.0
        if cfg.map_output_compression:
            comp_cpu = sb / MB * cluster.compress_cost_per_mb
            sb = sb * cf
        task_mb = sb / M / MB
        extra = max(0, math.ceil(task_mb / cfg.sort_buffer_mb) - 1)
        pressure = 1.0
        need = stages * cfg.sort_buffer_mb
        if need > cluster.per_slot_memory_mb:
            pressure += cluster.memory_pressure_coeff * (need / cluster.per_slot_memory_mb - 1.0)
        per_map["spillSort"] = (sb * spill_rate * (1 + extra) * pressure + comp_cpu) / M
        distinct = _distinct_partition_keys(job, prof, branches)
        r_eff = max(1, min(R, distinct)) if distinct else R
        per_red["shuffle"] = sb * net_rate / r_eff
        per_red["merge"] = (sb * merge_rate + (comp_cpu if cfg.map_output_compression else 0.0)) / r_eff
        per_red["reduceCompute"] = sum(b.red_cpu for b in branches) / r_eff
        per_red["write"] = (out_write * write_rate + out_comp) / r_eff
    for k, v in per_map.items():
        ph[k] += v * mw
    for k, v in per_red.items():
        ph[k] += v * rw
    setup = cluster.job_startup_s + cluster.task_startup_s * (mw + rw)
    total = sum(ph.values()) + setup
    map_task = sum(per_map.values()) + cluster.task_startup_s
    red_task = sum(per_red.values()) + cluster.task_startup_s if not map_only else 0.0
    return JobCostEstimate(ph, mw, rw, total, outputs, setup, map_task * M, red_task * (R if not map_only else 0))


def _distinct_partition_keys(job, prof, branches):
    total = 0
    for b in branches:
        p = b.prof
        spec = branch_partition(job.program, b.tag)
        sch = job.annotations.schema
        fields = list(spec.partition_fields) or (list(sch.K2) if sch is not None and b.tag is None else [])
        n = p.distinct_for(fields) if fields else None
        if n is None:
            return None
        total += n
    return total


def _predict_outputs(job, prof, branches):
    out = {}
    mains = main_outputs(job.program)
    by_tag = {b.tag: b for b in branches}
    rin = sum(b.rin for b in branches) if len(branches) > 1 and branches[0].tag is not None else branches[0].rin
    for d in job.program.written():
        if d in mains:
            b = by_tag.get(mains[d], branches[0])
            out[d] = (b.out, b.out_bytes)
            continue
        side, tag = write_location(job.program, d)
        src = prof.side_outputs
        base = rin
        if tag is not None and tag in prof.branches:
            src = prof.branches[tag].side_outputs or src
            base = by_tag[tag].rin
        if d in src:
            ratio, size = src[d]
            out[d] = (base * ratio, base * ratio * size)
        else:
            b = by_tag.get(tag, branches[0])
            out[d] = (b.out, b.out_bytes)
    return out


def estimate_plan(plan, cluster=None):
    """Estimate every job in topological order and aggregate by depth level:
    each level costs the larger of its slowest job and its total slot work
    spread over the cluster's slots, plus a submission delay for every job
    after the first."""
    cluster = cluster or plan.cluster or ClusterSpec()
    depths = job_depths(plan)
    produced = {}
    per_job = {}
    for jid in sorted(plan.jobs, key=lambda j: (depths[j], j)):
        job = plan.jobs[jid]
        inputs = {}
        for d in plan.inputs_of(jid):
            ds = plan.datasets[d]
            if d in produced:
                rec, byt = produced[d]
            else:
                a = ds.annotations
                if a.records is None or a.size_bytes is None:
                    raise ProfileMissingError(f"base dataset {d} lacks size annotations")
                rec, byt = a.records, a.size_bytes
            rec, byt = _input_share(plan, job, d, rec, byt)
            inputs[d] = (rec, byt, ds.layout.compressed)
        est = estimate_job(job, inputs, cluster, plan)
        per_job[jid] = est
        produced.update(est.predicted_output)
    levels = {}
    for j, dep in depths.items():
        levels.setdefault(dep, []).append(j)
    total = 0.0
    path = []
    level_times = []
    for dep in sorted(levels):
        js = sorted(levels[dep])
        slowest = max(js, key=lambda j: (per_job[j].total_seconds, j))
        work = (sum(per_job[j].map_slot_work for j in js) / cluster.map_slots
                + sum(per_job[j].reduce_slot_work for j in js) / cluster.reduce_slots)
        t = max(per_job[slowest].total_seconds, work) + cluster.job_submit_s * (len(js) - 1)
        level_times.append(t)
        total += t
        path.append(slowest)
    return PlanCostEstimate(per_job, total, path, False, level_times)


def fallback_cost(plan):
    return PlanCostEstimate({j: 1 for j in plan.jobs}, float(len(plan.jobs)), [], True)


def analytical_cost(plan):
    return estimate_plan(plan).total_seconds


def jobcount_cost(plan):
    return fallback_cost(plan).total_seconds


COST_MODELS = {"analytical": analytical_cost, "jobcount": jobcount_cost}
