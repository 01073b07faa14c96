"""Acceptance criteria 1 to 10.

Each test carries a ``criterion`` marker; the run summary prints one
PASS/FAIL line per criterion (see conftest.py). Run alone with
``pytest tests/test_acceptance.py``.
"""

import copy
import json
import random
import statistics
import time

import numpy as np
import pytest

from mrpack import cli, search
from mrpack import transforms as T
from mrpack.cost import analytical_cost, estimate_plan, jobcount_cost
from mrpack.executor import compare_outputs, profile_from_trace, record_bytes, run_plan
from mrpack.ir import ClusterSpec, PartitionSpec, PhaseProfile, parse_plan
from mrpack.randgen import random_plan
from mrpack.workloads import WORKLOADS, generate, install_profiles

pytestmark = pytest.mark.slow


def _shared_equal(plan_a, out_a, plan_b, out_b):
    shared = set(plan_a.datasets) & set(plan_b.datasets)
    return compare_outputs({d: v for d, v in out_a.items() if d in shared},
                           {d: v for d, v in out_b.items() if d in shared})


def _all_units(plan, phase):
    cursor = frozenset()
    while True:
        nxt = search.next_optimization_unit(plan, cursor, phase)
        if nxt is None:
            return
        unit, cursor = nxt
        yield unit


# ---------------------------------------------------------------------------


@pytest.mark.criterion(1)
def test_c1_reportgen_packs_to_two_jobs(tmp_path, record_property):
    t0 = time.perf_counter()
    wd = tmp_path / "rg"
    assert cli.main(["gen", "reportgen", "--scale", "10000", "--seed", "0", "--out", str(wd)]) == 0
    assert cli.main(["optimize", str(wd / "plan.json"), "--out", str(wd / "opt.json"),
                     "--report", str(wd / "report.json"), "--budget", "60"]) == 0
    opt = parse_plan(wd / "opt.json")
    rc = cli.main(["verify", str(wd / "plan.json"), str(wd / "opt.json"), "--data", str(wd / "data")])
    elapsed = time.perf_counter() - t0
    record_property("detail", f"7 -> {len(opt.jobs)} jobs {sorted(opt.jobs)}; verify exit {rc}; {elapsed:.1f}s")
    assert len(opt.jobs) == 2
    assert rc == 0
    assert elapsed < 60


@pytest.mark.criterion(2)
def test_c2_master_equivalence_suite(record_property):
    t0 = time.perf_counter()
    kinds = {}
    failures = []
    for seed in range(200):
        plan, inputs = random_plan(seed)
        install_profiles(plan, inputs)
        base, _ = run_plan(plan, inputs=inputs)
        # every accepted configuration change, one per job
        rnd = random.Random(seed)
        for j in sorted(plan.jobs):
            cfg = copy.deepcopy(plan.jobs[j].config)
            cfg.num_map_tasks = rnd.randint(1, 8)
            if cfg.num_reduce_tasks:
                cfg.num_reduce_tasks = rnd.randint(1, 8)
            cfg.combiner_enabled = cfg.combiner_enabled and rnd.random() < 0.5
            chk = T.configuration_application(plan, j, cfg)
            if not chk:
                continue
            kinds["configuration"] = kinds.get("configuration", 0) + 1
            out, _ = run_plan(T.apply(plan, chk.application), inputs=inputs)
            if not compare_outputs(base, out).equal:
                failures.append((seed, f"configuration({j})"))
        # every accepted structural transformation and their compositions within a unit
        for phase in (search.VERTICAL, search.HORIZONTAL):
            for unit in _all_units(plan, phase):
                for sp in search.enumerate_subplans(plan, unit)[1:]:
                    for a in sp.applied:
                        kinds[a.kind] = kinds.get(a.kind, 0) + 1
                    out, _ = run_plan(sp.result, inputs=inputs)
                    if not _shared_equal(plan, base, sp.result, out).equal:
                        failures.append((seed, sp.signature()))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{sum(kinds.values())} applications {dict(sorted(kinds.items()))}; "
                              f"{len(failures)} mismatches; {elapsed:.0f}s")
    assert not failures, failures[:5]
    assert all(kinds.get(k, 0) > 0 for k in T.KINDS)
    assert elapsed < 300


@pytest.mark.criterion(3)
def test_c3_second_unit_has_four_subplans(record_property):
    plan, _ = generate("reportgen")
    units = list(_all_units(plan, search.VERTICAL))
    u2 = units[1]
    subs = search.enumerate_subplans(plan, u2)
    sigs = [" ; ".join(s.signature()) for s in subs]
    record_property("detail", f"U2 {u2.producers}->{u2.consumers}: {len(subs)} subplans: {sigs}")
    assert len(subs) == 4
    assert subs[0].applied == []


@pytest.mark.criterion(4)
def test_c4_greedy_never_worse(record_property):
    params = search.RrsParams(total_budget=60, seed=0)
    worse = []
    n = 0
    for name in WORKLOADS:
        plan, _ = generate(name)
        for model, fn in (("analytical", analytical_cost), ("jobcount", jobcount_cost)):
            out, rep = search.optimize(plan, plan.cluster, params, model)
            before, after = fn(plan), fn(out)
            n += 1
            if not after <= before:
                worse.append((name, model, before, after))
    record_property("detail", f"{n - len(worse)}/{n} workload x model runs with cost after <= before")
    assert not worse, worse


def grid_surface(seed, n=20):
    """A bowl with a few Gaussian wells and uniform texture; strictly positive."""
    rng = np.random.default_rng(seed)
    x, y = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    cx, cy = rng.uniform(0, n - 1, 2)
    z = 10 + 0.05 * ((x - cx) ** 2 + (y - cy) ** 2)
    for _ in range(int(rng.integers(2, 6))):
        wx, wy = rng.uniform(0, n - 1, 2)
        w, depth = rng.uniform(1.5, 4), rng.uniform(2, 6)
        z -= depth * np.exp(-((x - wx) ** 2 + (y - wy) ** 2) / (2 * w * w))
    return z + rng.uniform(0, 0.3, z.shape)


@pytest.mark.criterion(5)
def test_c5_rrs_vs_grid_oracle(record_property):
    t0 = time.perf_counter()
    hits = 0
    for seed in range(30):
        z = grid_surface(seed)
        res = search.rrs_minimize(list(z.shape), lambda p: float(z[p]), search.RrsParams(total_budget=60, seed=seed))
        assert res.evaluations <= 60
        opt = float(z.min())  # exhaustive oracle over all 400 points
        hits += (res.cost - opt) <= 0.10 * abs(opt)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{hits}/30 within 10% of grid optimum; {elapsed:.2f}s")
    assert hits >= 27
    assert elapsed < 10


@pytest.mark.criterion(6)
def test_c6_profile_adjustment(record_property):
    a = PhaseProfile(1000.0, 400.0, 50_000.0, 12_000.0, 0.7)
    b = PhaseProfile(400.0, 100.0, 12_000.0, 2_000.0, 0.25)
    packed = T.adjust_profile(a, b)
    assert packed.selectivity == a.selectivity * b.selectivity
    assert packed.cpu_seconds == a.cpu_seconds + b.cpu_seconds
    # measured against the executor on the random corpus
    n, off = 0, []
    for seed in range(200):
        plan, inputs = random_plan(seed)
        install_profiles(plan, inputs)
        for d in sorted(plan.datasets):
            chk = T.check_inter_vertical(plan, d)
            if not chk:
                continue
            for app in chk.applications:
                new = T.apply(plan, app)
                _, trace = run_plan(new, inputs=inputs)
                phase = "reduce" if app.params["side"] == "reduce" else "map"
                for j in set(new.jobs) - set(plan.jobs):
                    adj = getattr(new.jobs[j].annotations.profile, phase)
                    meas = getattr(profile_from_trace(new, j, trace.jobs[j]), phase)
                    if adj is None or meas is None or (adj.records_in == 0 and meas.records_in == 0):
                        continue
                    n += 1
                    err = abs(adj.selectivity - meas.selectivity) / max(meas.selectivity, 1e-12)
                    if err > 0.05:
                        off.append((seed, app.signature(), adj.selectivity, meas.selectivity))
    record_property("detail", f"product/sum exact; {n - len(off)}/{n} packed selectivities within 5% of measured")
    assert n > 100
    assert not off, off[:5]


@pytest.mark.criterion(7)
def test_c7_partition_pruning_bytes(record_property):
    plan, inputs = generate("logicalsplit")
    spec = PartitionSpec("range", ["orderid"], ["orderid"], list(range(100, 1000, 100)))
    chk = T.partition_application(plan, "J1", spec, ["J2"])
    assert chk, chk.reason
    new = T.apply(plan, chk.application)
    assert new.jobs["J2"].input_selection == {"D1": [0]}
    base, _ = run_plan(plan, inputs=inputs)
    out, trace = run_plan(new, inputs=inputs)
    part0 = sum(record_bytes(k, v) for k, v in out["D1"].partitions[0])
    read = sum(trace.jobs["J2"].bytes_read["D1"].values())
    record_property("detail", f"J2 read {read} bytes; partition 0 holds {part0}; of {sum(record_bytes(k, v) for k, v in out['D1'].records())} total")
    assert read == part0
    assert compare_outputs(base, out).equal


@pytest.mark.criterion(8)
def test_c8_phase_ordering(record_property):
    plan, _ = generate("reportgen")
    params = search.RrsParams(explore_samples=10, exploit_samples=20, total_budget=30, seed=0)

    def j7_intra(rep):
        offered = applied = False
        for ph in rep["phases"]:
            if ph["phase"] != search.VERTICAL:
                continue
            for u in ph["units"]:
                for row in u["subplans"]:
                    if any(s.startswith("intraVertical(J7") for s in row["signature"]):
                        offered = True
        applied = any(a["kind"] == "intraVertical" and a["targets"] == ["J7"] for a in rep["applied"])
        return offered, applied

    _, default = search.optimize(plan, plan.cluster, params, phases=(search.VERTICAL, search.HORIZONTAL))
    _, swapped = search.optimize(plan, plan.cluster, params, phases=(search.HORIZONTAL, search.VERTICAL))
    d, s = j7_intra(default), j7_intra(swapped)
    record_property("detail", f"J7 intra-vertical (offered, applied): default {d}, horizontal-first {s}")
    assert d == (True, True)
    assert s == (False, False)


@pytest.mark.criterion(9)
def test_c9_postproc_anti_packing(tmp_path, record_property):
    wd = tmp_path / "pp"
    assert cli.main(["gen", "postproc", "--out", str(wd), "--no-profile"]) == 0
    assert cli.main(["profile", str(wd / "plan.json"), "--data", str(wd / "data")]) == 0
    got = {}
    for model in ("analytical", "jobcount"):
        out = wd / f"{model}.json"
        rep = wd / f"{model}.report.json"
        assert cli.main(["optimize", str(wd / "plan.json"), "--out", str(out), "--report", str(rep),
                         "--cost-model", model, "--budget", "60"]) == 0
        report = json.loads(rep.read_text())
        horiz = [a for a in report["applied"] if a["kind"] == "horizontal"]
        got[model] = (len(parse_plan(out).jobs), len(horiz), report["summary"]["fallback"])
    record_property("detail", f"(jobs, horizontal packs, fallback): {got}")
    assert got["analytical"][1] == 0 and got["analytical"][0] == 3 and not got["analytical"][2]
    assert got["jobcount"][1] >= 1 and got["jobcount"][0] < 3


@pytest.mark.criterion(10)
def test_c10_cost_model_ordinal_fidelity(record_property):
    plan, inputs = generate("tfidf")
    local = ClusterSpec.local()
    plan.cluster = local
    unit = next(_all_units(plan, search.VERTICAL))
    subs = search.enumerate_subplans(plan, unit)
    est, meas = [], []
    for sp in subs:
        est.append(estimate_plan(sp.result, local).total_seconds)
        times = []
        for _ in range(7):
            t0 = time.perf_counter()
            run_plan(sp.result, inputs=inputs)
            times.append(time.perf_counter() - t0)
        meas.append(statistics.median(times))
    lo, hi = min(est), max(est)
    model_best = {i for i, e in enumerate(est) if e <= lo * (1 + 1e-9)}
    model_worst = {i for i, e in enumerate(est) if e >= hi * (1 - 1e-9)}
    mbest, mworst = int(np.argmin(meas)), int(np.argmax(meas))
    record_property("detail", f"{len(subs)} subplans; model best {sorted(model_best)} worst {sorted(model_worst)}; "
                              f"measured best {mbest} worst {mworst}")
    assert mbest in model_best
    assert mworst in model_worst


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
