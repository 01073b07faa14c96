import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrpack import search
from mrpack import transforms as T
from mrpack.cost import analytical_cost
from mrpack.ir import ConfigConstraint, clone, job_depths, validate
from mrpack.randgen import random_plan
from mrpack.workloads import generate


def units(plan, phase=search.VERTICAL):
    cursor, out = frozenset(), []
    while (nxt := search.next_optimization_unit(plan, cursor, phase)) is not None:
        unit, cursor = nxt
        out.append(unit)
    return out


@pytest.mark.parametrize("name", ["reportgen", "loganalysis", "tpch17", "postproc"])
def test_units_cover_every_job_once_as_producer(name):
    plan, _ = generate(name, profile=False)
    us = units(plan)
    producers = [p for u in us for p in u.producers]
    assert sorted(producers) == sorted(plan.jobs)
    depth = job_depths(plan)
    for u in us:
        assert len({depth[p] for p in u.producers}) == 1
        assert set(u.consumers) == {c for p in u.producers for c in plan.downstream_jobs(p)}


def test_first_reportgen_unit():
    plan, _ = generate("reportgen", profile=False)
    u = units(plan)[0]
    assert (u.producers, u.consumers) == (["J1", "J2"], ["J3"])


def test_enumeration_identity_first_and_distinct():
    plan, _ = generate("tfidf", scale=2000)
    subs = search.enumerate_subplans(plan, units(plan)[0])
    assert subs[0].is_identity() and subs[0].result is plan
    keys = [search.structural_key(s.result) for s in subs]
    assert len(set(keys)) == len(keys)
    for s in subs:
        validate(s.result)
        assert T.replay(plan, s.applied).to_dict() == s.result.to_dict()


def test_enumeration_respects_limit():
    plan, _ = generate("tfidf", scale=2000)
    assert len(search.enumerate_subplans(plan, units(plan)[0], limit=3)) == 3


def test_rrs_params_validated():
    with pytest.raises(ValueError):
        search.RrsParams(explore_samples=50, total_budget=10)
    with pytest.raises(ValueError):
        search.RrsParams(shrink_ratio=1.0)


def bowl(p):
    return (p[0] - 7) ** 2 + (p[1] - 3) ** 2 + 1


def test_rrs_trace_is_monotone_and_budgeted():
    res = search.rrs_minimize([20, 20], bowl, search.RrsParams(total_budget=60, seed=3))
    assert res.evaluations <= 60
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
    assert res.trace[-1] == res.cost == bowl(res.point)


def test_rrs_is_deterministic():
    p = search.RrsParams(total_budget=50, seed=11)
    a = search.rrs_minimize([15, 9, 4], lambda x: sum(x), p)
    b = search.rrs_minimize([15, 9, 4], lambda x: sum(x), p)
    assert (a.point, a.cost, a.trace) == (b.point, b.cost, b.trace)


def test_rrs_exhausts_small_spaces():
    sizes = [3, 4]
    table = {p: (p[0] * 7 + p[1] * 5) % 11 for p in itertools.product(range(3), range(4))}
    res = search.rrs_minimize(sizes, table.__getitem__, search.RrsParams(total_budget=100, seed=0))
    assert res.evaluations == 12
    assert res.cost == min(table.values())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 30), st.integers(2, 30))
def test_rrs_never_worse_than_start(seed, n, m):
    start = (n - 1, m - 1)
    res = search.rrs_minimize([n, m], lambda p: abs(p[0] - 1) + abs(p[1] - 1),
                              search.RrsParams(explore_samples=5, total_budget=20, seed=seed), start=start)
    assert res.cost <= abs(start[0] - 1) + abs(start[1] - 1)


def test_config_space_pins():
    plan, _ = generate("tfidf", scale=2000)
    cl = plan.cluster
    names = {(d.job, d.name) for d in search.config_space(plan, list(plan.jobs), cl)}
    assert ("J1", "num_map_tasks") in names and ("J1", "combiner_enabled") in names
    pinned = clone(plan)
    pinned.jobs["J1"].constraints.append(ConfigConstraint("orderPreservingInput", {}))
    names = {(d.job, d.name) for d in search.config_space(pinned, ["J1"], cl)}
    assert ("J1", "num_map_tasks") not in names
    ls, _ = generate("logicalsplit", scale=2000)
    names = {(d.job, d.name) for d in search.config_space(ls, list(ls.jobs), ls.cluster)}
    assert ("J2", "num_reduce_tasks") not in names  # Map-only


def test_optimize_is_deterministic_and_replayable(fast_rrs):
    plan, _ = generate("reportgen", scale=2000)
    a, ra = search.optimize(plan, plan.cluster, fast_rrs)
    b, rb = search.optimize(plan, plan.cluster, fast_rrs)
    assert a.to_dict() == b.to_dict() and ra == rb
    assert search.replay_report(plan, ra).to_dict() == a.to_dict()
    assert analytical_cost(a) <= analytical_cost(plan)


def test_optimize_falls_back_without_profiles(fast_rrs):
    plan, _ = generate("tfidf", profile=False)
    out, rep = search.optimize(plan, plan.cluster, fast_rrs)
    assert rep["summary"]["fallback"]
    assert all(u["fallback"] for ph in rep["phases"] for u in ph["units"])
    assert len(out.jobs) <= len(plan.jobs)


def test_annotation_free_plan_is_left_alone(fast_rrs):
    plan, _ = generate("reportgen", profile=False)
    bare = clone(plan)
    for j in bare.jobs.values():
        j.annotations.schema = None
        j.annotations.filter = None
    out, rep = search.optimize(bare, bare.cluster, fast_rrs)
    assert sorted(out.jobs) == sorted(bare.jobs)
    statuses = {c["status"] for u in search.explain(bare)["units"] for c in u["checks"]}
    assert T.APPLICABLE not in statuses and T.UNKNOWN in statuses


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_optimize_random_plans_never_worse(seed):
    from mrpack.workloads import install_profiles
    plan, inputs = random_plan(seed)
    install_profiles(plan, inputs)
    out, rep = search.optimize(plan, plan.cluster, search.RrsParams(explore_samples=5, exploit_samples=5,
                                                                   total_budget=10, seed=seed))
    assert rep["summary"]["cost_after"] <= rep["summary"]["cost_before"]
