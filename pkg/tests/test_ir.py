import copy
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrpack.ir import (
    Histogram,
    PartitionSpec,
    PlanParseError,
    PlanValidationError,
    Predicate,
    canon,
    classify_subgraph,
    clone,
    dumps_plan,
    fields_flow_unchanged,
    job_depths,
    loads_plan,
    plan_from_dict,
    topological_job_order,
    validate,
)
from mrpack.randgen import random_plan
from mrpack.workloads import WORKLOADS, generate


def tiny():
    """Two chained jobs in the map/reduce shorthand form."""
    return {
        "datasets": {"A": {}, "B": {}, "C": {}},
        "jobs": {
            "J1": {"program": {"map": {"name": "identity"}, "reduce": {"name": "identity_reduce"},
                               "partition": {"kind": "hash", "partition_fields": ["k"]}},
                   "config": {"num_map_tasks": 2, "num_reduce_tasks": 2}},
            "J2": {"program": {"map": {"name": "identity"}}, "config": {"num_map_tasks": 1, "num_reduce_tasks": 0}},
        },
        "edges": [["J1", "A", "input"], ["J1", "B", "output"], ["J2", "B", "input"], ["J2", "C", "output"]],
    }


def test_shorthand_expands_to_pipelines():
    plan = plan_from_dict(tiny())
    j1 = plan.jobs["J1"].program
    assert [s.kind for s in j1.map_pipeline] == ["map"]
    assert [s.kind for s in j1.reduce_pipeline] == ["reduce", "write"]
    assert plan.jobs["J2"].program.is_map_only()
    assert plan.jobs["J2"].program.written() == ["C"]


def test_queries():
    plan = plan_from_dict(tiny())
    assert plan.base_datasets() == ["A"]
    assert plan.sink_datasets() == ["C"]
    assert plan.upstream_jobs("J2") == ["J1"]
    assert plan.reachable("J1", "J2") and not plan.reachable("J2", "J1")
    assert job_depths(plan) == {"J1": 0, "J2": 1}


@pytest.mark.parametrize("name", WORKLOADS)
def test_workload_round_trip(name):
    plan, _ = generate(name, profile=False)
    again = loads_plan(dumps_plan(plan))
    assert again.to_dict() == plan.to_dict()
    assert again.fingerprint() == plan.fingerprint()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_random_plan_round_trip(seed):
    plan, _ = random_plan(seed)
    assert loads_plan(dumps_plan(plan)).to_dict() == plan.to_dict()


def test_clone_is_deep():
    plan, _ = generate("tfidf", profile=False)
    c = clone(plan)
    c.jobs["J1"].config.num_map_tasks = 99
    assert plan.jobs["J1"].config.num_map_tasks != 99
    assert c.fingerprint() != plan.fingerprint()


def test_parse_error_reports_line():
    with pytest.raises(PlanParseError) as exc:
        loads_plan('{\n "jobs": {\n  "J1": ,\n}')
    assert exc.value.line == 3
    with pytest.raises(PlanParseError):
        loads_plan("[1, 2]")


def test_unknown_comparator_rejected():
    with pytest.raises(PlanParseError):
        Predicate("x", "!=", 1)
    obj = tiny()
    obj["annotations"] = {"jobs": {"J2": {"filter": {"predicates": [["k", "~", 1]]}}}}
    with pytest.raises(PlanParseError):
        plan_from_dict(obj)


def _invalid(mutate):
    obj = tiny()
    mutate(obj)
    with pytest.raises(PlanValidationError) as exc:
        plan_from_dict(obj)
    return exc.value.invariant


def test_validation_invariants():
    assert _invalid(lambda o: o["edges"].append(["J1", "C", "output"])) == "single-producer"
    assert _invalid(lambda o: o["edges"].append(["J2", "Z", "input"])) == "edge-endpoint"
    assert _invalid(lambda o: o["edges"].append(["J2", "B", "input"])) == "edge-unique"
    assert _invalid(lambda o: o["jobs"]["J2"]["config"].update(num_reduce_tasks=3)) == "config-bounds"
    assert _invalid(lambda o: o["jobs"]["J1"]["config"].update(num_reduce_tasks=0)) == "config-bounds"
    assert _invalid(lambda o: o["jobs"]["J1"]["program"]["partition"].update(sort_fields=["z", "k"])) \
        == "partition-prefix"
    assert _invalid(lambda o: o["jobs"]["J1"]["program"]["partition"].update(kind="range", range_splits=[5, 3])) \
        == "range-splits"
    assert _invalid(lambda o: o["jobs"]["J2"].update(input_selection={"B": [7]})) == "layout"

    def cycle(o):
        o["edges"] = [["J1", "A", "input"], ["J1", "B", "output"], ["J2", "B", "input"], ["J2", "A", "output"]]
    assert _invalid(cycle) == "dag"

    def bad_filter(o):
        o["annotations"] = {"jobs": {"J2": {
            "schema": {"K1": ["k"], "V1": ["v"], "K2": ["k"], "V2": ["v"]},
            "filter": {"predicates": [["other", "<", 3]]}}}}
    assert _invalid(bad_filter) == "filter-fields"


def test_range_layout_bounds_checked():
    plan, _ = generate("logicalsplit", profile=False)
    bad = clone(plan)
    bad.datasets["D1"].layout.range_bounds = [5, 5]
    with pytest.raises(PlanValidationError):
        validate(bad)


def test_topological_order_is_natural():
    obj = {"datasets": {f"D{i}": {} for i in range(12)}, "jobs": {}, "edges": []}
    for i in (10, 2, 1):
        obj["jobs"][f"J{i}"] = {"program": {"map": {"name": "identity"}}, "config": {"num_reduce_tasks": 0}}
        obj["edges"] += [[f"J{i}", "D0", "input"], [f"J{i}", f"D{i}", "output"]]
    assert topological_job_order(plan_from_dict(obj)) == ["J1", "J2", "J10"]


def test_classify_subgraph_reportgen():
    plan, _ = generate("reportgen", profile=False)
    assert classify_subgraph(plan, "D01") == "none-to-one"
    assert classify_subgraph(plan, "D1") == "many-to-one"
    assert classify_subgraph(plan, "D3") == "one-to-one"
    assert classify_subgraph(plan, "D4") == "one-to-many"
    assert classify_subgraph(plan, "D7") == "one-to-none"


def test_fields_flow_unchanged():
    plan, _ = generate("reportgen", profile=False)
    assert fields_flow_unchanged(plan, "J1", "K2", "J3", "K1", ["custid"]) is True
    assert fields_flow_unchanged(plan, "J3", "K3", "J5", "K2", ["orderid"]) is True
    # J4 drops custid from its output
    assert fields_flow_unchanged(plan, "J3", "V3", "J5", "V1", ["custid"]) is False
    bare = clone(plan)
    bare.jobs["J4"].annotations.schema = None
    assert fields_flow_unchanged(bare, "J3", "K3", "J5", "K2", ["orderid"]) is None


def test_histogram_modes():
    h = Histogram.build([3, 1, 3, 2])
    assert h.values == [[1, 1], [2, 1], [3, 2]]
    assert h.total() == 4 and h.distinct() == 3
    big = Histogram.build(list(range(5000)))
    assert big.values is None and len(big.counts) == Histogram.BUCKETS and big.total() == 5000
    assert Histogram.build([f"s{i}" for i in range(5000)]) is None
    assert Histogram.from_obj(json.loads(json.dumps(h.to_dict()))) == h


def test_canon_orders_mixed_scalars():
    vals = ["b", 2, None, 1.5, True, "a"]
    assert sorted(vals, key=canon) == [None, True, 1.5, 2, "a", "b"]


def test_partition_spec_defaults():
    spec = PartitionSpec("hash", ["a"])
    assert spec.effective_sort_fields() == ["a"]
    assert spec.num_partitions(7) == 7
    r = PartitionSpec("range", ["a"], ["a", "b"], [10, 20])
    assert r.num_partitions(7) == 3
    assert PartitionSpec.from_obj(copy.deepcopy(r.to_dict())) == r
