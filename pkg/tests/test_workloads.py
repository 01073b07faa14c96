import pytest

from mrpack.executor import compare_outputs, dataset_stats, run_plan
from mrpack.ir import validate
from mrpack.randgen import SHAPES, random_plan
from mrpack.workloads import WORKLOADS, UnknownWorkloadError, generate, powerlaw_records, uniform_records

JOBS = {"tfidf": 3, "coauthor": 3, "loganalysis": 4, "pagerank": 3, "tpch17": 4, "reportgen": 7, "postproc": 3,
        "logicalsplit": 4}


@pytest.mark.parametrize("name", WORKLOADS)
def test_workload_shape(name):
    plan, inputs = generate(name, scale=500)
    validate(plan)
    assert len(plan.jobs) == JOBS[name]
    assert sorted(inputs) == plan.base_datasets()
    for j in plan.jobs.values():
        assert j.annotations.schema is not None
        assert j.annotations.profile is not None
    for d, ds in inputs.items():
        n, b = dataset_stats(ds)
        a = plan.datasets[d].annotations
        assert (a.records, a.size_bytes) == (n, b)


@pytest.mark.parametrize("name", WORKLOADS)
def test_workload_seeding(name):
    a, ia = generate(name, scale=300, seed=1, profile=False)
    b, ib = generate(name, scale=300, seed=1, profile=False)
    assert a.to_dict() == b.to_dict()
    assert compare_outputs(ia, ib).equal


def test_seeds_change_data():
    _, a = generate("loganalysis", scale=300, seed=1, profile=False)
    _, b = generate("loganalysis", scale=300, seed=2, profile=False)
    assert not compare_outputs(a, b).equal


def test_every_workload_runs_nonempty():
    for name in WORKLOADS:
        plan, inputs = generate(name, scale=500, profile=False)
        out, _ = run_plan(plan, inputs=inputs)
        assert all(len(out[d]) > 0 for d in plan.sink_datasets()), name


def test_unknown_workload():
    with pytest.raises(UnknownWorkloadError):
        generate("wordcount")


def test_record_helpers():
    u = uniform_records(50, ["a", "b"], seed=3, hi=10)
    assert len(u) == 50 and all(0 <= v["a"] < 10 for _, v in u)
    p = powerlaw_records(200, ["a"], seed=3, hi=1000)
    assert sum(v["a"] == 1 for _, v in p) > sum(v["a"] == 9 for _, v in p)


def test_random_plans_span_sizes_and_shapes():
    sizes = set()
    for seed in range(60):
        plan, inputs = random_plan(seed)
        validate(plan)
        sizes.add(len(plan.jobs))
    assert sizes == {2, 3, 4, 5, 6}
    assert set(SHAPES) == {"filter", "rekey", "aggregate", "shuffle", "distinct"}
