from collections import Counter

import pytest

from mrpack.executor import (
    ExecutionError,
    InMemoryDataset,
    collect_profile,
    compare_outputs,
    dataset_stats,
    fnv1a64,
    hash_partition,
    layout_records,
    range_partition,
    read_dataset,
    run_plan,
    write_dataset,
)
from mrpack.ir import Layout, UdfRef
from mrpack.workloads import _Builder, _agg, _proj

WORDS = "the cat sat on the mat the end".split()


def wordcount(combine=True, reduces=3):
    b = _Builder()
    rows = [({"pos": i}, {"word": w}) for i, w in enumerate(WORDS * 5)]
    b.base("T", [["pos", "int"]], [["word", "str"]], rows)
    b.job("J1", ["T"], "C", ([["word", "str"]], [["n", "int"]]),
          _proj(["word"], ["one"], compute={"one": ["const", "pos", 1]}), _agg(["sum", "one", "n"]),
          combine=UdfRef("partial_sum", {"fields": ["one"]}) if combine else None,
          k1=["pos"], v1=["word"], k2=["word"], v2=["one"], k3=["word"], v3=["n"], maps=2, reduces=reduces)
    return b.done()


def test_fnv1a_reference_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_partition_functions():
    assert all(0 <= hash_partition([w], 4) < 4 for w in WORDS)
    assert hash_partition(["x", 1], 7) == hash_partition(["x", 1], 7)
    assert [range_partition(v, [10, 20]) for v in (9, 10, 19, 20, 99)] == [0, 1, 1, 2, 2]


def test_wordcount_matches_counter():
    plan, inputs = wordcount()
    out, trace = run_plan(plan, inputs=inputs)
    got = {k["word"]: v["n"] for k, v in out["C"].records()}
    assert got == dict(Counter(WORDS * 5))
    jt = trace.jobs["J1"]
    assert jt.map_input_records == len(WORDS) * 5
    assert jt.reduce_output_records == len(set(WORDS))
    assert len(out["C"].partitions) == 3
    assert jt.combine_output_records < jt.combine_input_records
    assert jt.shuffle_records == jt.combine_output_records


def test_combiner_does_not_change_outputs():
    a, ia = wordcount(combine=True)
    b, ib = wordcount(combine=False)
    oa, ta = run_plan(a, inputs=ia)
    ob, tb = run_plan(b, inputs=ib)
    assert compare_outputs(oa, ob).equal
    assert tb.jobs["J1"].shuffle_records == len(WORDS) * 5


def test_reducer_count_does_not_change_outputs():
    plan, inputs = wordcount()
    ref, _ = run_plan(plan, inputs=inputs)
    for r in (1, 2, 5):
        plan, inputs = wordcount(reduces=r)
        out, _ = run_plan(plan, inputs=inputs)
        assert len(out["C"].partitions) == r
        assert compare_outputs(out, ref).equal


def test_runs_are_deterministic():
    plan, inputs = wordcount()
    o1, t1 = run_plan(plan, inputs=inputs)
    o2, t2 = run_plan(plan, inputs=inputs)
    assert o1 == o2
    assert t1.counters() == t2.counters()


def test_reduce_input_is_sorted_by_key():
    plan, inputs = wordcount(reduces=1)
    out, _ = run_plan(plan, inputs=inputs)
    words = [k["word"] for k, _ in out["C"].partitions[0]]
    assert words == sorted(words)


def test_missing_input_is_an_execution_error():
    plan, _ = wordcount()
    with pytest.raises(ExecutionError):
        run_plan(plan, inputs={})


def test_compare_outputs_is_a_multiset_check():
    recs = [({"k": 1}, {"v": 1}), ({"k": 1}, {"v": 1}), ({"k": 2}, {"v": 3})]
    a = {"D": InMemoryDataset([recs[:1], recs[1:]])}
    b = {"D": InMemoryDataset.single(list(reversed(recs)))}
    assert compare_outputs(a, b).equal
    c = {"D": InMemoryDataset.single(recs[1:])}
    res = compare_outputs(a, c)
    assert not res.equal and "x2" in res.report()
    assert not compare_outputs(a, {"E": a["D"]}).equal


def test_layout_records_range_and_sort():
    recs = [({"id": i}, {"x": (i * 7) % 30}) for i in range(30)]
    ds = layout_records(recs, Layout("range", ["x"], ["x"], partition_count=3, range_bounds=[10, 20]))
    assert [len(p) for p in ds.partitions] == [10, 10, 10]
    for i, part in enumerate(ds.partitions):
        xs = [v["x"] for _, v in part]
        assert xs == sorted(xs)
        assert all(range_partition(x, [10, 20]) == i for x in xs)


def test_delimited_round_trip(tmp_path):
    recs = [({"id": 1}, {"s": "a b", "f": 0.1, "ok": True, "n": None}), ({"id": 2}, {"s": "", "f": -2.5, "ok": False, "n": 3})]
    ds = InMemoryDataset([recs[:1], recs[1:]])
    kf = [["id", "int"]]
    vf = [["s", "str"], ["f", "float"], ["ok", "bool"], ["n", "int"]]
    write_dataset(ds, tmp_path / "d", kf, vf)
    back = read_dataset(tmp_path / "d", kf, vf)
    assert back.partitions == ds.partitions
    with pytest.raises(ValueError):
        write_dataset(InMemoryDataset.single([({"id": 1}, {"s": "a\tb", "f": 0.0, "ok": True, "n": 1})]),
                      tmp_path / "e", kf, vf)


def test_profile_matches_trace():
    plan, inputs = wordcount(combine=False)
    prof = collect_profile(plan, inputs=inputs)["J1"]
    assert prof.map.records_in == len(WORDS) * 5
    assert prof.map.selectivity == 1.0
    assert prof.reduce.records_out == len(set(WORDS))
    assert prof.histograms["word"].total() == len(WORDS) * 5
    n, nbytes = dataset_stats(inputs["T"])
    assert prof.map.bytes_in == nbytes and n == len(WORDS) * 5
