import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from mrpack import search
from mrpack import transforms as T
from mrpack.executor import compare_outputs, run_plan
from mrpack.ir import Configuration, Histogram, PartitionSpec, PhaseProfile, Predicate, ProfileAnnotation, clone
from mrpack.randgen import random_plan
from mrpack.workloads import generate, install_profiles


def same_outputs(plan, new, inputs):
    a, _ = run_plan(plan, inputs=inputs)
    b, _ = run_plan(new, inputs=inputs)
    shared = set(plan.datasets) & set(new.datasets)
    return compare_outputs({d: v for d, v in a.items() if d in shared}, {d: v for d, v in b.items() if d in shared})


@pytest.fixture(scope="module")
def reportgen():
    return generate("reportgen", scale=2000)


def test_intra_vertical_removes_a_shuffle():
    plan, inputs = generate("tfidf", scale=2000)
    chk = T.check_intra_vertical(plan, "J1")
    assert chk.status == T.APPLICABLE
    new = T.apply(plan, chk.application)
    assert new.jobs["J1"].program.is_map_only()
    assert same_outputs(plan, new, inputs).equal
    _, trace = run_plan(new, inputs=inputs)
    assert trace.jobs["J1"].shuffle_records == 0


def test_intra_vertical_needs_flowing_key():
    plan, _ = generate("tfidf", scale=2000)
    chk = T.check_intra_vertical(plan, "J3")
    assert chk.status == T.NOT_APPLICABLE
    assert "flow" in chk.reason


def test_inter_vertical_one_to_one(reportgen):
    plan, inputs = reportgen
    chk = T.check_inter_vertical(plan, "D3")
    assert [a.signature() for a in chk.applications] == ["interVertical(J3,J4;one-to-one)"]
    new = T.apply(plan, chk.application)
    assert len(new.jobs) == len(plan.jobs) - 1 and "J3+J4" in new.jobs
    assert "D3" not in new.datasets
    assert same_outputs(plan, new, inputs).equal


def test_inter_vertical_one_to_many_variants(reportgen):
    plan, inputs = reportgen
    chk = T.check_inter_vertical(plan, "D4")
    sigs = [a.signature() for a in chk.applications]
    assert sigs == ["interVertical(J4,J5,J6;replicate)", "interVertical(J4,J5,J6;pack=J5)",
                    "interVertical(J4,J5,J6;pack=J6)"]
    for app in chk.applications:
        assert same_outputs(plan, T.apply(plan, app), inputs).equal


def test_inter_vertical_statuses(reportgen):
    plan, _ = reportgen
    assert T.check_inter_vertical(plan, "D1").status == T.NOT_APPLICABLE
    bare = clone(plan)
    bare.jobs["J4"].annotations.schema = None
    chk = T.check_inter_vertical(bare, "D3")
    assert chk.status == T.UNKNOWN and not chk


def test_horizontal_shared_scan():
    plan, inputs = generate("loganalysis", scale=2000)
    chk = T.check_horizontal(plan, ["J1", "J2"])
    assert chk.application.params["mode"] == "shared"
    new = T.apply(plan, chk.application)
    assert "J1|J2" in new.jobs and new.jobs["J1|J2"].program.is_bundled()
    assert same_outputs(plan, new, inputs).equal
    _, t0 = run_plan(plan, inputs=inputs)
    _, t1 = run_plan(new, inputs=inputs)
    # one scan of D0 instead of two
    assert t1.jobs["J1|J2"].map_input_records == t0.jobs["J1"].map_input_records


def test_horizontal_rejects_dependent_jobs():
    plan, _ = generate("loganalysis", scale=2000)
    chk = T.check_horizontal(plan, ["J1", "J3"])
    assert chk.status == T.NOT_APPLICABLE and "dependency" in chk.reason


def test_stale_application_is_refused(reportgen):
    plan, _ = reportgen
    app = T.check_inter_vertical(plan, "D3").application
    moved = T.apply(plan, T.check_inter_vertical(plan, "D4").application)
    with pytest.raises(T.StaleApplicationError):
        T.apply(moved, app)


def test_replay_reproduces(reportgen):
    plan, _ = reportgen
    unit = search.OptimizationUnit(["J3"], ["J4"], search.VERTICAL)
    two = [sp for sp in search.enumerate_subplans(plan, unit) if len(sp.applied) == 2]
    assert two
    for sp in two:
        assert T.replay(plan, sp.applied).to_dict() == sp.result.to_dict()


def test_pruned_partitions():
    bounds = list(range(100, 1000, 100))
    assert T.pruned_partitions(bounds, [Predicate("o", "<", 100)]) == [0]
    assert T.pruned_partitions(bounds, [Predicate("o", "<=", 100)]) == [0, 1]
    assert T.pruned_partitions(bounds, [Predicate("o", ">=", 900)]) == [9]
    assert T.pruned_partitions(bounds, [Predicate("o", ">", 899)]) == [8, 9]
    assert T.pruned_partitions(bounds, [Predicate("o", "=", 250)]) == [2]
    assert T.pruned_partitions(bounds, [Predicate("o", ">=", 200), Predicate("o", "<", 400)]) == [2, 3]


def test_derive_range_splits_equi_depth():
    prof = ProfileAnnotation(None, histograms={"k": Histogram.build([v for v in range(100) for _ in range(3)])})
    assert T.derive_range_splits(prof, "k", 4) == [25, 50, 75]
    with pytest.raises(T.SkewedKeyError):
        T.derive_range_splits(ProfileAnnotation(None, histograms={"k": Histogram.build([7] * 50)}), "k", 4)
    with pytest.raises(T.ProfileMissingError):
        T.derive_range_splits(ProfileAnnotation(None), "k", 4)


def test_partition_transform_with_pruning():
    plan, inputs = generate("logicalsplit", scale=2000)
    cands = T.partition_candidates(plan, "J1")
    assert cands and all(spec.kind == "range" for spec, _ in cands)
    spec, prune = cands[-1]
    assert prune == ["J2", "J3", "J4"]
    for lit in (100, 500, 900):
        assert lit in spec.range_splits
    new = T.apply(plan, T.partition_application(plan, "J1", spec, prune).application)
    assert set(new.jobs["J2"].input_selection) == {"D1"}
    assert same_outputs(plan, new, inputs).equal
    # a range-partitioned job is not offered the transform again
    assert T.partition_candidates(new, "J1") == []


def test_partition_fields_must_come_from_k2():
    plan, _ = generate("logicalsplit", scale=2000)
    chk = T.check_partition_transform(plan, "J1", PartitionSpec("range", ["price"], ["price"], [10]))
    assert chk.status == T.NOT_APPLICABLE


def test_configuration_checks():
    plan, _ = generate("logicalsplit", scale=2000)
    assert T.check_configuration(plan, "J1", Configuration(4, 8))
    assert not T.check_configuration(plan, "J2", Configuration(4, 2))  # Map-only
    assert not T.check_configuration(plan, "J1", Configuration(0, 2))
    ranged = T.apply(plan, T.partition_application(plan, "J1", PartitionSpec("range", ["orderid"], ["orderid"],
                                                                               [500])).application)
    assert ranged.jobs["J1"].config.num_reduce_tasks == 2
    chk = T.check_configuration(ranged, "J1", Configuration(4, 3))
    assert not chk and "range" in chk.reason


def test_adjust_profile():
    a = PhaseProfile(100.0, 50.0, 1000.0, 400.0, 2.0)
    b = PhaseProfile(50.0, 5.0, 400.0, 40.0, 1.0)
    v = T.adjust_profile(a, b)
    assert v.selectivity == a.selectivity * b.selectivity
    assert v.cpu_seconds == 3.0 and v.records_in == 100.0 and v.records_out == 5.0
    h = T.adjust_profile(a, b, "horizontal")
    assert (h.records_in, h.records_out, h.cpu_seconds) == (150.0, 55.0, 3.0)
    # consumer measured on a different input size: its cost is rescaled
    b2 = PhaseProfile(25.0, 2.5, 200.0, 20.0, 1.0)
    assert T.adjust_profile(a, b2).cpu_seconds == 2.0 + 1.0 * 50.0 / 25.0
    with pytest.raises(T.ProfileMissingError):
        T.adjust_profile(a, None)


def _applications(plan):
    apps = []
    for phase in (search.VERTICAL, search.HORIZONTAL):
        apps += search._candidates(plan, set(plan.jobs), phase)
    return apps


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 100_000), st.data())
def test_any_accepted_transform_preserves_outputs(seed, data):
    plan, inputs = random_plan(seed)
    install_profiles(plan, inputs)
    apps = _applications(plan)
    if not apps:
        return
    app = data.draw(st.sampled_from(apps))
    new = T.apply(plan, app)
    res = same_outputs(plan, new, inputs)
    assert res.equal, (app.signature(), res.report())
