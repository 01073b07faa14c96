"""
Packing a seven-job report
==========================

Generate the report workflow, look at which packings are legal, let the
optimizer choose, and check the packed plan against the original.
Run with ``python notebooks/01_reportgen_walkthrough.py``.
"""

# %%
from mrpack import search
from mrpack.cli import format_report
from mrpack.executor import compare_outputs, run_plan
from mrpack.workloads import generate

plan, inputs = generate("reportgen", scale=10_000, seed=0)
print(sorted(plan.jobs), "reading", plan.base_datasets())

# %%
# Every check of the first unit, with its verdict.
first = search.explain(plan)["units"][0]
for c in first["checks"]:
    print(f"{c['transform']:<14} {','.join(c['target']):<8} {c['status']:<15} {c['reason']}")

# %%
# Vertical packing over the whole plan first, then horizontal.
params = search.RrsParams(total_budget=60, seed=0)
packed, report = search.optimize(plan, plan.cluster, params)
print(format_report(report))

# %%
# The packed plan must produce the same records for every dataset both plans keep.
before, _ = run_plan(plan, inputs=inputs)
after, _ = run_plan(packed, inputs=inputs)
shared = set(plan.datasets) & set(packed.datasets)
res = compare_outputs({d: before[d] for d in shared if d in before}, {d: after[d] for d in shared if d in after})
print("jobs:", sorted(packed.jobs))
print("outputs equal:", res.equal)

# %%
# The report is enough to rebuild the plan.
print("replay matches:", search.replay_report(plan, report).to_dict() == packed.to_dict())
