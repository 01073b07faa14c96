"""
Partition pruning, and a packing that does not pay
==================================================

First, range-partition an order summary so a filtered consumer reads one
partition. Then compare the analytical and job-count cost models on a small
post-processing workflow where packing two jobs slows things down.
"""

# %%
from mrpack import search
from mrpack import transforms as T
from mrpack.executor import record_bytes, run_plan
from mrpack.ir import PartitionSpec
from mrpack.workloads import generate

plan, inputs = generate("logicalsplit", seed=0)
spec = PartitionSpec("range", ["orderid"], ["orderid"], list(range(100, 1000, 100)))
pruned = T.apply(plan, T.partition_application(plan, "J1", spec, ["J2"]).application)
print("J2 reads", pruned.jobs["J2"].input_selection)

out, trace = run_plan(pruned, inputs=inputs)
total = sum(record_bytes(k, v) for k, v in out["D1"].records())
print("bytes read by J2:", trace.jobs["J2"].bytes_read, "of", total)

# %%
pp, _ = generate("postproc", seed=0)
params = search.RrsParams(total_budget=60, seed=0)
for model in ("analytical", "jobcount"):
    packed, rep = search.optimize(pp, pp.cluster, params, model)
    print(f"{model:<11} -> {sorted(packed.jobs)}")
