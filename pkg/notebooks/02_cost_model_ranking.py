"""
Does the cost model rank subplans the way the executor does?
============================================================

Enumerate the first unit of the term-weighting workflow, estimate each
subplan on a cluster shaped like the in-process executor, time each one,
and compare the two rankings.
"""

# %%
import statistics
import time

import numpy as np

from mrpack import search
from mrpack.cost import estimate_plan
from mrpack.executor import run_plan
from mrpack.ir import ClusterSpec
from mrpack.workloads import generate

plan, inputs = generate("tfidf", seed=0)
local = ClusterSpec.local()
unit, _ = search.next_optimization_unit(plan)
subplans = search.enumerate_subplans(plan, unit)
print(len(subplans), "subplans for unit", unit.producers, "->", unit.consumers)

# %%
est, meas = [], []
for sp in subplans:
    est.append(estimate_plan(sp.result, local).total_seconds)
    runs = []
    for _ in range(5):
        t0 = time.perf_counter()
        run_plan(sp.result, inputs=inputs)
        runs.append(time.perf_counter() - t0)
    meas.append(statistics.median(runs))

order_est = np.argsort(est, kind="stable")
order_meas = np.argsort(meas, kind="stable")
for i, sp in enumerate(subplans):
    print(f"p{i + 1:<3} est {est[i]:.4f}s  measured {meas[i]:.4f}s  {' ; '.join(sp.signature())}")

# %%
# Only the ends of the ranking are expected to agree.
print("model best", order_est[0] + 1, "measured best", order_meas[0] + 1)
print("model worst", order_est[-1] + 1, "measured worst", order_meas[-1] + 1)
rho = np.corrcoef(np.argsort(order_est), np.argsort(order_meas))[0, 1]
print(f"rank correlation {rho:.2f}")
