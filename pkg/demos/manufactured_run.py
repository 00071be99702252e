"""Run one stage on a manufactured deficit and print the logged deficits.

The target metric is the flat metric plus ``0.05 h_star``. The run is in
relaxed mode, so every inequality is measured and logged, not enforced.

Run with ``python3 demos/manufactured_run.py``.
"""
import math

import numpy as np

from cforge.fieldlab import GridDomain, ImmersionField, MetricField, pullback_metric
from cforge.stage import StageOptions, base_for_ratio, deficit_scale_for, make_global_params, run
from cforge.symcore import build_basis

n, eps, delta1 = 3, 0.2, 0.05
basis = build_basis(n)
dom = GridDomain(n, 2 * np.pi, 32)
u = ImmersionField.inclusion(dom)
g = pullback_metric(u) + MetricField.constant(dom, basis.h_star) * delta1
a = base_for_ratio(n, eps, 0.3)
gp = make_global_params(n, eps, deficit_scale_for(n, eps, a, delta1), a)
opts = StageOptions(ladder=(1, 1, 2, 3, 4 * math.sqrt(2)))
res = run(g, u, gp, 1, opts, initialize=False)
print("deficits by stage:", [f"{d:.4g}" for d in res.deficits])
for rec in res.trace.records:
    print(f"{rec['step']:<20} {rec['kind']:<14} residual_sup={rec['residual_sup']}")
