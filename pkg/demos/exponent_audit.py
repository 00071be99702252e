"""Print the exponent audit for a few dimensions and the stage threshold.

Run with ``python3 demos/exponent_audit.py``.
"""
from cforge.audit import audit_exponents, stage_index_threshold

for n, eps in [(3, 0.02), (4, 0.01), (5, 0.005)]:
    rep = audit_exponents(n, eps)
    print(rep.table())
    b = rep.binding()
    print(f"binding check: {b.id} (margin {b.margin:.3e})")
    print(f"smallest stage index past the threshold: {stage_index_threshold((n, eps, rep.inputs['N_star']))}\n")
