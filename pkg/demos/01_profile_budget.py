"""
Counting parameters and FLOPs
=============================

The profiler works from the configuration alone: no arrays are allocated.
Here we size the model for a 52-sensor, 21-class plant with windows of 100
time nodes, then check the closed form against a model that is actually
built.
"""

from dptrn import DPTRN, ModelConfig, profile

cfg = ModelConfig(T=100, M=52, C=21)
report = profile(cfg)
print(report.table())

###############################################################################
# The relation unit dominates the compute because it runs once per
# historical node, yet its weights are shared, so the parameter count does
# not move with the window length.

for T in (10, 100, 1000):
    r = profile(ModelConfig(T=T, M=52, C=21))
    print(f"T={T:5d}  params={r.params_total:>9,}  flops={r.flops_total:>13,}")

###############################################################################
# Cross-check against the arrays a real model allocates.

model = DPTRN(cfg)
print("allocated learnable values:", model.num_params())
assert model.num_params() == report.params_total
