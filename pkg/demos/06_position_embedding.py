"""
Sinusoidal positions and the learned position term
==================================================

Each time node gets a sinusoidal code. Two learned ``M x M`` maps project
the code of a historical node and that of the current node, and their inner
product is added to the node's relation weight. The term depends on
position only, never on the sample.
"""

import numpy as np

from dptrn import DPTRN, ModelConfig
from dptrn.interpret import increasing_fraction
from dptrn.model import position_table

table = position_table(6, 4)
with np.printoptions(precision=3, suppress=True):
    print(table)

###############################################################################
# With random projections the term has no particular trend. Training can
# make it grow toward the current node; the fraction of increasing steps
# summarizes that.

model = DPTRN(ModelConfig(T=12, M=4, C=2), seed=0)
rng = np.random.default_rng(0)
model.p_query[...] = rng.normal(size=(4, 4))
model.p_key[...] = rng.normal(size=(4, 4))
dpe = model.dpe_vector()
with np.printoptions(precision=3, suppress=True):
    print(dpe)
print("increasing fraction:", increasing_fraction(dpe))

###############################################################################
# Two different windows get exactly the same position term.

model.eval()
_, report = model.forward(rng.normal(size=(2, 12, 4)))
print("identical across samples:", np.array_equal(report.dpe[0], report.dpe[1]))
