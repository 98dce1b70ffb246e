"""
Checking backpropagation with finite differences
================================================

Every layer has a hand-written backward pass. A central difference on the
cross-entropy loss gives an independent estimate for each parameter, and
the two should agree to a few parts in a million.
"""

import copy

import numpy as np

from dptrn import DPTRN, ModelConfig
from dptrn.core import softmax_cross_entropy

rng = np.random.default_rng(0)
cfg = ModelConfig(T=4, M=3, C=3, relation_hidden=(8, 4), classifier_hidden=(8, 6, 4))
model = DPTRN(cfg, seed=1)
model.train()
x = rng.normal(size=(8, 4, 3))
y = rng.integers(0, 3, size=8)

###############################################################################
# Dropout draws a fresh mask on every forward pass. Deep-copying the model
# before each evaluation replays the same random stream, so the loss is a
# deterministic function of the parameters.


def loss(m):
    return softmax_cross_entropy(copy.deepcopy(m).forward(x)[0], y)[0]


work = copy.deepcopy(model)
work.zero_grad()
work.loss_and_backward(x, y)

h = 1e-5
print(f"{'tensor':<26}{'worst rel. error':>18}")
for name, (value, _) in model.params().items():
    grad = work.params()[name][1]
    worst = 0.0
    for idx in list(np.ndindex(value.shape))[:20]:
        old = value[idx]
        value[idx] = old + h
        up = loss(model)
        value[idx] = old - h
        down = loss(model)
        value[idx] = old
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx]), 1e-6))
    print(f"{name:<26}{worst:>18.2e}")
