#!/usr/bin/env python3
# Reverse-mode autodiff on numpy arrays: build a small graph, backprop,
# and compare against central finite differences.

import numpy as np

from overflow import autodiff as ad
from overflow.autodiff import Tensor
from overflow.layers import lstm_cell

rng = np.random.default_rng(0)

# a leaf used twice accumulates its gradient
x = Tensor(3.0, requires_grad=True)
ad.backward(x * x + x)
print("d/dx (x^2 + x) at 3 =", x.grad)  # 7

# logsumexp is stable where the naive formula overflows
print("logsumexp([1000, 1000]) =", ad.logsumexp([1000.0, 1000.0]).item())

# gradient check of one LSTM step, summed hidden state as the loss
shapes = [(3,), (4,), (4,), (3, 16), (4, 16), (16,)]
params = [Tensor(rng.normal(0, 0.5, s), requires_grad=True) for s in shapes]
loss = lambda: ad.sum(lstm_cell(*params)[0])  # noqa: E731
ad.backward(loss())
numeric = ad.numerical_gradient(lambda: loss().item(), params)
for name, p, g in zip(["x", "h", "c", "W_x", "W_h", "b"], params, numeric):
    print(f"{name:4s} relative error {ad.relative_error(p.grad, g):.2e}")

# no_grad skips graph construction entirely
with ad.no_grad():
    y = ad.tanh(params[3]) @ np.ones((16, 2))
print("recorded under no_grad:", y.requires_grad)
