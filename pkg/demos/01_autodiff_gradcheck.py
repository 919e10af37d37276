"""Reverse-mode autodiff on column-layout tensors, checked against finite differences.

Run:  python3 demos/01_autodiff_gradcheck.py
"""

import numpy as np

from filterxl import tensor as tn
from filterxl.tensor import Tensor

rng = np.random.default_rng(0)

# A tiny two-layer network on a 4x3 batch of columns.
x = Tensor(rng.normal(size=(4, 3)))
w1 = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
b1 = Tensor(np.zeros((5, 1)), requires_grad=True)
w2 = Tensor(rng.normal(size=(2, 5)), requires_grad=True)


def loss(params):
    w1, b1, w2 = params
    hidden = tn.gelu(tn.linear(w1, x, b1))
    logits = tn.transpose(tn.matmul(w2, hidden))  # one row per example
    return tn.cross_entropy(logits, [0, 1, 1])


# Operations are recorded only while a tape is active.
with tn.Tape():
    value = loss([w1, b1, w2])
tn.backward(value)
print(f"loss = {value.item():.6f}")
print("dL/dW2 =\n", np.round(w2.grad, 5))

# The same check the test suite runs on every primitive.
err = tn.finite_diff_check(loss, [w1, b1, w2])
print(f"largest relative gradient error vs central differences: {err:.2e}")

# Inference does not need a tape.
with tn.no_grad():
    probe = tn.softmax_rows(Tensor([[1.0, 2.0, 3.0]]))
print("softmax([1,2,3]) =", np.round(probe.data, 4), "requires_grad:", probe.requires_grad)
