import numpy as np

from filterxl import tensor as tn


def numeric_grad(f, arr, h=1e-6):
    """Central differences of the scalar function ``f()`` w.r.t. entries of ``arr``."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def grad_of(f, *params):
    for p in params:
        p.grad = None
    with tn.Tape() as tape:
        loss = f()
    tape.backward(loss)
    return [p.grad for p in params]
