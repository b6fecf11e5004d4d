"""A two-layer network built from the autodiff primitives, checked against finite differences.

Everything is a 2-D float64 matrix with examples as rows.

Run: python3 demos/01_autodiff_gradcheck.py
"""
import numpy as np

from shakg.autodiff import (
    AdamState, ParameterStore, adam_step, add_broadcast_column, backward, constant,
    grad_check, matmul, mul, scalar_mul, tanh,
)

params = ParameterStore(rng_seed=3)
w1 = params.add("w1", 4, 8)
b1 = params.add("b1", 1, 8, init="zeros")
w2 = params.add("w2", 8, 1)

rng = np.random.default_rng(0)
x = constant(rng.normal(size=(16, 4)))
y = np.sin(x.numpy().sum(axis=1, keepdims=True))
ones = constant(np.full((1, 16), 1.0))


def loss():
    h = tanh(add_broadcast_column(matmul(x, w1), b1))
    err = matmul(h, w2) - constant(y)
    # a row of ones sums over examples without a transpose
    return scalar_mul(matmul(ones, mul(err, err)), 1 / 16)


print("max relative gradient error:", grad_check(loss, params))

state = AdamState()
for step in range(301):
    params.zero_grad()
    value = loss()
    adam_step(params, backward(value, params), state, lr=0.01)
    if step % 100 == 0:
        print(f"step {step:3d}  loss {value.item():.4f}")
