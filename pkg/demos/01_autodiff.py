"""A tour of the tensor engine: build a tiny computation, differentiate it,
and confirm the gradients against central finite differences.
"""

import numpy as np

from m2i2.tensor import Tensor, layer_norm, softmax

rng = np.random.default_rng(0)

# A two-layer toy network with a softmax readout, all in float64.
x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
w1 = Tensor(rng.normal(size=(8, 16)) * 0.1, requires_grad=True)
w2 = Tensor(rng.normal(size=(16, 3)) * 0.1, requires_grad=True)
g = Tensor(np.ones(16), requires_grad=True)
b = Tensor(np.zeros(16), requires_grad=True)

h = layer_norm((x @ w1).gelu(), g, b)
probs = softmax(h @ w2, axis=-1)
loss = -(probs[np.arange(4), np.array([0, 1, 2, 0])]).log().mean()
loss.backward()
print(f"loss = {float(loss.data):.6f}")
print(f"dloss/dw2 norm = {np.linalg.norm(w2.grad):.6f}")

# Finite-difference spot check on a handful of w1 entries.
eps = 1e-6
worst = 0.0
for idx in [(0, 0), (3, 7), (7, 15)]:
    orig = w1.data[idx]

    def f(v):
        w1.data[idx] = v
        h = layer_norm((x @ w1).gelu(), g, b)
        probs = softmax(h @ w2, axis=-1)
        return float(-(probs[np.arange(4), np.array([0, 1, 2, 0])]).log().mean().data)

    num = (f(orig + eps) - f(orig - eps)) / (2 * eps)
    w1.data[idx] = orig
    err = abs(num - w1.grad[idx]) / max(abs(num), 1e-12)
    worst = max(worst, err)
    print(f"w1{idx}: analytic {w1.grad[idx]:+.8f}  numeric {num:+.8f}  rel err {err:.2e}")
print(f"worst relative error: {worst:.2e}")
