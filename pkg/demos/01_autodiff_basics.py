"""
Reverse-mode autodiff on numpy arrays
=====================================

Build a small graph, backpropagate, and compare against central differences.
"""

import numpy as np

from fedpeft import tensor as T
from fedpeft.tensor import SgdConfig, Tensor

rng = np.random.default_rng(0)

# leaves that require gradients; 64-bit keeps the finite-difference check sharp
w = Tensor(rng.standard_normal((4, 3)), requires_grad=True, dtype=np.float64)
b = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
x = Tensor(rng.standard_normal((5, 4)), dtype=np.float64)
y = np.array([0, 2, 1, 1, 0])

loss = T.cross_entropy_loss(T.gelu(x @ w + b), y)
print("loss =", loss.item())
print("ops on the tape:", [t.op for t in T.tape(loss)])

T.backward(loss)
print("dL/db =", b.grad)


def loss_at(bias):
    with T.no_grad():
        return T.cross_entropy_loss(T.gelu(x @ w + Tensor(bias)), y).item()


eps = 1e-6
numeric = np.array([(loss_at(b.data + eps * e) - loss_at(b.data - eps * e)) / (2 * eps)
                    for e in np.eye(3)])
print("central differences =", numeric)
print("max abs difference  =", np.abs(numeric - b.grad).max())

# one plain SGD step: theta <- theta - lr * (g + wd * theta)
T.sgd_step([w, b], SgdConfig(learning_rate=0.5, weight_decay=1e-4))
print("loss after one step =", T.cross_entropy_loss(T.gelu(x @ w + b), y).item())
