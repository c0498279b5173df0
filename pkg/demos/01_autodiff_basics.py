"""Tour of the tensor core: build a computation, run it backward, and verify
the gradients against finite differences."""

import numpy as np

from setloc.gradcheck import grad_check
from setloc.tensor import Tensor, backward, matmul, relu, softmax, tsum

rng = np.random.default_rng(0)

# forward: a tiny two-layer network squashed to a scalar
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w1 = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
w2 = Tensor(rng.normal(size=(5, 1)), requires_grad=True)

hidden = relu(matmul(x, w1))
loss = tsum(matmul(hidden, w2))
print(f"loss = {loss.item():.4f}")

# reverse pass populates .grad on every leaf that asked for it
backward(loss)
print("x.grad row 0:", np.round(x.grad[0], 4))
print("w2.grad.T   :", np.round(w2.grad.T, 4))

# the finite-difference oracle confirms the analytic gradients
err = grad_check(lambda t: tsum(matmul(relu(matmul(t, Tensor(w1.data))), Tensor(w2.data))), x)
print(f"max relative error vs central differences: {err:.2e}")

# softmax rows always sum to one, no matter how extreme the logits
probs = softmax(Tensor([[1e3, 0.0, -1e3], [3.0, 2.0, 1.0]]), axis=1)
print("softmax row sums:", probs.data.sum(axis=1))
