"""
A tour of the autodiff engine
=============================

Every layer in the model is built from a handful of reverse-mode ops on
numpy arrays. Here we build a small expression, backpropagate through it and
compare the result against central finite differences.
"""
import numpy as np

from spacemoe import tensor as T
from spacemoe.gradcheck import check, run_all

rng = np.random.default_rng(0)

# a tiny two-layer net with a softplus rate, like the model's output head
x = T.Tensor(rng.normal(size=(5, 3)))
w1 = T.parameter(rng.normal(size=(3, 4)), dtype=np.float64)
w2 = T.parameter(rng.normal(size=(4, 2)), dtype=np.float64)


def loss():
    h = T.gelu(T.matmul(x, w1))
    return T.mean(T.softplus(T.matmul(h, w2)))


T.backward(loss())
print("loss          ", loss().data.item())
print("dL/dw2 (auto) \n", w2.grad)

# central differences on every coordinate of w2
fd = np.zeros_like(w2.data)
h = 1e-5
for idx in np.ndindex(*w2.shape):
    old = w2.data[idx]
    w2.data[idx] = old + h
    up = loss().data.item()
    w2.data[idx] = old - h
    dn = loss().data.item()
    w2.data[idx] = old
    fd[idx] = (up - dn) / (2 * h)
print("dL/dw2 (fd)   \n", fd)
print("max abs diff  ", np.abs(fd - w2.grad).max())

# the library helper does the same with sampled coordinates and a relative error
err, skipped = check(loss, [w1, w2], max_coords=6, rng=rng)
print("helper max relative error", err)

# top-k softmax keeps exactly k entries; ties go to the lower index
g = T.topk_softmax(T.Tensor(np.array([1.0, 3.0, 3.0, 0.5])), 2).data
print("top-2 gates   ", g)

# every op plus the end-to-end model, as `spacemoe gradcheck` runs it
for name, err, _ in run_all(seed=0, max_coords=3)[-3:]:
    print(f"{name:28s} {err:.2e}")
