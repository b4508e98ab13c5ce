"""
Species-aware routing and the mutual-information bonus
======================================================

Every encoder layer routes each token to its top-k experts with a gate that is
specific to the species. Summing gate weights per (species, expert) gives a
joint distribution; its mutual information measures how much routing depends
on species. Maximizing it pushes the species apart onto different experts.
"""
import numpy as np

from spacemoe import tensor as T
from spacemoe.encoder import RoutingTrace, accumulate_trace
from spacemoe.objectives import entropy, mutual_information

# two extreme joints
independent = np.outer([0.5, 0.5], [0.25, 0.25, 0.25, 0.25])
separated = np.array([[0.25, 0.25, 0.0, 0.0], [0.0, 0.0, 0.25, 0.25]])
for name, P in [("independent", independent), ("separated", separated)]:
    print(f"{name:12s} MI = {mutual_information(T.Tensor(P)).data.item():.4f} nats")
print("upper bound ln 2 =", np.log(2))

# building the joint from raw gate weights
rng = np.random.default_rng(0)
trace = RoutingTrace(n_species=2, n_experts=4)
for m in range(2):
    logits = T.Tensor(rng.normal(size=(100, 4)) + 2.0 * np.eye(4)[2 * m])
    accumulate_trace(trace, T.topk_softmax(logits, 3), m)
print("\nper-species routing frequencies\n", trace.frequencies().round(3))
print("MI of the trace:", mutual_information(trace.joint()).data.item())

# gradient ascent on the MI through the gates of a toy layer
w = T.parameter(rng.normal(scale=0.1, size=(2, 4)), dtype=np.float64)
tokens = [np.ones((50, 1)), np.ones((50, 1))]
for it in range(201):
    w.grad = None
    tr = RoutingTrace(2, 4)
    for m in range(2):
        logits = T.matmul(T.Tensor(tokens[m]), T.reshape(w[m], (1, 4)))
        accumulate_trace(tr, T.topk_softmax(logits, 2), m)
    mi = mutual_information(tr.joint())
    T.backward(T.mul(mi, -1.0))
    w.data -= 0.5 * w.grad
    if it % 50 == 0:
        print(f"step {it:3d}  MI {mi.data.item():.4f}  H(S,E) {entropy(tr.joint()).data.item():.3f}")
