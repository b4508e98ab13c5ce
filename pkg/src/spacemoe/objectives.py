"""Poisson likelihood, expert-species mutual information and the combined loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

RATE_EPS = 1e-6


def rate(o_final):
    """Positive Poisson rate from unconstrained predictions."""
    return T.add(T.softplus(o_final), RATE_EPS)


def poisson_nll(p, t):
    """Mean of p - t ln p; entries with t == 0 contribute p only."""
    p = T.as_tensor(p)
    t = np.asarray(t.data if isinstance(t, T.Tensor) else t, dtype=p.dtype)
    if p.shape != t.shape:
        raise T.ShapeError(f"prediction shape {p.shape} != target shape {t.shape}")
    pos = t > 0
    if np.any(p.data[pos] <= 0):
        raise T.DomainError("non-positive rate where target is positive")
    n = p.data.size
    logp = np.log(np.where(pos, p.data, 1.0))
    value = np.sum(p.data - np.where(pos, t * logp, 0.0)) / n
    safe_p = np.where(pos, p.data, 1.0)
    grad = (1.0 - np.where(pos, t / safe_p, 0.0)) / n
    return T.make_node(np.asarray(value, dtype=p.dtype), (p,), lambda g: (g * grad,))


def entropy(P, axis=None):
    """-Σ P ln P with 0 ln 0 = 0."""
    P = T.as_tensor(P)
    pos = P.data > 0
    logp = np.log(np.where(pos, P.data, 1.0))
    value = -np.sum(np.where(pos, P.data * logp, 0.0), axis=axis)
    grad = np.where(pos, -(logp + 1.0), 0.0)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (g * grad,)

    return T.make_node(np.asarray(value, dtype=P.dtype), (P,), bw)


def _check_joint(P):
    tol = max(1e-9, 100 * np.finfo(P.dtype).eps)
    if np.any(P.data < 0):
        raise ValueError("joint distribution has negative mass")
    total = P.data.sum()
    if abs(total - 1.0) > tol:
        raise ValueError(f"joint distribution sums to {total}, not 1")


def mutual_information(P):
    """MI(S;E) = H(S) + H(E) - H(S,E) in nats for a joint [M, N] distribution."""
    P = T.as_tensor(P)
    _check_joint(P)
    hs = entropy(T.tsum(P, axis=1))
    he = entropy(T.tsum(P, axis=0))
    return T.sub(T.add(hs, he), entropy(P))


@dataclass
class LossReport:
    poisson: T.Tensor
    mi_per_layer: list
    total: T.Tensor
    alpha: float

    def as_dict(self):
        return {"poisson": self.poisson.data.item(),
                "mi": [m.data.item() for m in self.mi_per_layer],
                "total": self.total.data.item(),
                "alpha": self.alpha}


def total_loss(p, t, traces, alpha):
    """Poisson NLL minus alpha times the summed per-layer MI.

    ``p`` and ``t`` may be lists (one entry per micro-batch of a window); the
    Poisson term is then the mean over micro-batches.
    """
    if isinstance(p, (list, tuple)):
        terms = [poisson_nll(pi, ti) for pi, ti in zip(p, t)]
        pois = T.mul(terms[0] if len(terms) == 1 else _sum(terms), 1.0 / len(terms))
    else:
        pois = poisson_nll(p, t)
    for tr in traces:
        if np.any(tr.counts == 0):
            raise ValueError("MI window must contain tokens from every species; "
                             f"got token counts {tr.counts.tolist()}")
    mis = [mutual_information(tr.joint()) for tr in traces]
    total = pois
    if mis:
        total = T.sub(pois, T.mul(_sum(mis), alpha))
    return LossReport(pois, mis, total, alpha)


def _sum(ts):
    out = ts[0]
    for x in ts[1:]:
        out = T.add(out, x)
    return out
