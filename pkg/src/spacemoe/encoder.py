"""Species-aware transformer encoder with a sparse cross-species mixture of experts.

A learned species token is prepended to the bin sequence; every layer runs
pre-norm self-attention followed by an MoE feed-forward whose gate is chosen
by species. Gate weights are accumulated per (species, expert) for the
mutual-information objective.
"""
from __future__ import annotations

import csv
import math

import numpy as np

from . import tensor as T


class RoutingTrace:
    """Joint gate mass J[m][n] and token counts for one encoder layer.

    ``J[m]`` stays a Tensor so the MI loss can backpropagate into the gates.
    """

    def __init__(self, n_species, n_experts):
        self.n_species = n_species
        self.n_experts = n_experts
        self.J = [None] * n_species
        self.counts = np.zeros(n_species, dtype=np.int64)

    def add(self, species_id, mass, n_tokens):
        self.J[species_id] = mass if self.J[species_id] is None else T.add(self.J[species_id], mass)
        self.counts[species_id] += n_tokens

    def merge(self, other):
        out = RoutingTrace(self.n_species, self.n_experts)
        for tr in (self, other):
            for m in range(self.n_species):
                if tr.J[m] is not None:
                    out.add(m, tr.J[m], 0)
            out.counts += tr.counts
        return out

    def mass(self):
        """Detached J as an [M, N] array (zeros for unseen species)."""
        out = np.zeros((self.n_species, self.n_experts))
        for m, j in enumerate(self.J):
            if j is not None:
                out[m] = j.data
        return out

    def joint(self):
        """P(S_m, E_n) as an [M, N] Tensor; requires every species to be present."""
        if np.any(self.counts == 0):
            missing = np.flatnonzero(self.counts == 0).tolist()
            raise ValueError(f"routing trace has no tokens for species {missing}")
        total = float(self.counts.sum())
        return T.div(T.stack(self.J, axis=0), total)

    def frequencies(self):
        if self.counts.sum() == 0:
            raise ValueError("empty routing trace")
        F = np.full((self.n_species, self.n_experts), np.nan)
        seen = self.counts > 0
        F[seen] = self.mass()[seen] / self.counts[seen, None]
        return F


def accumulate_trace(trace, gate_weights, species_id):
    """Add per-token gate weights [tokens, N] of one species into ``trace``."""
    gw = T.as_tensor(gate_weights)
    gw = T.reshape(gw, (-1, gw.shape[-1]))
    trace.add(species_id, T.tsum(gw, axis=0), gw.shape[0])
    return trace


def init_encoder(cfg, n_species, rng, dtype=np.float32):
    d, N = cfg.d_h, cfg.n_experts
    if d % cfg.n_heads:
        raise ValueError(f"d_h={d} is not divisible by n_heads={cfg.n_heads}")
    if not 1 <= cfg.top_k <= N:
        raise ValueError(f"top_k={cfg.top_k} must lie in [1, {N}]")
    L = cfg.seq_len // cfg.bin_size
    s = 1.0 / math.sqrt(d)

    def nrm(*shape, scale=s):
        return rng.normal(0, scale, shape).astype(dtype)

    p = {
        "enc.species_emb": nrm(n_species, d, scale=0.02 * math.sqrt(d) * s),
        "enc.pos": nrm(L + 1, d, scale=0.02 * math.sqrt(d) * s),
    }
    for l in range(cfg.n_layers):
        pre = f"enc.l{l}."
        for name in ("ln1", "ln2"):
            p[pre + name + ".g"] = np.ones(d, dtype)
            p[pre + name + ".b"] = np.zeros(d, dtype)
        for name in ("q", "k", "v", "o"):
            p[pre + f"attn.w{name}"] = nrm(d, d)
            p[pre + f"attn.b{name}"] = np.zeros(d, dtype)
        p[pre + "gate.w"] = nrm(n_species, d, N)
        p[pre + "gate.b"] = np.zeros((n_species, 1, N), dtype)
        p[pre + "experts.w1"] = nrm(N, d, 2 * d)
        p[pre + "experts.b1"] = np.zeros((N, 1, 2 * d), dtype)
        p[pre + "experts.w2"] = nrm(N, 2 * d, d, scale=1.0 / math.sqrt(2 * d))
        p[pre + "experts.b2"] = np.zeros((N, 1, d), dtype)
    p["enc.lnf.g"] = np.ones(d, dtype)
    p["enc.lnf.b"] = np.zeros(d, dtype)
    return p


def attention(x, params, prefix, n_heads, return_weights=False):
    """Multi-head scaled dot-product self-attention over [B, T, d]."""
    B, Tn, d = x.shape
    if d % n_heads:
        raise ValueError(f"d_h={d} is not divisible by n_heads={n_heads}")
    dh = d // n_heads

    def proj(name):
        y = T.linear(x, params[prefix + f"w{name}"], params[prefix + f"b{name}"])
        return T.transpose(T.reshape(y, (B, Tn, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    w = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(w, v), (0, 2, 1, 3)), (B, Tn, d))
    out = T.linear(ctx, params[prefix + "wo"], params[prefix + "bo"])
    return (out, w) if return_weights else out


def expert_outputs(u, params, prefix):
    """All N expert FFNs applied to tokens [tokens, d] -> [N, tokens, d]."""
    h = T.gelu(T.add(T.matmul(u, params[prefix + "w1"]), params[prefix + "b1"]))
    return T.add(T.matmul(h, params[prefix + "w2"]), params[prefix + "b2"])


def moe(u, species_id, params, prefix, k, noise_sigma=0.0, rng=None):
    """Sparse MoE on tokens [tokens, d]; returns (output [tokens, d], gate weights [tokens, N])."""
    logits = T.add(T.matmul(u, params[prefix + "gate.w"][species_id]),
                   params[prefix + "gate.b"][species_id])
    if noise_sigma > 0 and rng is not None:
        logits = T.add(logits, rng.normal(0.0, noise_sigma, logits.shape).astype(logits.dtype))
    gates = T.topk_softmax(logits, k)
    experts = expert_outputs(u, params, prefix + "experts.")
    weights = T.reshape(T.transpose(gates, (1, 0)), (gates.shape[1], gates.shape[0], 1))
    return T.tsum(T.mul(weights, experts), axis=0), gates


def encoder_forward(h, species_id, params, cfg, train=False, rng=None, traces=None):
    """Encode bin states [B, L, d_h] for one species.

    Returns ``(y, traces)`` with y of shape [B, L, d_h]: the species token is
    dropped from the output. ``traces`` is a list of per-layer RoutingTrace,
    created if not given, accumulating only the L sequence positions.
    """
    emb = params["enc.species_emb"]
    M = emb.shape[0]
    if not 0 <= species_id < M:
        raise ValueError(f"invalid species_id {species_id} for {M} species")
    B, L, d = h.shape
    if traces is None:
        traces = [RoutingTrace(M, cfg.n_experts) for _ in range(cfg.n_layers)]
    tok = T.broadcast_to(T.reshape(emb[species_id], (1, 1, d)), (B, 1, d))
    x = T.add(T.concat([tok, h], axis=1), params["enc.pos"])
    noise = cfg.noise_sigma if train else 0.0
    for l in range(cfg.n_layers):
        pre = f"enc.l{l}."
        a = T.layernorm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        x = T.add(x, attention(a, params, pre + "attn.", cfg.n_heads))
        u = T.layernorm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        u2 = T.reshape(u, (B * (L + 1), d))
        out, gates = moe(u2, species_id, params, pre, cfg.top_k, noise, rng)
        x = T.add(x, T.reshape(out, (B, L + 1, d)))
        seq_gates = T.reshape(gates, (B, L + 1, cfg.n_experts))[:, 1:, :]
        accumulate_trace(traces[l], seq_gates, species_id)
    x = T.layernorm(x, params["enc.lnf.g"], params["enc.lnf.b"])
    return x[:, 1:, :], traces


def export_routing_frequencies(traces, path=None, species_names=None):
    """Per-layer F[m][n] = J[m][n] / token_count[m]; optionally written as CSV."""
    if not traces or all(t.counts.sum() == 0 for t in traces):
        raise ValueError("empty routing trace")
    rows = []
    for l, tr in enumerate(traces):
        F = tr.frequencies()
        for m in range(tr.n_species):
            if tr.counts[m] == 0:
                continue
            name = species_names[m] if species_names else str(m)
            rows.append([l, name] + F[m].tolist())
    if path is not None:
        N = traces[0].n_experts
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "species"] + [f"expert_{n}" for n in range(N)])
            for r in rows:
                w.writerow(r[:2] + [repr(float(v)) for v in r[2:]])
    return rows
