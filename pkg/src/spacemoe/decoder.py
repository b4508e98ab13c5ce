"""Profile-grouped enhancement decoder.

A per-species linear head produces base predictions. Tracks are split by
assay type, each block is refined by K shared experts mixed through two gates
(group-level from species and pooled sequence context, expert-level from the
block's own base prediction), recomposed to the original track order and added
back onto the base.
"""
from __future__ import annotations

import csv
import math

import numpy as np

from . import tensor as T


def init_decoder(cfg, schema, rng, dtype=np.float32):
    d, K, R, H, w = cfg.d_h, cfg.K, cfg.R, cfg.expert_hidden, cfg.expert_kernel
    if not 1 <= cfg.k_dec <= K:
        raise ValueError(f"k_dec={cfg.k_dec} must lie in [1, {K}]")
    if R < 1:
        raise ValueError("R must be >= 1")
    if w % 2 == 0:
        raise ValueError("decoder expert kernel width must be odd")
    L = cfg.seq_len // cfg.bin_size
    s = 1.0 / math.sqrt(d)
    p = {}
    for m in range(schema.n_species):
        p[f"dec.head{m}.w"] = rng.normal(0, s, (d, schema.n_tracks(m))).astype(dtype)
        p[f"dec.head{m}.b"] = np.zeros(schema.n_tracks(m), dtype)
    for q in range(schema.Q):
        p[f"dec.q{q}.gs.w"] = rng.normal(0, s, (d, R)).astype(dtype)
        p[f"dec.q{q}.gs.b"] = np.zeros(R, dtype)
        p[f"dec.q{q}.gy.w"] = rng.normal(0, s, (d, R)).astype(dtype)
        p[f"dec.q{q}.gy.b"] = np.zeros(R, dtype)
        p[f"dec.q{q}.sel.w"] = rng.normal(0, 1.0 / math.sqrt(L), (R, L, K)).astype(dtype)
        p[f"dec.q{q}.sel.b"] = np.zeros((R, 1, K), dtype)
    p["dec.experts.w1"] = rng.normal(0, 1.0 / math.sqrt(w), (K * H, 1, w)).astype(dtype)
    p["dec.experts.b1"] = np.zeros(K * H, dtype)
    # zero output layer: the decoder starts as o_final == o_base
    p["dec.experts.w2"] = np.zeros((K, H, 1), dtype)
    p["dec.experts.b2"] = np.zeros((K, 1, 1), dtype)
    return p


def base_head(y, species_id, params):
    """[B, L, d_h] -> [B, C_m, L]."""
    key = f"dec.head{species_id}.w"
    if key not in params:
        raise ValueError(f"no output head for species {species_id}")
    o = T.linear(y, params[key], params[f"dec.head{species_id}.b"])
    return T.transpose(o, (0, 2, 1))


def categorize(o_base, schema, species_id):
    """Split track rows of [B, C, L] into one block per assay type (Q blocks)."""
    C = o_base.shape[1]
    if C != schema.n_tracks(species_id):
        raise ValueError(f"base prediction has {C} tracks, schema lists {schema.n_tracks(species_id)}")
    return [T.take(o_base, idx, axis=1) for idx in schema.blocks(species_id)]


def recompose(blocks, schema, species_id):
    """Inverse of ``categorize``: concatenate blocks and restore original track order."""
    present = [b for b in blocks if b.shape[1] > 0]
    return T.take(T.concat(present, axis=1), schema.psi(species_id), axis=1)


def group_gate(e, y_pooled, params, q):
    """Group weights over R groups from the species embedding and pooled sequence state."""
    logits = T.add(T.linear(e, params[f"dec.q{q}.gs.w"], params[f"dec.q{q}.gs.b"]),
                   T.linear(y_pooled, params[f"dec.q{q}.gy.w"], params[f"dec.q{q}.gy.b"]))
    return T.softmax(logits, axis=-1)


def expert_gate(o_q, params, q, k_dec, noise_sigma=0.0, rng=None):
    """Expert weights per group: [B, d_q, L] -> [R, B, K].

    Features are the track-mean of the block, mapped L -> K per group.
    """
    pooled = T.mean(o_q, axis=1)
    B, L = pooled.shape
    logits = T.add(T.matmul(T.reshape(pooled, (1, B, L)), params[f"dec.q{q}.sel.w"]),
                   params[f"dec.q{q}.sel.b"])
    if noise_sigma > 0 and rng is not None:
        logits = T.add(logits, rng.normal(0.0, noise_sigma, logits.shape).astype(logits.dtype))
    return T.topk_softmax(logits, k_dec)


def expert_outputs(o_q, params):
    """Apply every shared expert to each track row independently: [B, d, L] -> [K, B, d, L]."""
    B, d, L = o_q.shape
    K, H, _ = params["dec.experts.w2"].shape
    w1 = params["dec.experts.w1"]
    z = T.reshape(o_q, (B * d, 1, L))
    a = T.gelu(T.conv1d(z, w1, params["dec.experts.b1"], pad=w1.shape[-1] // 2))
    a = T.reshape(T.transpose(T.reshape(a, (B * d, K, H, L)), (1, 0, 3, 2)), (K, B * d * L, H))
    out = T.add(T.matmul(a, params["dec.experts.w2"]), params["dec.experts.b2"])
    return T.reshape(out, (K, B, d, L))


def combine_gates(group_w, expert_w):
    """Combined expert weight Σ_r Ĝ_r · G_r: ([B, R], [R, B, K]) -> [B, K]."""
    gw = T.reshape(T.transpose(group_w, (1, 0)), (group_w.shape[1], group_w.shape[0], 1))
    return T.tsum(T.mul(gw, expert_w), axis=0)


def enhance(o_q, group_w, expert_w, params):
    """Dual-gated mixture of the shared experts on one block."""
    E = expert_outputs(o_q, params)
    W = combine_gates(group_w, expert_w)
    K, B = W.shape[1], W.shape[0]
    Wk = T.reshape(T.transpose(W, (1, 0)), (K, B, 1, 1))
    return T.tsum(T.mul(Wk, E), axis=0)


def decoder_forward(y, e, species_id, schema, params, cfg, train=False, rng=None, record=None):
    """Final prediction o_base + Ψ(enhanced blocks), shape [B, C_m, L].

    ``record``, if a list, receives one (q, combined weights [B, K]) entry per
    non-empty block for routing exports.
    """
    o_base = base_head(y, species_id, params)
    y_pooled = T.mean(y, axis=1)
    B = y.shape[0]
    e_b = T.broadcast_to(T.reshape(e, (1, -1)), (B, e.shape[-1]))
    noise = cfg.noise_sigma if train else 0.0
    enhanced = []
    for q, o_q in enumerate(categorize(o_base, schema, species_id)):
        if o_q.shape[1] == 0:
            enhanced.append(o_q)
            continue
        gq = group_gate(e_b, y_pooled, params, q)
        eq = expert_gate(o_q, params, q, cfg.k_dec, noise, rng)
        enhanced.append(enhance(o_q, gq, eq, params))
        if record is not None:
            record.append((q, combine_gates(gq, eq).data.copy()))
    return T.add(o_base, recompose(enhanced, schema, species_id))


def export_profile_routing(records, schema, K, path=None):
    """Per assay type f[q][k]: mean combined expert weight over all evaluated samples, row-normalised."""
    if not records:
        raise ValueError("empty evaluation pass")
    sums = np.zeros((schema.Q, K))
    n = np.zeros(schema.Q)
    for q, w in records:
        sums[q] += np.asarray(w).sum(axis=0)
        n[q] += np.asarray(w).shape[0]
    rows = []
    for q, a in enumerate(schema.assay_types):
        if n[q] == 0:
            continue
        f = sums[q] / n[q]
        rows.append([a] + (f / f.sum()).tolist())
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["profile_type"] + [f"expert_{k}" for k in range(K)])
            for r in rows:
                w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    return rows
