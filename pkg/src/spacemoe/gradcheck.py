"""Central-difference gradient checks for every op and the end-to-end model (f64)."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import ProfileSchema, rng_for
from .decoder import decoder_forward, init_decoder
from .encoder import attention, encoder_forward, init_encoder
from .model import ModelConfig, SpaceModel
from .objectives import mutual_information, poisson_nll, rate, total_loss
from .stem import init_stem, stem_forward

H = 1e-5


def rel_err(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)), initial=0.0))


def _probe(fn, arr, idx, h):
    old = arr[idx]
    arr[idx] = old + h
    with T.record_selections() as sel_p:
        fp = fn().data.item()
    arr[idx] = old - h
    with T.record_selections() as sel_m:
        fm = fn().data.item()
    arr[idx] = old
    return (fp - fm) / (2 * h), sel_p, sel_m


def check(fn, tensors, h=H, max_coords=None, rng=None):
    """Worst relative error between autodiff and central differences of scalar ``fn()``.

    ``max_coords`` limits the probed entries per tensor (sampled with ``rng``).
    Probes whose ±h perturbation changes a discrete selection are skipped.
    """
    for t in tensors:
        t.grad = None
    with T.record_selections() as base_sel:
        out = fn()
    T.backward(out)
    worst, skipped = 0.0, 0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = np.arange(t.data.size)
        if max_coords is not None and flat.size > max_coords:
            flat = (rng or np.random.default_rng(0)).choice(flat, size=max_coords, replace=False)
        for f in flat:
            idx = np.unravel_index(f, t.data.shape)
            num, sp, sm = _probe(fn, t.data, idx, h)
            if sp != base_sel or sm != base_sel:
                skipped += 1
                continue
            worst = max(worst, rel_err(analytic[idx], num))
    return worst, skipped


def _weighted(out, w):
    return T.tsum(T.mul(out, w))


def _f64(rng, *shape, scale=1.0):
    return T.Tensor(rng.normal(0, scale, shape), requires_grad=True)


def tiny_config():
    """seq_len 256, d_h 16, L 8, N 4 / k 3, K 4 / R 2, two layers."""
    return ModelConfig(d_h=16, n_layers=2, n_heads=4, n_experts=4, top_k=3, noise_sigma=0.0,
                       K=4, R=2, k_dec=3, expert_kernel=3, expert_hidden=4,
                       bin_size=32, seq_len=256, stem_kernel=5, stem_channels=8)


def tiny_schema():
    return ProfileSchema.from_counts({"human": {"DNASE_ATAC": 2, "CAGE": 1},
                                      "mouse": {"DNASE_ATAC": 1, "CAGE": 2}})


def op_checks(seed=0):
    """Yield (name, fn, tensors) triples, one per differentiable op."""
    rng = rng_for(seed, "gradcheck")

    def unary(name, op, x):
        w = rng.normal(size=x.shape)
        return name, (lambda: _weighted(op(x), w)), [x]

    a, b = _f64(rng, 3, 4), _f64(rng, 4, 2)
    w32 = rng.normal(size=(3, 2))
    yield "matmul", (lambda: _weighted(T.matmul(a, b), w32)), [a, b]
    ba, bb = _f64(rng, 2, 3, 4), _f64(rng, 4, 5)
    wb = rng.normal(size=(2, 3, 5))
    yield "matmul_batched", (lambda: _weighted(T.matmul(ba, bb), wb)), [ba, bb]

    x, k, kb = _f64(rng, 2, 3, 9), _f64(rng, 4, 3, 3), _f64(rng, 4)
    wc = rng.normal(size=(2, 4, 9))
    yield "conv1d", (lambda: _weighted(T.conv1d(x, k, kb, pad=1), wc)), [x, k, kb]
    x2, k2 = _f64(rng, 2, 3, 10), _f64(rng, 2, 3, 2)
    wc2 = rng.normal(size=(2, 2, 5))
    yield "conv1d_stride2", (lambda: _weighted(T.conv1d(x2, k2, stride=2), wc2)), [x2, k2]

    for name, op in [("exp", T.exp), ("gelu", T.gelu), ("softplus", T.softplus),
                     ("sigmoid", T.sigmoid), ("neg", T.neg)]:
        yield unary(name, op, _f64(rng, 3, 5))
    pos = T.Tensor(rng.uniform(0.5, 2.0, (3, 5)), requires_grad=True)
    yield unary("log", T.log, pos)
    yield unary("power", lambda t: T.power(t, 3), _f64(rng, 3, 5))

    p, q = _f64(rng, 3, 5), _f64(rng, 5)
    wpq = rng.normal(size=(3, 5))
    yield "add", (lambda: _weighted(T.add(p, q), wpq)), [p, q]
    yield "sub", (lambda: _weighted(T.sub(p, q), wpq)), [p, q]
    yield "mul", (lambda: _weighted(T.mul(p, q), wpq)), [p, q]
    den = T.Tensor(rng.uniform(0.5, 2.0, 5), requires_grad=True)
    yield "div", (lambda: _weighted(T.div(p, den), wpq)), [p, den]

    s = _f64(rng, 3, 6)
    ws = rng.normal(size=(3, 6))
    yield "softmax", (lambda: _weighted(T.softmax(s, axis=-1), ws)), [s]
    yield "topk_softmax", (lambda: _weighted(T.topk_softmax(s, 3), ws)), [s]

    ln_x, g, be = _f64(rng, 2, 3, 8), _f64(rng, 8), _f64(rng, 8)
    wl = rng.normal(size=(2, 3, 8))
    yield "layernorm", (lambda: _weighted(T.layernorm(ln_x, g, be), wl)), [ln_x, g, be]

    mp = _f64(rng, 2, 4, 6)
    wmp = rng.normal(size=(2, 6))
    yield "mean_pool", (lambda: _weighted(T.mean_pool(mp, axis=1), wmp)), [mp]
    mx = _f64(rng, 2, 3, 8)
    wm = rng.normal(size=(2, 3, 4))
    yield "maxpool1d", (lambda: _weighted(T.maxpool1d(mx, 2), wm)), [mx]

    tk = _f64(rng, 3, 4)
    perm = np.array([2, 0, 1])
    wt = rng.normal(size=(3, 4))
    yield "take", (lambda: _weighted(T.take(tk, perm, axis=0), wt)), [tk]
    c1, c2 = _f64(rng, 2, 3), _f64(rng, 2, 1)
    wcat = rng.normal(size=(2, 4))
    yield "concat", (lambda: _weighted(T.concat([c1, c2], axis=1), wcat)), [c1, c2]

    pr = T.Tensor(rng.uniform(0.5, 3.0, (4, 5)), requires_grad=True)
    tgt = rng.poisson(2.0, (4, 5)).astype(np.float64)
    yield "poisson_nll", (lambda: poisson_nll(pr, tgt)), [pr]
    logits = _f64(rng, 3, 4)
    yield "mutual_information", (lambda: mutual_information(T.softmax(T.reshape(logits, (1, 12)), -1)
                                                           .reshape(3, 4))), [logits]

    # attention on a 2-token instance
    d, heads = 8, 2
    ap = {f"attn.w{n}": _f64(rng, d, d, scale=0.4) for n in "qkvo"}
    ap.update({f"attn.b{n}": _f64(rng, d, scale=0.1) for n in "qkvo"})
    ax = _f64(rng, 1, 2, d)
    wa = rng.normal(size=(1, 2, d))
    yield "attention", (lambda: _weighted(attention(ax, ap, "attn.", heads), wa)), [ax] + list(ap.values())


def component_checks(seed=0):
    """Stem, encoder and decoder on the tiny configuration."""
    rng = rng_for(seed, "gradcheck.components")
    cfg, schema = tiny_config(), tiny_schema()
    sp = {k: T.parameter(v, dtype=np.float64) for k, v in init_stem(cfg, rng, np.float64).items()}
    x = T.Tensor(rng.normal(size=(2, 4, cfg.seq_len)), requires_grad=True)
    w = rng.normal(size=(2, cfg.L, cfg.d_h))
    yield "stem", (lambda: _weighted(stem_forward(x, sp, cfg.bin_size), w)), [x] + list(sp.values())

    ep = {k: T.parameter(v, dtype=np.float64) for k, v in init_encoder(cfg, 2, rng, np.float64).items()}
    h = _f64(rng, 2, cfg.L, cfg.d_h)
    we = rng.normal(size=(2, cfg.L, cfg.d_h))
    yield "encoder", (lambda: _weighted(encoder_forward(h, 1, ep, cfg)[0], we)), [h] + list(ep.values())

    dp = {k: T.parameter(v, dtype=np.float64) for k, v in init_decoder(cfg, schema, rng, np.float64).items()}
    # non-zero expert output layer so the enhancement path is exercised
    dp["dec.experts.w2"].data[...] = rng.normal(0, 0.5, dp["dec.experts.w2"].shape)
    dp["dec.experts.b2"].data[...] = rng.normal(0, 0.1, dp["dec.experts.b2"].shape)
    y = _f64(rng, 2, cfg.L, cfg.d_h)
    e = _f64(rng, cfg.d_h)
    wd = rng.normal(size=(2, schema.n_tracks(0), cfg.L))
    yield "decoder", (lambda: _weighted(decoder_forward(y, e, 0, schema, dp, cfg), wd)), \
        [y, e] + list(dp.values())


def model_check(seed=0, alpha=0.01):
    """End-to-end: stem + 2-layer MoE encoder + dual-gated decoder + combined loss."""
    rng = rng_for(seed, "gradcheck.model")
    cfg, schema = tiny_config(), tiny_schema()
    model = SpaceModel(cfg, schema, seed=seed, dtype=np.float64)
    model.params["dec.experts.w2"].data[...] = rng.normal(0, 0.5, model.params["dec.experts.w2"].shape)
    batches = []
    for m in range(schema.n_species):
        codes = rng.integers(0, 4, size=(2, cfg.seq_len))
        x = np.zeros((2, 4, cfg.seq_len))
        np.put_along_axis(x, codes[:, None, :], 1.0, axis=1)
        t = rng.poisson(1.5, size=(2, schema.n_tracks(m), cfg.L)).astype(np.float64)
        batches.append((m, x, t))

    def loss():
        traces = model.new_traces()
        ps, ts = [], []
        for m, x, t in batches:
            o, traces = model.forward(x, m, train=False, traces=traces)
            ps.append(rate(o))
            ts.append(t)
        return total_loss(ps, ts, traces, alpha).total

    return "model_end_to_end", loss, list(model.params.values())


def run_all(seed=0, max_coords=8, include_model=True):
    """Run every check; returns a list of (name, worst_rel_err, skipped_probes)."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, ts in list(op_checks(seed)) + list(component_checks(seed)):
        err, skipped = check(fn, ts, max_coords=max_coords, rng=rng)
        results.append((name, err, skipped))
    if include_model:
        for alpha in (0.01, 1.0):
            name, fn, ts = model_check(seed, alpha)
            err, skipped = check(fn, ts, max_coords=max_coords, rng=rng)
            results.append((f"{name}[alpha={alpha:g}]", err, skipped))
    return results
