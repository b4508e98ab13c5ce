"""Training loop, optimiser, schedule and checkpoint format."""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import batch_stream, rng_for
from .model import SpaceModel
from .objectives import rate, total_loss


@dataclass
class TrainConfig:
    steps: int = 2000
    peak_lr: float = 5e-4
    warmup_steps: int = 200
    batch_size: int = 4
    accum_batches: int = 2
    clip_norm: float = 0.2
    alpha: float = 0.01
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 500
    batch_mode: str = "alternating"

    def validate(self, n_species=None):
        if self.steps < 1:
            raise ValueError("steps: must be >= 1")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ValueError("warmup_steps: must lie in [0, steps]")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm: must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size: must be >= 1")
        if self.accum_batches < 1 or (n_species and self.accum_batches % n_species):
            raise ValueError(f"accum_batches: must be a positive multiple of the species count ({n_species})")
        if self.batch_mode not in ("alternating", "balanced"):
            raise ValueError("batch_mode: must be 'alternating' or 'balanced'")
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise ValueError("peak_lr/weight_decay: must be non-negative")
        return self


def lr_at(step, cfg):
    """Linear warmup from 0 to peak_lr, then cosine decay to 0 at ``cfg.steps``."""
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.steps - cfg.warmup_steps
    if span <= 0:
        return cfg.peak_lr
    frac = min(max((step - cfg.warmup_steps) / span, 0.0), 1.0)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_global_norm(grads, max_norm):
    """Scale ``grads`` (list of arrays, in place) to global L2 norm <= max_norm; returns the scale."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0:
        return 1.0
    scale = max_norm / norm
    for g in grads:
        g *= g.dtype.type(scale)
    return scale


class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.names = list(params)
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.m = {k: np.zeros_like(params[k].data) for k in self.names}
        self.v = {k: np.zeros_like(params[k].data) for k in self.names}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        for k in self.names:
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(params[k].data)
            if g.shape != params[k].data.shape:
                raise T.ShapeError(f"{k}: gradient shape {g.shape} != parameter shape {params[k].data.shape}")
            adamw_update(params[k].data, g, self.m[k], self.v[k], self.t, lr,
                         self.betas, self.eps, self.weight_decay)


def adamw_update(p, g, m, v, t, lr, betas, eps, weight_decay):
    """In-place vectorised AdamW update of one parameter array."""
    b1, b2 = betas
    dt = p.dtype.type
    if weight_decay:
        p -= dt(lr * weight_decay) * p
    m *= dt(b1)
    m += dt(1 - b1) * g
    v *= dt(b2)
    v += dt(1 - b2) * g * g
    mhat = m / dt(1 - b1 ** t)
    vhat = v / dt(1 - b2 ** t)
    p -= dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))


def adamw_update_loop(p, g, m, v, t, lr, betas, eps, weight_decay):
    """Elementwise reference of ``adamw_update`` in plain python floats."""
    b1, b2 = betas
    pf, gf, mf, vf = p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1)
    for i in range(pf.size):
        x = float(pf[i]) - lr * weight_decay * float(pf[i])
        mi = b1 * float(mf[i]) + (1 - b1) * float(gf[i])
        vi = b2 * float(vf[i]) + (1 - b2) * float(gf[i]) ** 2
        mhat = mi / (1 - b1 ** t)
        vhat = vi / (1 - b2 ** t)
        pf[i] = x - lr * mhat / (math.sqrt(vhat) + eps)
        mf[i], vf[i] = mi, vi


class NumericAbort(RuntimeError):
    pass


def param_hash(params):
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()


def run_window(model, batches, alpha, train=True, rng=None):
    """Forward a window of micro-batches and build the combined loss."""
    traces = model.new_traces()
    preds, targets = [], []
    for b in batches:
        o, traces = model.forward(b.x, b.species_id, train=train, rng=rng, traces=traces)
        preds.append(rate(o))
        targets.append(b.targets)
    return total_loss(preds, targets, traces, alpha), traces


def train(model, dataset, cfg, log_path=None, ckpt_path=None, on_step=None):
    """Optimise ``model`` in place; returns the list of logged records.

    Each optimizer step consumes ``accum_batches`` single-species micro-batches
    (species alternate), averages their Poisson losses and computes the MI terms
    on the routing traces merged over the whole window.
    """
    cfg.validate(dataset.schema.n_species)
    opt = AdamW(model.params, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    noise_rng = rng_for(cfg.seed, "gate-noise")
    stream = batch_stream(dataset, cfg.batch_size, cfg.batch_mode, seed=cfg.seed)
    records = []
    log = open(log_path, "w") if log_path else None
    try:
        for step in range(cfg.steps):
            window = [next(stream) for _ in range(cfg.accum_batches)]
            model.zero_grad()
            report, _ = run_window(model, window, cfg.alpha, train=True, rng=noise_rng)
            if not np.isfinite(report.total.data):
                if ckpt_path:
                    save_checkpoint(ckpt_path, model, opt, noise_rng, step, cfg)
                raise NumericAbort(f"non-finite loss at step {step}")
            T.backward(report.total)
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            pre = global_norm(list(grads.values()))
            if not math.isfinite(pre):
                if ckpt_path:
                    save_checkpoint(ckpt_path, model, opt, noise_rng, step, cfg)
                raise NumericAbort(f"non-finite gradient norm at step {step}")
            clip_global_norm(list(grads.values()), cfg.clip_norm)
            post = global_norm(list(grads.values()))
            lr = lr_at(step, cfg)
            opt.step(model.params, grads, lr)
            rec = {"step": step, "lr": lr, **report.as_dict(),
                   "grad_norm_preclip": pre, "grad_norm": post}
            if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                rec["param_sha256"] = param_hash(model.params)
            records.append(rec)
            if log:
                log.write(json.dumps(rec, sort_keys=True) + "\n")
            if on_step:
                on_step(rec)
    finally:
        if log:
            log.close()
    model.zero_grad()
    if ckpt_path:
        save_checkpoint(ckpt_path, model, opt, noise_rng, cfg.steps, cfg)
    return records


# ---------------------------------------------------------------- checkpoints

MAGIC = b"SPCE"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _pack_array(name, arr):
    arr = np.ascontiguousarray(arr)
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", _TAGS[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(_DTYPES[_TAGS[arr.dtype]]).tobytes()


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self):
        (n,) = self.unpack("<H")
        name = self.take(n).decode()
        tag, ndim = self.unpack("<BB")
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name}")
        shape = self.unpack(f"<{ndim}I")
        dt = _DTYPES[tag]
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)
        return name, data.astype(dt.newbyteorder("="))


def save_checkpoint(path, model, opt=None, rng=None, step=0, train_cfg=None):
    """Write the binary checkpoint: magic, version, JSON config, params, moments, RNG, step."""
    config = model.config_dict()
    if train_cfg is not None:
        config["train"] = dict(train_cfg) if isinstance(train_cfg, dict) else asdict(train_cfg)
    cfg_bytes = json.dumps(config, sort_keys=True).encode()
    names = list(model.params)
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg_bytes)), cfg_bytes]
    out.append(struct.pack("<I", len(names)))
    out += [_pack_array(k, model.params[k].data) for k in names]
    if opt is not None:
        out.append(struct.pack("<IQ", 1, opt.t))
        out += [_pack_array(k, opt.m[k]) for k in names]
        out += [_pack_array(k, opt.v[k]) for k in names]
    else:
        out.append(struct.pack("<IQ", 0, 0))
    rng_bytes = json.dumps(rng.bit_generator.state if rng is not None else None, sort_keys=True).encode()
    out += [struct.pack("<I", len(rng_bytes)), rng_bytes, struct.pack("<Q", step)]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(out))
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    model: SpaceModel
    config: dict
    opt: AdamW | None
    rng_state: dict | None
    step: int

    def save(self, path):
        save_checkpoint(path, self.model, self.opt, self.rng(), self.step, self.config.get("train"))

    def rng(self):
        if self.rng_state is None:
            return None
        g = np.random.default_rng()
        g.bit_generator.state = self.rng_state
        return g


def load_checkpoint(path):
    """Read a checkpoint; nothing is constructed unless the whole file validates."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if len(buf) < 4 or r.take(4) != MAGIC:
        raise BadMagicError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    (n,) = r.unpack("<I")
    try:
        config = json.loads(r.take(n).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config blob: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = [r.array() for _ in range(count)]
    has_opt, t = r.unpack("<IQ")
    moments = None
    if has_opt:
        moments = ([r.array() for _ in range(count)], [r.array() for _ in range(count)])
    (n,) = r.unpack("<I")
    rng_state = json.loads(r.take(n).decode())
    (step,) = r.unpack("<Q")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint payload")

    dtype = arrays[0][1].dtype if arrays else np.float32
    model = SpaceModel.from_config_dict(config, dtype=dtype)
    expected = {k: p.data.shape for k, p in model.params.items()}
    got = {k: a.shape for k, a in arrays}
    if set(expected) != set(got):
        raise ShapeMismatchError(f"parameter names differ from config: "
                                 f"missing {sorted(set(expected) - set(got))}, extra {sorted(set(got) - set(expected))}")
    for k, shape in got.items():
        if tuple(shape) != tuple(expected[k]):
            raise ShapeMismatchError(f"{k}: checkpoint shape {tuple(shape)} != config shape {expected[k]}")
    model.params = {k: T.parameter(a.copy(), dtype=a.dtype, name=k) for k, a in arrays}
    opt = None
    if moments is not None:
        tc = config.get("train", {})
        opt = AdamW(model.params, (tc.get("beta1", 0.9), tc.get("beta2", 0.999)),
                    tc.get("eps", 1e-8), tc.get("weight_decay", 0.0))
        opt.m = {k: a.copy() for k, a in moments[0]}
        opt.v = {k: a.copy() for k, a in moments[1]}
        opt.t = t
    return Checkpoint(model, config, opt, rng_state, step)
