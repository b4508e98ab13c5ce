"""Convolutional tower compressing one-hot nucleotides to bin-resolution hidden states."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T


def n_blocks(bin_size):
    n = int(round(math.log2(bin_size))) if bin_size >= 1 else -1
    if n < 0 or 2 ** n != bin_size:
        raise ValueError(f"bin_size must be a power of two, got {bin_size}")
    return n


def channel_ramp(n, d_h, start=32):
    """Geometric interpolation of block widths from ``start`` to ``d_h``."""
    if n == 0:
        return []
    if n == 1:
        return [d_h]
    return [int(round(start * (d_h / start) ** (i / (n - 1)))) for i in range(n)]


def init_stem(cfg, rng, dtype=np.float32):
    if cfg.stem_kernel % 2 == 0 or cfg.stem_first_kernel % 2 == 0:
        raise ValueError("stem kernel sizes must be odd")
    params = {}
    c_in = 4
    widths = channel_ramp(n_blocks(cfg.bin_size), cfg.d_h, cfg.stem_channels)
    if not widths:
        # bin_size 1: a single pointwise projection to d_h
        widths = [cfg.d_h]
    for i, c_out in enumerate(widths):
        k = cfg.stem_first_kernel if i == 0 else cfg.stem_kernel
        scale = math.sqrt(2.0 / (c_in * k))
        params[f"stem.conv{i}.w"] = rng.normal(0, scale, (c_out, c_in, k)).astype(dtype)
        params[f"stem.conv{i}.b"] = np.zeros(c_out, dtype=dtype)
        c_in = c_out
    return params


def stem_forward(x, params, bin_size):
    """[B, 4, seq_len] -> [B, L, d_h] with L = seq_len / bin_size.

    Each block is a same-padded conv, GELU, then max-pool by 2.
    """
    x = T.as_tensor(x)
    seq_len = x.shape[-1]
    if seq_len % bin_size:
        raise ValueError(f"seq_len ({seq_len}) is not divisible by bin_size ({bin_size})")
    n = n_blocks(bin_size)
    for i in range(max(n, 1)):
        w, b = params[f"stem.conv{i}.w"], params[f"stem.conv{i}.b"]
        x = T.gelu(T.conv1d(x, w, b, stride=1, pad=w.shape[-1] // 2))
        if i < n:
            x = T.maxpool1d(x, 2)
    return T.transpose(x, (0, 2, 1))
