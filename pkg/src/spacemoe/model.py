"""The full model: stem, species-aware MoE encoder and profile-grouped decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import ProfileSchema, rng_for
from .decoder import decoder_forward, init_decoder
from .encoder import RoutingTrace, encoder_forward, init_encoder
from .stem import init_stem, n_blocks, stem_forward


@dataclass
class ModelConfig:
    d_h: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_experts: int = 4
    top_k: int = 3
    noise_sigma: float = 1e-2
    K: int = 8
    R: int = 2
    k_dec: int = 3
    expert_kernel: int = 5
    expert_hidden: int = 8
    bin_size: int = 128
    seq_len: int = 2048
    stem_kernel: int = 5
    stem_first_kernel: int = 15
    stem_channels: int = 32

    def validate(self):
        checks = [
            ("seq_len", self.seq_len >= 1 and self.bin_size >= 1 and self.seq_len % self.bin_size == 0,
             f"seq_len ({self.seq_len}) must be divisible by bin_size ({self.bin_size})"),
            ("d_h", self.d_h >= 1 and self.n_heads >= 1 and self.d_h % self.n_heads == 0,
             f"d_h ({self.d_h}) must be divisible by n_heads ({self.n_heads})"),
            ("top_k", 1 <= self.top_k <= self.n_experts, "need 1 <= top_k <= n_experts"),
            ("k_dec", 1 <= self.k_dec <= self.K, "need 1 <= k_dec <= K"),
            ("R", self.R >= 1, "R must be >= 1"),
            ("n_layers", self.n_layers >= 1, "n_layers must be >= 1"),
            ("noise_sigma", self.noise_sigma >= 0, "noise_sigma must be >= 0"),
            ("stem_kernel", self.stem_kernel % 2 == 1, "stem_kernel must be odd"),
            ("stem_first_kernel", self.stem_first_kernel % 2 == 1, "stem_first_kernel must be odd"),
            ("expert_kernel", self.expert_kernel % 2 == 1, "expert_kernel must be odd"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ValueError(f"{name}: {msg}")
        try:
            n_blocks(self.bin_size)
        except ValueError as exc:
            raise ValueError(f"bin_size: {exc}") from None
        return self

    @property
    def L(self):
        return self.seq_len // self.bin_size


class SpaceModel:
    """Named parameters plus the forward pass; parameters live in ``self.params``."""

    def __init__(self, cfg, schema, seed=0, dtype=np.float32):
        self.cfg = cfg.validate()
        self.schema = schema
        raw = {}
        raw.update(init_stem(cfg, rng_for(seed, "init.stem"), dtype))
        raw.update(init_encoder(cfg, schema.n_species, rng_for(seed, "init.encoder"), dtype))
        raw.update(init_decoder(cfg, schema, rng_for(seed, "init.decoder"), dtype))
        self.params = {k: T.parameter(v, dtype=dtype, name=k) for k, v in raw.items()}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype):
        out = object.__new__(SpaceModel)
        out.cfg, out.schema = self.cfg, self.schema
        out.params = {k: T.parameter(v.data.astype(dtype), dtype=dtype, name=k)
                      for k, v in self.params.items()}
        return out

    def n_params(self):
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def forward(self, x, species_id, train=False, rng=None, traces=None, record=None):
        """Unconstrained predictions o_final [B, C_m, L] and the per-layer routing traces."""
        x = T.Tensor(np.asarray(getattr(x, "data", x), dtype=self.dtype))
        h = stem_forward(x, self.params, self.cfg.bin_size)
        y, traces = encoder_forward(h, species_id, self.params, self.cfg, train, rng, traces)
        e = self.params["enc.species_emb"][species_id]
        o = decoder_forward(y, e, species_id, self.schema, self.params, self.cfg, train, rng, record)
        return o, traces

    def new_traces(self):
        return [RoutingTrace(self.schema.n_species, self.cfg.n_experts)
                for _ in range(self.cfg.n_layers)]

    def config_dict(self):
        return {"model": asdict(self.cfg), "schema": self.schema.to_json()}

    @classmethod
    def from_config_dict(cls, obj, dtype=np.float32):
        cfg = ModelConfig(**obj["model"])
        return cls(cfg, ProfileSchema.from_json(obj["schema"]), seed=0, dtype=dtype)
