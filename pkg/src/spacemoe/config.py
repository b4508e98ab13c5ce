"""Run configuration: one INI-style file with [model], [data] and [train] sections.

Example::

    [model]
    d_h = 64
    seq_len = 2048
    bin_size = 128

    [data]
    species = human, mouse
    tracks.human = DNASE_ATAC:2, TF_CHIP:2, HISTONE_CHIP:2, CAGE:2
    tracks.mouse = DNASE_ATAC:2, TF_CHIP:2, HISTONE_CHIP:2, CAGE:2
    n_per_species = 256

    [train]
    steps = 2000
    alpha = 0.01

``schema = path/to/schema.json`` may replace the inline ``species``/``tracks.*`` keys.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import os
from dataclasses import dataclass, field

from .data import ProfileSchema, SchemaError, SynthParams, desk_schema
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_per_species: int = 256
    n_eval: int = 0
    base_rate: float = SynthParams.base_rate
    motif_len: int = SynthParams.motif_len
    motifs_per_seq: float = SynthParams.motifs_per_seq
    kernel_width: int = SynthParams.kernel_width

    def synth_params(self):
        return SynthParams(base_rate=self.base_rate, motif_len=self.motif_len,
                           motifs_per_seq=self.motifs_per_seq, kernel_width=self.kernel_width)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schema: ProfileSchema = field(default_factory=desk_schema)

    def validate(self):
        try:
            self.model.validate()
            self.train.validate(self.schema.n_species)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.data.n_per_species < 1:
            raise ConfigError("n_per_species: must be >= 1")
        if not 0 <= self.data.n_eval < self.data.n_per_species:
            raise ConfigError("n_eval: must lie in [0, n_per_species)")
        if not 4 <= self.data.motif_len <= 12:
            raise ConfigError("motif_len: must lie in [4, 12]")
        if self.data.kernel_width < 1 or self.data.kernel_width % 2 == 0:
            raise ConfigError("kernel_width: must be a positive odd integer")
        return self


def _coerce(section, key, raw, default):
    kind = type(default)
    try:
        if kind is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def _fill(section_name, section, cls, skip=()):
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for key, raw in section.items():
        if key in skip or any(key.startswith(s) for s in skip if s.endswith(".")):
            continue
        if key not in names:
            raise ConfigError(f"[{section_name}] unknown key {key!r}")
        values[key] = _coerce(section_name, key, raw, getattr(defaults, key))
    return cls(**values)


def _parse_tracks(spec, species):
    counts = {}
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        name, _, n = item.partition(":")
        try:
            counts[name.strip().upper()] = int(n) if n else 1
        except ValueError:
            raise ConfigError(f"[data] tracks.{species}: bad entry {item!r}") from None
    return counts


def _parser():
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive field names (K, R)
    return parser


def load_config(path):
    parser = _parser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError:
        raise
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    return parse_config(parser, base_dir=os.path.dirname(os.path.abspath(path)))


def loads_config(text):
    parser = _parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    return parse_config(parser)


def parse_config(parser, base_dir="."):
    unknown = set(parser.sections()) - {"model", "data", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    empty = {}
    model = _fill("model", parser["model"] if parser.has_section("model") else empty, ModelConfig)
    data_sec = dict(parser["data"]) if parser.has_section("data") else {}
    data = _fill("data", data_sec, DataConfig, skip=("schema", "species", "tracks."))
    train = _fill("train", parser["train"] if parser.has_section("train") else empty, TrainConfig)
    try:
        if "schema" in data_sec:
            if "species" in data_sec:
                raise ConfigError("[data] give either schema or species/tracks.*, not both")
            spath = os.path.join(base_dir, data_sec["schema"])
            with open(spath) as fh:
                schema = ProfileSchema.from_json(json.load(fh))
        elif "species" in data_sec:
            species = [s.strip() for s in data_sec["species"].split(",") if s.strip()]
            counts = {}
            for sp in species:
                key = f"tracks.{sp}"
                if key not in data_sec:
                    raise ConfigError(f"[data] missing {key}")
                counts[sp] = _parse_tracks(data_sec[key], sp)
            stray = {k for k in data_sec if k.startswith("tracks.")} - {f"tracks.{s}" for s in species}
            if stray:
                raise ConfigError(f"[data] tracks given for undeclared species: {sorted(stray)}")
            schema = ProfileSchema.from_counts(counts)
        else:
            schema = desk_schema()
    except SchemaError as exc:
        raise ConfigError(f"[data] schema: {exc}") from None
    return RunConfig(model, data, train, schema).validate()
