"""Profile schemas, synthetic planted-motif datasets and species batch streams."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

ASSAY_TYPES = ("DNASE_ATAC", "TF_CHIP", "HISTONE_CHIP", "CAGE")
ALPHABET = "ACGT"
FORMAT_VERSION = 1


class SchemaError(ValueError):
    pass


def rng_for(seed, purpose, *index):
    """Generator keyed by (seed, purpose, index...); every random draw in the package goes through here."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(purpose.encode())]
    key.extend(int(i) for i in index)
    return np.random.default_rng(key)


@dataclass(frozen=True)
class Track:
    track_id: str
    assay_type: str


@dataclass
class ProfileSchema:
    species: list
    tracks: dict  # species name -> list[Track]

    def __post_init__(self):
        if not self.species:
            raise SchemaError("schema has no species")
        if len(set(self.species)) != len(self.species):
            raise SchemaError("duplicate species names")
        for sp in self.species:
            tr = self.tracks.get(sp)
            if not tr:
                raise SchemaError(f"species {sp!r} has no tracks")
            ids = [t.track_id for t in tr]
            if len(set(ids)) != len(ids):
                raise SchemaError(f"duplicate track ids in species {sp!r}")
            for t in tr:
                if t.assay_type not in ASSAY_TYPES:
                    raise SchemaError(f"track {t.track_id!r} has unknown assay type {t.assay_type!r}")
        extra = set(self.tracks) - set(self.species)
        if extra:
            raise SchemaError(f"tracks given for unknown species {sorted(extra)}")

    @property
    def n_species(self):
        return len(self.species)

    @property
    def assay_types(self):
        """Assay types present in any species, in canonical order."""
        present = {t.assay_type for sp in self.species for t in self.tracks[sp]}
        return [a for a in ASSAY_TYPES if a in present]

    @property
    def Q(self):
        return len(self.assay_types)

    def n_tracks(self, m):
        return len(self.tracks[self.species[m]])

    def type_counts(self, m):
        counts = {a: 0 for a in self.assay_types}
        for t in self.tracks[self.species[m]]:
            counts[t.assay_type] += 1
        return counts

    def blocks(self, m):
        """Track indices of species ``m`` grouped per assay type (all Q types, possibly empty)."""
        tr = self.tracks[self.species[m]]
        return [np.array([i for i, t in enumerate(tr) if t.assay_type == a], dtype=np.int64)
                for a in self.assay_types]

    def phi(self, m):
        """Permutation putting tracks in assay-type order."""
        return np.concatenate(self.blocks(m))

    def psi(self, m):
        return np.argsort(self.phi(m))

    def to_json(self):
        return {
            "species": list(self.species),
            "tracks": {sp: [{"track_id": t.track_id, "assay_type": t.assay_type}
                            for t in self.tracks[sp]] for sp in self.species},
        }

    @classmethod
    def from_json(cls, obj):
        try:
            species = list(obj["species"])
            tracks = {sp: [Track(t["track_id"], t["assay_type"]) for t in obj["tracks"][sp]]
                      for sp in species}
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema: {exc}") from None
        return cls(species, tracks)

    @classmethod
    def from_counts(cls, counts):
        """Build from ``{species: {assay_type: n_tracks}}``."""
        tracks = {}
        for sp, per_type in counts.items():
            tracks[sp] = [Track(f"{sp}_{a}_{i}", a)
                          for a in ASSAY_TYPES for i in range(per_type.get(a, 0))]
            unknown = set(per_type) - set(ASSAY_TYPES)
            if unknown:
                raise SchemaError(f"unknown assay types {sorted(unknown)}")
        return cls(list(counts), tracks)


def desk_schema(species=("human", "mouse"), per_type=2):
    return ProfileSchema.from_counts({sp: {a: per_type for a in ASSAY_TYPES} for sp in species})


@dataclass(frozen=True)
class MotifRule:
    motif: str
    amplitude: float
    kernel_width: int
    shared_across_species: bool
    tracks: tuple  # track ids affected

    def __post_init__(self):
        if self.amplitude < 0:
            raise SchemaError("motif amplitude must be non-negative")
        if not 4 <= len(self.motif) <= 12 or set(self.motif) - set(ALPHABET):
            raise SchemaError(f"bad motif {self.motif!r}")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise SchemaError("kernel_width must be a positive odd number of bins")


@dataclass
class SynthParams:
    base_rate: float = 0.2
    motif_len: int = 6
    motifs_per_seq: float = 8.0
    amplitude_range: tuple = (12.0, 30.0)
    private_amplitude: float = 8.0
    kernel_width: int = 3
    shared_per_type: int = 2


def triangular_kernel(width):
    half = (width + 1) / 2
    d = np.arange(width) - width // 2
    return 1.0 - np.abs(d) / half


def _random_motif(rng, length, taken):
    while True:
        m = "".join(rng.choice(list(ALPHABET), size=length))
        if m not in taken:
            taken.add(m)
            return m


def default_rules(schema, seed, params=None):
    """Per-species motif rules.

    Each assay type owns ``shared_per_type`` motifs reused by every species, one
    motif per (species, type), and one private motif per track. A track therefore
    shares all but one of its rules with the other tracks of its type.
    """
    p = params or SynthParams()
    rng = rng_for(seed, "rules")
    taken = set()
    lo, hi = p.amplitude_range
    shared = {a: [(_random_motif(rng, p.motif_len, taken), float(rng.uniform(lo, hi)))
                  for _ in range(p.shared_per_type)] for a in ASSAY_TYPES}
    rules = {}
    for sp in schema.species:
        out = []
        by_type = {}
        for t in schema.tracks[sp]:
            by_type.setdefault(t.assay_type, []).append(t.track_id)
        for a, ids in by_type.items():
            for motif, amp in shared[a]:
                out.append(MotifRule(motif, amp, p.kernel_width, True, tuple(ids)))
            motif = _random_motif(rng, p.motif_len, taken)
            out.append(MotifRule(motif, float(rng.uniform(lo, hi)), p.kernel_width, False, tuple(ids)))
            for tid in ids:
                motif = _random_motif(rng, p.motif_len, taken)
                out.append(MotifRule(motif, p.private_amplitude, p.kernel_width, False, (tid,)))
        rules[sp] = out
    return rules


def find_occurrences(seq, motif):
    out, i = [], seq.find(motif)
    while i >= 0:
        out.append(i)
        i = seq.find(motif, i + 1)
    return out


def expected_rates(seq, track_ids, rules, bin_size, base_rate):
    """Poisson rate per (track, bin) implied by the motif occurrences in ``seq``."""
    L = len(seq) // bin_size
    col = {tid: i for i, tid in enumerate(track_ids)}
    lam = np.full((len(track_ids), L), base_rate, dtype=np.float64)
    for rule in rules:
        hits = find_occurrences(seq, rule.motif)
        if not hits or rule.amplitude == 0:
            continue
        kern = rule.amplitude * triangular_kernel(rule.kernel_width)
        half = rule.kernel_width // 2
        profile = np.zeros(L)
        for pos in hits:
            b = pos // bin_size
            for j, w in enumerate(kern):
                bb = b + j - half
                if 0 <= bb < L:
                    profile[bb] += w
        for tid in rule.tracks:
            if tid in col:
                lam[col[tid]] += profile
    return lam


def sample_sequence(rng, seq_len, motifs, motifs_per_seq):
    seq = np.array(list(ALPHABET))[rng.integers(0, 4, size=seq_len)]
    n_plant = rng.poisson(motifs_per_seq) if motifs else 0
    for _ in range(n_plant):
        motif = motifs[rng.integers(len(motifs))]
        pos = int(rng.integers(0, seq_len - len(motif) + 1))
        seq[pos:pos + len(motif)] = list(motif)
    return "".join(seq)


def one_hot(seq):
    """[4, len] float32 encoding; A,C,G,T map to unit columns and N to a zero column."""
    lut = np.full(256, -2, dtype=np.int64)
    for i, ch in enumerate(ALPHABET):
        lut[ord(ch)] = lut[ord(ch.lower())] = i
    lut[ord("N")] = lut[ord("n")] = -1
    codes = lut[np.frombuffer(seq.encode("latin-1"), dtype=np.uint8)] if seq else np.zeros(0, np.int64)
    bad = np.flatnonzero(codes == -2)
    if bad.size:
        raise ValueError(f"illegal character {seq[bad[0]]!r} at position {bad[0]}")
    out = np.zeros((4, len(seq)), dtype=np.float32)
    ok = codes >= 0
    out[codes[ok], np.flatnonzero(ok)] = 1.0
    return out


def _check_geometry(seq_len, bin_size):
    if bin_size < 1 or seq_len < 1:
        raise SchemaError("seq_len and bin_size must be positive")
    if seq_len % bin_size:
        raise SchemaError(f"seq_len ({seq_len}) is not divisible by bin_size ({bin_size})")


def generate_dataset(schema, out_dir, n_per_species, seq_len, bin_size, seed,
                     params=None, rules=None, n_eval=0):
    """Write a synthetic dataset directory and return its manifest.

    ``n_per_species`` is an int or a per-species list. The last ``n_eval`` records
    of every species form the eval split.
    """
    _check_geometry(seq_len, bin_size)
    p = params or SynthParams()
    if rules is None:
        rules = default_rules(schema, seed, p)
    counts = (list(n_per_species) if isinstance(n_per_species, (list, tuple))
              else [int(n_per_species)] * schema.n_species)
    if len(counts) != schema.n_species or min(counts) < 1:
        raise SchemaError("need a positive record count for every species")
    L = seq_len // bin_size
    os.makedirs(out_dir, exist_ok=True)
    for m, sp in enumerate(schema.species):
        track_ids = [t.track_id for t in schema.tracks[sp]]
        sp_rules = rules.get(sp, [])
        motifs = sorted({r.motif for r in sp_rules})
        seqs = []
        targets = np.zeros((counts[m], len(track_ids), L), dtype=np.float32)
        for i in range(counts[m]):
            rng = rng_for(seed, "record", m, i)
            seq = sample_sequence(rng, seq_len, motifs, p.motifs_per_seq)
            lam = expected_rates(seq, track_ids, sp_rules, bin_size, p.base_rate)
            targets[i] = rng.poisson(lam)
            seqs.append(seq)
        d = os.path.join(out_dir, sp)
        os.makedirs(d, exist_ok=True)
        with open(os.path.join(d, "sequences.txt"), "w", newline="\n") as fh:
            fh.write("\n".join(seqs) + "\n")
        targets.astype("<f4").tofile(os.path.join(d, "targets.f32"))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["track_id", "assay_type"])
        for t in schema.tracks[sp]:
            w.writerow([t.track_id, t.assay_type])
        with open(os.path.join(d, "tracks.csv"), "w", newline="") as fh:
            fh.write(buf.getvalue())
    manifest = {
        "format_version": FORMAT_VERSION,
        **schema.to_json(),
        "seq_len": seq_len,
        "bin_size": bin_size,
        "seed": int(seed),
        "counts": dict(zip(schema.species, counts)),
        "n_eval": int(n_eval),
        "synth": {"base_rate": p.base_rate, "motif_len": p.motif_len,
                  "motifs_per_seq": p.motifs_per_seq, "kernel_width": p.kernel_width},
        "rules": {sp: [{"motif": r.motif, "amplitude": r.amplitude, "kernel_width": r.kernel_width,
                        "shared_across_species": r.shared_across_species, "tracks": list(r.tracks)}
                       for r in rules.get(sp, [])] for sp in schema.species},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


@dataclass
class SpeciesBatch:
    species_id: int
    x: np.ndarray        # [B, 4, seq_len]
    targets: np.ndarray  # [B, C_m, L]
    indices: np.ndarray


@dataclass
class Dataset:
    schema: ProfileSchema
    seq_len: int
    bin_size: int
    x: list = field(repr=False)        # per species [n, 4, seq_len]
    targets: list = field(repr=False)  # per species [n, C_m, L]
    n_eval: int = 0
    seed: int = 0

    @property
    def L(self):
        return self.seq_len // self.bin_size

    def count(self, m):
        return self.x[m].shape[0]

    def split_indices(self, m, split="all"):
        n = self.count(m)
        if split == "all":
            return np.arange(n)
        n_eval = min(self.n_eval, n)
        if split == "train":
            return np.arange(n - n_eval)
        if split == "eval":
            return np.arange(n - n_eval, n)
        raise ValueError(f"unknown split {split!r}")

    def subset(self, split):
        idx = [self.split_indices(m, split) for m in range(self.schema.n_species)]
        if any(len(i) == 0 for i in idx):
            raise ValueError(f"split {split!r} is empty for at least one species")
        return Dataset(self.schema, self.seq_len, self.bin_size,
                       [x[i] for x, i in zip(self.x, idx)],
                       [t[i] for t, i in zip(self.targets, idx)], 0, self.seed)


def load_dataset(path):
    man_path = os.path.join(path, "manifest.json")
    with open(man_path) as fh:
        man = json.load(fh)
    schema = ProfileSchema.from_json(man)
    seq_len, bin_size = int(man["seq_len"]), int(man["bin_size"])
    _check_geometry(seq_len, bin_size)
    L = seq_len // bin_size
    xs, ts = [], []
    for sp in schema.species:
        n = int(man["counts"][sp])
        with open(os.path.join(path, sp, "sequences.txt")) as fh:
            seqs = [s for s in fh.read().split("\n") if s]
        if len(seqs) != n:
            raise SchemaError(f"{sp}: manifest lists {n} records, sequences.txt has {len(seqs)}")
        C = len(schema.tracks[sp])
        t = np.fromfile(os.path.join(path, sp, "targets.f32"), dtype="<f4")
        if t.size != n * C * L:
            raise SchemaError(f"{sp}: targets.f32 has {t.size} values, expected {n * C * L}")
        xs.append(np.stack([one_hot(s) for s in seqs]))
        ts.append(t.reshape(n, C, L).astype(np.float32))
    return Dataset(schema, seq_len, bin_size, xs, ts, int(man.get("n_eval", 0)), int(man["seed"]))


def batch_stream(dataset, batch_size, mode="alternating", seed=0, epochs=None):
    """Yield single-species batches cycling species 0, 1, ..., M-1.

    ``alternating``: each species walks its own reshuffled cycle of records and an
    epoch is ceil(max_n / batch_size) rounds of full batches.
    ``balanced``: every epoch each species contributes exactly max_n samples; the
    shortfall of smaller species is filled by resampling random records.
    ``epochs=None`` streams forever.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if mode not in ("alternating", "balanced"):
        raise ValueError(f"unknown batch mode {mode!r}")
    M = dataset.schema.n_species
    counts = [dataset.count(m) for m in range(M)]
    if M == 0 or min(counts) == 0:
        raise ValueError("empty dataset")
    n_max = max(counts)
    rounds = math.ceil(n_max / batch_size)

    def emit(m, idx):
        return SpeciesBatch(m, dataset.x[m][idx], dataset.targets[m][idx], idx)

    epoch = 0
    if mode == "alternating":
        cycles = [0] * M
        queues = [np.zeros(0, dtype=np.int64) for _ in range(M)]
        while epochs is None or epoch < epochs:
            for _ in range(rounds):
                for m in range(M):
                    while queues[m].size < batch_size:
                        perm = rng_for(seed, "shuffle", m, cycles[m]).permutation(counts[m])
                        cycles[m] += 1
                        queues[m] = np.concatenate([queues[m], perm])
                    idx, queues[m] = queues[m][:batch_size], queues[m][batch_size:]
                    yield emit(m, idx)
            epoch += 1
    else:
        while epochs is None or epoch < epochs:
            order = []
            for m in range(M):
                rng = rng_for(seed, "balance", m, epoch)
                idx = rng.permutation(counts[m])
                if counts[m] < n_max:
                    extra = rng.integers(0, counts[m], size=n_max - counts[m])
                    idx = rng.permutation(np.concatenate([idx, extra]))
                order.append(idx)
            for r in range(rounds):
                for m in range(M):
                    yield emit(m, order[m][r * batch_size:(r + 1) * batch_size])
            epoch += 1
