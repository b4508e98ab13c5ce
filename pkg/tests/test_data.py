import hashlib
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spacemoe.data import (ASSAY_TYPES, MotifRule, ProfileSchema, SchemaError, SynthParams,
                           batch_stream, default_rules, desk_schema, expected_rates,
                           find_occurrences, generate_dataset, load_dataset, one_hot, rng_for)


def dir_digest(path):
    h = hashlib.sha256()
    for root, dirs, files in sorted(os.walk(path)):
        dirs.sort()
        for f in sorted(files):
            p = os.path.join(root, f)
            h.update(os.path.relpath(p, path).encode())
            with open(p, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


@pytest.fixture
def small_schema():
    return ProfileSchema.from_counts({"human": {"DNASE_ATAC": 2, "CAGE": 1, "TF_CHIP": 1},
                                      "mouse": {"CAGE": 2, "HISTONE_CHIP": 1}})


# ---------------------------------------------------------------- schema

def test_schema_counts_and_permutation(small_schema):
    s = small_schema
    assert s.assay_types == ["DNASE_ATAC", "TF_CHIP", "HISTONE_CHIP", "CAGE"]
    for m in range(s.n_species):
        assert sum(s.type_counts(m).values()) == s.n_tracks(m)
        v = np.random.default_rng(m).normal(size=s.n_tracks(m))
        np.testing.assert_array_equal(v[s.phi(m)][s.psi(m)], v)


def test_schema_json_roundtrip(small_schema):
    assert ProfileSchema.from_json(json.loads(json.dumps(small_schema.to_json()))) == small_schema


@pytest.mark.parametrize("bad", [
    {"human": {"RNA_SEQ": 1}},
    {},
])
def test_schema_rejects(bad):
    with pytest.raises(SchemaError):
        ProfileSchema.from_counts(bad)


def test_desk_schema():
    s = desk_schema()
    assert s.species == ["human", "mouse"] and s.Q == 4
    assert all(s.n_tracks(m) == 8 for m in range(2))


# ---------------------------------------------------------------- one-hot

def test_one_hot_examples():
    np.testing.assert_array_equal(one_hot("ACGT"), np.eye(4))
    np.testing.assert_array_equal(one_hot("N"), np.zeros((4, 1)))
    np.testing.assert_array_equal(one_hot("ACGTN").sum(axis=0), [1, 1, 1, 1, 0])


def test_one_hot_illegal_char_position():
    with pytest.raises(ValueError, match="position 2"):
        one_hot("ACXT")


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="ACGTN", max_size=64))
def test_one_hot_column_sums(seq):
    x = one_hot(seq)
    assert x.shape == (4, len(seq))
    np.testing.assert_array_equal(x.sum(axis=0), [0 if c == "N" else 1 for c in seq])


# ---------------------------------------------------------------- rules / rates

def test_motif_rule_validation():
    with pytest.raises(SchemaError):
        MotifRule("ACG", 1.0, 3, False, ("t",))
    with pytest.raises(SchemaError):
        MotifRule("ACGTAC", -1.0, 3, False, ("t",))
    with pytest.raises(SchemaError):
        MotifRule("ACGTAC", 1.0, 2, False, ("t",))


def test_find_occurrences_overlapping():
    assert find_occurrences("AAAA", "AA") == [0, 1, 2]


def test_expected_rates_kernel_placement():
    seq = "C" * 40 + "ACGTAC" + "C" * 82  # motif at 40 -> bin 2 of 8 (bin 16)
    rule = MotifRule("ACGTAC", 10.0, 3, False, ("a",))
    lam = expected_rates(seq, ["a", "b"], [rule], 16, 0.5)
    # triangular kernel of width 3: [0.5, 1, 0.5]
    np.testing.assert_allclose(lam[0], [0.5, 5.5, 10.5, 5.5, 0.5, 0.5, 0.5, 0.5])
    np.testing.assert_allclose(lam[1], 0.5)


def test_default_rules_structure():
    s = desk_schema()
    rules = default_rules(s, seed=0)
    p = SynthParams()
    for sp in s.species:
        shared = [r for r in rules[sp] if r.shared_across_species]
        assert len(shared) == p.shared_per_type * len(ASSAY_TYPES)
    shared_h = {r.motif for r in rules["human"] if r.shared_across_species}
    shared_m = {r.motif for r in rules["mouse"] if r.shared_across_species}
    assert shared_h == shared_m
    private_h = {r.motif for r in rules["human"] if not r.shared_across_species}
    private_m = {r.motif for r in rules["mouse"] if not r.shared_across_species}
    assert not private_h & private_m


def test_planted_motif_raises_expected_target():
    rng = rng_for(0, "test.mc")
    bin_size, seq_len = 64, 512
    motif = "GATTACA"
    rule = MotifRule(motif, 6.0, 1, False, ("t",))
    with_m, without = [], []
    for _ in range(1000):
        seq = list("".join(rng.choice(list("ACGT"), size=seq_len)))
        pos = int(rng.integers(0, seq_len - len(motif)))
        bg = "".join(seq)
        seq[pos:pos + len(motif)] = motif
        planted = "".join(seq)
        b = pos // bin_size
        with_m.append(rng.poisson(expected_rates(planted, ["t"], [rule], bin_size, 1.0)[0, b]))
        if not find_occurrences(bg, motif):
            without.append(rng.poisson(expected_rates(bg, ["t"], [rule], bin_size, 1.0)[0, b]))
    assert np.mean(with_m) / np.mean(without) > 2


# ---------------------------------------------------------------- generation

def test_generate_deterministic(tmp_path, small_schema):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_dataset(small_schema, a, 6, 256, 32, seed=3)
    generate_dataset(small_schema, b, 6, 256, 32, seed=3)
    assert dir_digest(a) == dir_digest(b)
    generate_dataset(small_schema, tmp_path / "c", 6, 256, 32, seed=4)
    assert dir_digest(a) != dir_digest(tmp_path / "c")


def test_generate_layout_and_load(tmp_path, small_schema):
    man = generate_dataset(small_schema, tmp_path, [5, 3], 256, 32, seed=1, n_eval=1)
    assert man["counts"] == {"human": 5, "mouse": 3}
    for sp in ("human", "mouse"):
        for f in ("sequences.txt", "targets.f32", "tracks.csv"):
            assert (tmp_path / sp / f).exists()
    ds = load_dataset(str(tmp_path))
    assert ds.L == 8 and ds.n_eval == 1
    assert ds.x[0].shape == (5, 4, 256) and ds.targets[1].shape == (3, 3, 8)
    assert all(np.all(t >= 0) for t in ds.targets)
    assert all(np.all(x.sum(axis=1) == 1) for x in ds.x)
    tr, ev = ds.subset("train"), ds.subset("eval")
    assert tr.count(0) == 4 and ev.count(1) == 1
    np.testing.assert_array_equal(ev.x[0][0], ds.x[0][4])


def test_zero_amplitude_zero_base(tmp_path, small_schema):
    rules = {sp: [MotifRule("ACGTAC", 0.0, 3, False, tuple(t.track_id for t in small_schema.tracks[sp]))]
             for sp in small_schema.species}
    generate_dataset(small_schema, tmp_path, 4, 256, 32, seed=0,
                     params=SynthParams(base_rate=0.0), rules=rules)
    ds = load_dataset(str(tmp_path))
    assert all(np.all(t == 0) for t in ds.targets)


def test_generate_bad_geometry(tmp_path, small_schema):
    with pytest.raises(SchemaError, match="divisible"):
        generate_dataset(small_schema, tmp_path, 2, 250, 32, seed=0)


def test_load_detects_truncated_targets(tmp_path, small_schema):
    generate_dataset(small_schema, tmp_path, 3, 256, 32, seed=0)
    p = tmp_path / "human" / "targets.f32"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(SchemaError):
        load_dataset(str(tmp_path))


# ---------------------------------------------------------------- batching

@pytest.fixture
def uneven(tmp_path_factory, small_schema):
    d = tmp_path_factory.mktemp("uneven")
    generate_dataset(small_schema, d, [100, 60], 64, 32, seed=0)
    return load_dataset(str(d))


def test_alternating_species_order(uneven):
    it = batch_stream(uneven, 4, "alternating", seed=0)
    assert [next(it).species_id + 1 for _ in range(4)] == [1, 2, 1, 2]


def test_batches_single_species(uneven):
    for b in batch_stream(uneven, 7, "alternating", seed=0, epochs=1):
        assert b.x.shape[0] == b.targets.shape[0] == len(b.indices)
        assert b.targets.shape[1] == uneven.schema.n_tracks(b.species_id)
        np.testing.assert_array_equal(b.x, uneven.x[b.species_id][b.indices])


def test_balanced_epoch_counts(uneven):
    seen = {0: [], 1: []}
    for b in batch_stream(uneven, 10, "balanced", seed=0, epochs=1):
        seen[b.species_id].extend(b.indices.tolist())
    assert len(seen[0]) == 100 and len(seen[1]) == 100
    assert sorted(seen[0]) == list(range(100))
    assert set(seen[1]) == set(range(60))


def test_alternating_epoch_covers_majority(uneven):
    seen = {0: [], 1: []}
    for b in batch_stream(uneven, 10, "alternating", seed=0, epochs=1):
        seen[b.species_id].extend(b.indices.tolist())
    assert sorted(seen[0]) == list(range(100))
    assert len(seen[1]) == 100 and set(seen[1]) == set(range(60))


@pytest.mark.parametrize("mode", ["alternating", "balanced"])
def test_batch_stream_deterministic(uneven, mode):
    a = [b.indices.tolist() for b in batch_stream(uneven, 8, mode, seed=5, epochs=2)]
    b = [b.indices.tolist() for b in batch_stream(uneven, 8, mode, seed=5, epochs=2)]
    c = [b.indices.tolist() for b in batch_stream(uneven, 8, mode, seed=6, epochs=2)]
    assert a == b and a != c


def test_batch_stream_bad_args(uneven):
    with pytest.raises(ValueError):
        next(batch_stream(uneven, 0))
    with pytest.raises(ValueError):
        next(batch_stream(uneven, 4, "random"))
