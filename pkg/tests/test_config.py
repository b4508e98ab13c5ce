import json

import pytest

from spacemoe.config import ConfigError, load_config, loads_config
from spacemoe.data import desk_schema

DESK = """
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
"""


def test_desk_config_parses():
    run = loads_config(DESK)
    assert run.schema == desk_schema()
    assert run.model.L == 16 and run.train.alpha == 0.01 and run.data.n_per_species == 256


def test_empty_config_uses_defaults():
    run = loads_config("")
    assert run.schema == desk_schema() and run.train.steps == 2000


@pytest.mark.parametrize("text,field", [
    ("[model]\nseq_len = 2000\nbin_size = 128\n", "seq_len"),
    ("[model]\nd_h = 30\n", "d_h"),
    ("[model]\ntop_k = 5\n", "top_k"),
    ("[model]\nbin_size = 96\nseq_len = 1920\n", "bin_size"),
    ("[train]\naccum_batches = 3\n", "accum_batches"),
    ("[train]\nwarmup_steps = 5000\n", "warmup_steps"),
    ("[data]\nn_eval = 300\n", "n_eval"),
])
def test_invalid_values_name_the_field(text, field):
    with pytest.raises(ConfigError, match=field):
        loads_config(text)


def test_unknown_key_and_section():
    with pytest.raises(ConfigError, match="unknown key"):
        loads_config("[model]\nwidth = 3\n")
    with pytest.raises(ConfigError, match="sections"):
        loads_config("[optim]\nlr = 1\n")


def test_bad_number():
    with pytest.raises(ConfigError, match="cannot parse"):
        loads_config("[train]\nsteps = many\n")


def test_tracks_for_undeclared_species():
    with pytest.raises(ConfigError, match="undeclared"):
        loads_config("[data]\nspecies = human\ntracks.human = CAGE:1\ntracks.dog = CAGE:1\n")


def test_unknown_assay_type():
    with pytest.raises(ConfigError, match="schema"):
        loads_config("[data]\nspecies = human\ntracks.human = RNA:1\n")


def test_schema_file(tmp_path):
    schema = {"species": ["a"], "tracks": {"a": [{"track_id": "t0", "assay_type": "CAGE"}]}}
    (tmp_path / "schema.json").write_text(json.dumps(schema))
    (tmp_path / "run.ini").write_text("[data]\nschema = schema.json\n")
    run = load_config(str(tmp_path / "run.ini"))
    assert run.schema.species == ["a"] and run.schema.Q == 1
