"""
Profile-grouped decoding
========================

The decoder first makes a plain linear prediction per track. Tracks are then
grouped by assay type, and each group is refined by a mixture of shared
experts. Two gates choose the mix: one looks at the species and the pooled
sequence summary, the other at the group's own profile. The expert output
layers start at zero, so an untrained model predicts exactly the base head.
"""
import numpy as np

from spacemoe import tensor as T
from spacemoe.data import ProfileSchema
from spacemoe.decoder import base_head, categorize, recompose
from spacemoe.encoder import encoder_forward
from spacemoe.gradcheck import tiny_config
from spacemoe.model import SpaceModel
from spacemoe.stem import stem_forward

schema = ProfileSchema.from_counts({"human": {"DNASE_ATAC": 2, "CAGE": 1, "TF_CHIP": 1},
                                    "mouse": {"CAGE": 2, "DNASE_ATAC": 1}})
print("human blocks (track indices per assay type):", schema.blocks(0))
print("mouse blocks:", schema.blocks(1))

o = T.Tensor(np.arange(4 * 3, dtype=float).reshape(1, 4, 3))
blocks = categorize(o, schema, 0)
print("\nbase prediction rows  ", o.data[0, :, 0])
print("grouped               ", [b.data[0, :, 0].tolist() for b in blocks])
print("recomposed            ", recompose(blocks, schema, 0).data[0, :, 0])

cfg = tiny_config()
model = SpaceModel(cfg, schema, seed=0, dtype=np.float64)
rng = np.random.default_rng(1)
x = np.zeros((2, 4, cfg.seq_len))
np.put_along_axis(x, rng.integers(0, 4, (2, 1, cfg.seq_len)), 1.0, axis=1)
record = []
o_final, _ = model.forward(x, 0, record=record)
y, _ = encoder_forward(stem_forward(T.Tensor(x), model.params, cfg.bin_size), 0, model.params, cfg)
print("\n|o_final - o_base| at init:", np.abs(o_final.data - base_head(y, 0, model.params).data).max())
for q, w in record:
    print(f"assay {schema.assay_types[q]:12s} combined expert weights {w[0].round(3)}")
