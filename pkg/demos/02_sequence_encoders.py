# %% [markdown]
# # Sequence encoders
#
# Gesture and audio streams are encoded with a bidirectional LSTM; text goes
# through pre-norm multi-head self-attention with a prepended [CLS] slot.

# %%
import numpy as np

from aphasiagnn.autodiff import Tensor
from aphasiagnn.nn import (AttentionBlockParams, BiRecurrentParams, EmbeddingTable, birnn_encode,
                           cls_pool, cross_attention_block, embed_lookup, self_attention_block)

rng = np.random.default_rng(0)

# %% [markdown]
# A gesture stream of 6 tokens, each 69 numbers (23 keypoints x 3 coordinates).
# The output concatenates forward and backward hidden states.

# %%
gesture = Tensor(rng.standard_normal((6, 69)))
rnn = BiRecurrentParams(rng, 69, hidden=8, layers=1)
h_v = birnn_encode(gesture, rnn)
print("BiLSTM output", h_v.shape, "(tokens, 2 x hidden)")

# %% [markdown]
# Text: token ids from an embedding table with reserved [PAD], [UNK] and [CLS]
# rows, then one self-attention block. Row 0 is the [CLS] summary.

# %%
table = EmbeddingTable(["she", "um", "went", "home"], 16, rng)
ids = np.concatenate([[table.cls_id], table.ids(["she", "um", "went", "home"])])
x = embed_lookup(table, ids)
block = AttentionBlockParams(rng, 16, heads=4)
h_t, weights = self_attention_block(x, block)
print("text encoding", h_t.shape, "attention", weights.shape, "(heads, query, key)")
print("rows sum to one:", np.allclose(weights.sum(-1), 1.0))
print("[CLS] vector", cls_pool(h_t).shape)

# %% [markdown]
# Cross attention takes queries from one sequence and keys/values from another.

# %%
cross = AttentionBlockParams(rng, 16, heads=4, cross=True)
source = Tensor(rng.standard_normal((6, 16)))
out, w = cross_attention_block(h_t, source, cross)
print("text attending to 6 gesture tokens:", out.shape, w.shape)
