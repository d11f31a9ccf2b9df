# %% [markdown]
# # The full classifier
#
# The refined keyword vectors overwrite their rows of the word-embedding table,
# text is re-encoded, every modality attends to the other two, and the pooled
# results are projected and added to the [CLS] vector before a two-layer
# decoder produces four logits.

# %%
import tempfile
from pathlib import Path

import numpy as np

from aphasiagnn.graph import extract_disfluency_keywords
from aphasiagnn.model import AphasiaModel, ModelConfig, export_attention, read_attention_matrix
from aphasiagnn.synthetic import SyntheticConfig, generate_synthetic
from aphasiagnn.training import token_vocabulary

corpus = generate_synthetic(SyntheticConfig(subjects_per_class=2, chunk_size=20, seed=3))
keywords = extract_disfluency_keywords(corpus.samples, 6)
model = AphasiaModel(ModelConfig(), token_vocabulary(corpus.samples), keywords, seed=0)
print("parameter tensors:", len(model.parameters()),
      "numbers:", sum(p.data.size for p in model.parameters()))

# %% [markdown]
# The last decoder layer starts at zero, so an untrained model predicts the
# uniform distribution and its loss is ln 4.

# %%
batch = model.make_batch(corpus.samples[:4])
loss, logits, trace = model.forward_loss(batch)
print("untrained loss", loss.item(), "ln 4 =", np.log(4))
print("recorded attention:", trace.names())

# %% [markdown]
# Cross-modal attention matrices can be written to CSV, one file per directed
# pair, for inspection.

# %%
with tempfile.TemporaryDirectory() as d:
    files = export_attention(trace, batch, 0, d)
    header, rows, cols, mat = read_attention_matrix(
        next(p for p in files if p.name.endswith("_V-T.csv")))
    print(header, "matrix", mat.shape, "row sums", mat.sum(1)[:3])
    print("labels:", rows[:3], cols[:3])
