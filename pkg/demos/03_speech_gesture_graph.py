# %% [markdown]
# # The speech-gesture graph
#
# Frequent disfluency tokens become keyword nodes. Every token position
# contributes one gesture node and one audio node; a keyword links to the
# gesture and audio nodes at the positions where it is spoken. GraphSAGE-style
# message passing then refines all three node types.

# %%
import numpy as np

from aphasiagnn.autodiff import Tensor
from aphasiagnn.graph import (GraphEncoderParams, build_hetero_graph, encode_graph,
                              extract_disfluency_keywords)
from aphasiagnn.synthetic import SyntheticConfig, generate_synthetic

corpus = generate_synthetic(SyntheticConfig(subjects_per_class=2, seed=1))
vocab = extract_disfluency_keywords(corpus.samples, m=5)
print("keywords by frequency:", vocab.keywords)

# %%
sample = corpus.samples[0]
graph = build_hetero_graph(sample, vocab)
print(f"{graph.n_keywords} keyword nodes, {graph.n_tokens} gesture and {graph.n_tokens} audio nodes")
print("first keyword-to-gesture edges (keyword, position):", graph.edges_fv[:5])
print("adjacency", graph.adjacency().shape,
      "keyword degrees", [graph.degree(f) for f in range(graph.n_keywords)])

# %% [markdown]
# One layer with the BiLSTM neighbour aggregator and `min` across relations.
# Neighbours are read in the order they are spoken.

# %%
rng = np.random.default_rng(0)
params = GraphEncoderParams(rng, d_keyword=8, d_gesture=69, d_audio=25, d_out=8, depth=1,
                            node_agg="bilstm", hetero_agg="min", agg_hidden=4)
nodes = {"f": Tensor(rng.standard_normal((len(vocab), 8))),
         "v": Tensor(sample.gesture_matrix()),
         "a": Tensor(sample.audio_matrix())}
refined = encode_graph(graph, nodes, params)
for k, v in refined.items():
    print(k, v.shape)
