"""Speech-gesture heterogeneous graph: construction and cross-relation aggregation.

Each sample yields a graph with one keyword node per vocabulary entry and one
gesture and one audio node per token. A keyword node is linked to the
gesture and audio nodes of every position where the text token equals the
keyword. Aggregation is GraphSAGE-style over full neighbourhoods: a node
aggregator summarises each relation's neighbours, a relation-specific
linear map plus relu combines that summary with the node's own state, and a
heterogeneous aggregator merges the per-relation results.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Linear, LSTMParams, Module, glorot, lstm_scan

NODE_AGGREGATORS = ("mean", "pool", "lstm", "bilstm")
HETERO_AGGREGATORS = ("mean", "sum", "max", "min")
RELATIONS = ("v", "a")

_NEG = -1e300


# ---------------------------------------------------------------------------
# vocabulary and graph construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DisfluencyVocabulary:
    keywords: tuple

    def __post_init__(self):
        kws = tuple(self.keywords)
        object.__setattr__(self, "keywords", kws)
        if len(set(kws)) != len(kws):
            raise ValueError("keywords must be unique")

    def __len__(self):
        return len(self.keywords)

    @property
    def index(self) -> dict:
        return {k: i for i, k in enumerate(self.keywords)}

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text("".join(k + "\n" for k in self.keywords), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "DisfluencyVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line for line in lines if line))


def extract_disfluency_keywords(samples: Iterable, m: int) -> DisfluencyVocabulary:
    """The ``m`` most frequent text tokens, ties broken lexicographically.

    Stopwords are kept on purpose.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    counts: Counter = Counter()
    n_samples = 0
    for s in samples:
        n_samples += 1
        counts.update(t.text for t in s.tokens)
    if n_samples == 0:
        raise ValueError("cannot extract keywords from an empty corpus")
    if m > len(counts):
        raise ValueError(f"requested m={m} keywords but only {len(counts)} distinct tokens exist")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return DisfluencyVocabulary(tuple(k for k, _ in ranked[:m]))


@dataclass(frozen=True)
class HeteroGraph:
    n_keywords: int
    n_tokens: int
    keyword_at: tuple  # per position: keyword index or -1
    edges_fv: tuple  # sorted (keyword, position) pairs
    edges_fa: tuple

    def adjacency(self) -> np.ndarray:
        """Boolean ``[m, n]`` keyword-position incidence (identical for both relations)."""
        A = np.zeros((self.n_keywords, self.n_tokens), dtype=bool)
        for f, p in self.edges_fv:
            A[f, p] = True
        return A

    def degree(self, keyword: int) -> int:
        return sum(1 for f, _ in self.edges_fv if f == keyword)


def build_hetero_graph(sample, vocab: DisfluencyVocabulary) -> HeteroGraph:
    """Co-occurrence graph for one sample (or a plain list of token strings)."""
    texts = list(sample) if isinstance(sample, (list, tuple)) else [t.text for t in sample.tokens]
    if not texts:
        raise ValueError("sample has no tokens")
    idx = vocab.index
    at = tuple(idx.get(t, -1) for t in texts)
    edges = tuple(sorted((f, p) for p, f in enumerate(at) if f >= 0))
    return HeteroGraph(len(vocab), len(texts), at, edges, edges)


def batch_adjacency(graphs: Sequence[HeteroGraph]) -> np.ndarray:
    n = {g.n_tokens for g in graphs}
    m = {g.n_keywords for g in graphs}
    if len(n) != 1 or len(m) != 1:
        raise ValueError("graphs in a batch must share token and keyword counts")
    return np.stack([g.adjacency() for g in graphs])


# ---------------------------------------------------------------------------
# node aggregation
# ---------------------------------------------------------------------------


class NodeAggParams(Module):
    def __init__(self, rng, kind: str, d_in: int, hidden: int):
        if kind not in NODE_AGGREGATORS:
            raise ValueError(f"node aggregator must be one of {NODE_AGGREGATORS}, got {kind!r}")
        self.kind = kind
        self.d_in = d_in
        self.hidden = hidden
        if kind == "pool":
            self.pool = Linear(rng, d_in, d_in)
        elif kind == "lstm":
            self.fwd = LSTMParams(rng, d_in, hidden)
        elif kind == "bilstm":
            self.fwd = LSTMParams(rng, d_in, hidden)
            self.bwd = LSTMParams(rng, d_in, hidden)

    @property
    def out_dim(self) -> int:
        return {"mean": self.d_in, "pool": self.d_in, "lstm": self.hidden,
                "bilstm": 2 * self.hidden}[self.kind]


def aggregate_neighbors(source: Tensor, adj: np.ndarray, params: NodeAggParams) -> Tensor:
    """Summarise neighbours for every target node.

    ``source`` is ``[B, S, d]``; ``adj`` is a boolean ``[B, T, S]`` mask.
    Recurrent aggregators read neighbours in ascending source index (token
    position). Targets without neighbours receive the zero vector.
    """
    adj = np.asarray(adj, dtype=bool)
    B, S, d = source.shape
    if adj.shape[0] != B or adj.shape[2] != S:
        raise ShapeError("node_aggregate", source.shape, adj.shape)
    if d != params.d_in:
        raise ShapeError("node_aggregate", source.shape, (params.d_in,))
    T = adj.shape[1]
    deg = adj.sum(axis=-1)
    kind = params.kind
    if kind == "mean":
        w = adj / np.maximum(deg, 1)[..., None]
        return Tensor(w) @ source
    if kind == "pool":
        z = ad.relu(params.pool(source))
        z4 = ad.broadcast_to(ad.reshape(z, (B, 1, S, d)), (B, T, S, d))
        masked = ad.where(adj[..., None], z4, _NEG)
        return ad.where((deg > 0)[..., None], ad.reduce_max(masked, axis=2), 0.0)
    L = int(deg.max()) if deg.size else 0
    if L == 0:
        return Tensor(np.zeros((B, T, params.out_dim)))
    idx = np.zeros((B * T, L), dtype=np.int64)
    mask = np.zeros((B * T, L), dtype=bool)
    for b in range(B):
        for t in range(T):
            pos = np.flatnonzero(adj[b, t])
            r = b * T + t
            idx[r, :pos.size] = b * S + pos
            mask[r, :pos.size] = True
    seq = ad.getitem(ad.reshape(source, (B * S, d)), idx)
    _, h = lstm_scan(seq, params.fwd, mask=mask)
    if kind == "bilstm":
        _, hb = lstm_scan(seq, params.bwd, reverse=True, mask=mask)
        h = ad.concat([h, hb], axis=-1)
    return ad.reshape(h, (B, T, params.out_dim))


def node_aggregate(neighbor_vectors: Tensor, params: NodeAggParams) -> Tensor:
    """Aggregate a ``[q, d]`` neighbour list into a single vector."""
    q = neighbor_vectors.shape[0]
    if q == 0:
        return Tensor(np.zeros(params.out_dim))
    src = ad.reshape(neighbor_vectors, (1, q, neighbor_vectors.shape[1]))
    out = aggregate_neighbors(src, np.ones((1, 1, q), dtype=bool), params)
    return ad.reshape(out, (params.out_dim,))


def sage_update(h_prev: Tensor, h_neigh: Tensor, W: Tensor) -> Tensor:
    """relu(W . (h_prev concat h_neigh)), with ``W`` shaped ``[d_prev + d_neigh, d_out]``."""
    cat = ad.concat([h_prev, h_neigh], axis=-1)
    if W.ndim != 2 or W.shape[0] != cat.shape[-1]:
        raise ShapeError("sage_update", cat.shape, W.shape)
    if cat.ndim == 1:
        return ad.reshape(ad.relu(ad.reshape(cat, (1, -1)) @ W), (W.shape[1],))
    return ad.relu(cat @ W)


def hetero_aggregate(per_relation: Sequence[Tensor], kind: str) -> Tensor:
    """Elementwise mean/sum/max/min across relation-specific representations."""
    if kind not in HETERO_AGGREGATORS:
        raise ValueError(f"hetero aggregator must be one of {HETERO_AGGREGATORS}, got {kind!r}")
    if not per_relation:
        raise ValueError("hetero_aggregate: empty relation list")
    if len(per_relation) == 1:
        return per_relation[0]
    st = ad.stack(list(per_relation), axis=0)
    return {"mean": ad.reduce_mean, "sum": ad.reduce_sum, "max": ad.reduce_max,
            "min": ad.reduce_min}[kind](st, axis=0)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


class RelationParams(Module):
    """Aggregator and update weight for messages into ``target`` from ``source`` nodes."""

    def __init__(self, rng, kind: str, d_target: int, d_source: int, d_out: int, agg_hidden: int):
        self.agg = NodeAggParams(rng, kind, d_source, agg_hidden)
        self.W = glorot(rng, d_target + self.agg.out_dim, d_out)


class GraphEncoderParams(Module):
    def __init__(self, rng, d_keyword: int, d_gesture: int, d_audio: int, d_out: int,
                 depth: int = 1, node_agg: str = "bilstm", hetero_agg: str = "min",
                 agg_hidden: int = 16, relations: Sequence[str] = RELATIONS):
        if depth < 1:
            raise ValueError("graph depth must be >= 1")
        if node_agg not in NODE_AGGREGATORS:
            raise ValueError(f"node aggregator must be one of {NODE_AGGREGATORS}, got {node_agg!r}")
        if hetero_agg not in HETERO_AGGREGATORS:
            raise ValueError(f"hetero aggregator must be one of {HETERO_AGGREGATORS}, "
                             f"got {hetero_agg!r}")
        relations = tuple(r for r in RELATIONS if r in relations)
        if not relations:
            raise ValueError("graph needs at least one of the gesture/audio relations")
        self.depth, self.node_agg, self.hetero_agg = depth, node_agg, hetero_agg
        self.relations = relations
        self.d_out = d_out
        self.dims_in = {"f": d_keyword, "v": d_gesture, "a": d_audio}
        self.layers = []
        dims = dict(self.dims_in)
        for _ in range(depth):
            layer = {}
            for r in relations:
                layer[f"f<-{r}"] = RelationParams(rng, node_agg, dims["f"], dims[r], d_out, agg_hidden)
                layer[f"{r}<-f"] = RelationParams(rng, node_agg, dims[r], dims["f"], d_out, agg_hidden)
            self.layers.append(layer)
            dims = {k: d_out for k in dims}


def encode_graph(graph, node_inputs: dict, params: GraphEncoderParams) -> dict:
    """Run ``params.depth`` rounds of cross-relation aggregation.

    ``graph`` is a :class:`HeteroGraph`, a list of them, or a boolean
    ``[B, m, n]`` keyword-position adjacency. ``node_inputs`` maps ``"f"``
    (keyword, ``[m, d]`` shared or ``[B, m, d]``), ``"v"`` and ``"a"``
    (``[B, n, d]``, or ``[n, d]`` with an unbatched adjacency) to tensors. Returns refined tensors for ``"f"`` and each
    relation's modality, all with feature size ``params.d_out``.
    """
    single = isinstance(graph, HeteroGraph) or (isinstance(graph, np.ndarray) and graph.ndim == 2)
    if isinstance(graph, HeteroGraph):
        adj = graph.adjacency()[None]
    elif isinstance(graph, np.ndarray):
        adj = graph.astype(bool).reshape((-1,) + graph.shape[-2:])
    else:
        adj = batch_adjacency(graph)
    B, m, n = adj.shape
    h = {}
    for key, val in node_inputs.items():
        if key != "f" and key not in params.relations:
            continue
        if val.ndim == 2:
            val = ad.reshape(val, (1,) + val.shape)
            if key == "f" and B > 1:
                val = ad.broadcast_to(val, (B,) + val.shape[1:])
        h[key] = val
    for key in ("f",) + params.relations:
        if key not in h:
            raise KeyError(f"missing node input {key!r}")
        if h[key].shape[-1] != params.dims_in[key]:
            raise ShapeError("encode_graph", h[key].shape, (params.dims_in[key],),
                             detail=f"node type {key}")
    if h["f"].shape[:2] != (B, m):
        raise ShapeError("encode_graph", h["f"].shape, adj.shape, detail="keyword nodes")
    for r in params.relations:
        if h[r].shape[:2] != (B, n):
            raise ShapeError("encode_graph", h[r].shape, adj.shape, detail=f"{r} nodes")
    adj_t = np.swapaxes(adj, 1, 2)
    for layer in params.layers:
        parts = []
        new = {}
        for r in params.relations:
            rel = layer[f"f<-{r}"]
            parts.append(sage_update(h["f"], aggregate_neighbors(h[r], adj, rel.agg), rel.W))
            rel = layer[f"{r}<-f"]
            new[r] = sage_update(h[r], aggregate_neighbors(h["f"], adj_t, rel.agg), rel.W)
        new["f"] = hetero_aggregate(parts, params.hetero_agg)
        h = new
    if single:
        h = {k: ad.reshape(v, v.shape[1:]) for k, v in h.items()}
    return h


def keyword_positions(texts: Sequence[str], vocab: DisfluencyVocabulary) -> np.ndarray:
    idx = vocab.index
    return np.array([idx.get(t, -1) for t in texts], dtype=np.int64)


def adjacency_from_positions(kw_at: np.ndarray, m: int) -> np.ndarray:
    """``[B, n]`` keyword indices (-1 for none) to a ``[B, m, n]`` adjacency."""
    kw_at = np.asarray(kw_at)
    return kw_at[:, None, :] == np.arange(m)[None, :, None]


def neighbor_order(adj_row: np.ndarray) -> Optional[np.ndarray]:
    return np.flatnonzero(adj_row)
