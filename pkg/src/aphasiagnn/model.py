"""Gesture-aware multimodal classifier.

Pipeline per sample: recurrent encoders over gesture and audio streams, the
speech-gesture graph refining keyword/gesture/audio nodes, keyword rows of
the word-embedding table replaced by projected keyword nodes, a
self-attention text encoder with a prepended [CLS] slot, cross-modal
attention between every ordered modality pair, fusion onto the [CLS]
residual, and a two-layer decoder.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .corpus import AUDIO_DIM, GESTURE_DIM, N_CLASSES, AlignedSample
from .graph import (HETERO_AGGREGATORS, NODE_AGGREGATORS, DisfluencyVocabulary,
                    GraphEncoderParams, adjacency_from_positions, encode_graph,
                    keyword_positions)
from .nn import (AttentionBlockParams, BiRecurrentParams, EmbeddingTable, Linear, Module,
                 birnn_encode, cross_attention_block, embed_lookup, self_attention_block)

FUSION_KINDS = ("mult", "concat", "multiply", "add", "sp-lite")
MODALITY_SUBSETS = ("T", "V", "A", "TV", "TA", "TVA")
UPDATE_MODES = ("replace", "blend")
POOLINGS = ("last", "mean")


@dataclass
class ModelConfig:
    d_text: int = 64
    rnn_hidden: int = 32
    rnn_layers: int = 1
    d_graph: int = 32
    graph_depth: int = 1
    node_agg: str = "bilstm"
    hetero_agg: str = "min"
    agg_hidden: int = 16
    d_cross: int = 32
    heads: int = 4
    ffn_mult: int = 2
    text_layers: int = 2
    fusion: str = "mult"
    modalities: str = "TVA"
    use_graph: bool = True
    update_embeddings: bool = True
    update_mode: str = "replace"
    pooling: str = "last"
    dropout: float = 0.1
    uniform_init: bool = True

    def validate(self) -> None:
        if self.node_agg not in NODE_AGGREGATORS:
            raise ValueError(f"node_agg must be one of {NODE_AGGREGATORS}")
        if self.hetero_agg not in HETERO_AGGREGATORS:
            raise ValueError(f"hetero_agg must be one of {HETERO_AGGREGATORS}")
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"fusion must be one of {FUSION_KINDS}")
        if self.modalities not in MODALITY_SUBSETS:
            raise ValueError(f"modalities must be one of {MODALITY_SUBSETS}")
        if self.update_mode not in UPDATE_MODES:
            raise ValueError(f"update_mode must be one of {UPDATE_MODES}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        for name in ("d_text", "rnn_hidden", "rnn_layers", "d_graph", "graph_depth",
                     "agg_hidden", "d_cross", "heads", "ffn_mult", "text_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def large(cls, **kw) -> "ModelConfig":
        """768-wide preset with 2 recurrent layers; pair with lr 1e-5."""
        base = dict(d_text=768, rnn_hidden=768, rnn_layers=2, d_graph=768, agg_hidden=384,
                    d_cross=768, dropout=0.1)
        base.update(kw)
        return cls(**base)

    @property
    def graph_active(self) -> bool:
        return self.use_graph and "T" in self.modalities and len(self.modalities) > 1

    @property
    def update_active(self) -> bool:
        return self.graph_active and self.update_embeddings

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# stage functions
# ---------------------------------------------------------------------------


def keyword_scatter(table: EmbeddingTable, vocab: DisfluencyVocabulary) -> np.ndarray:
    """One-hot ``[V, m]`` map from keyword index to table row."""
    S = np.zeros((table.vocab_size, len(vocab)))
    for f, kw in enumerate(vocab.keywords):
        if kw not in table.index:
            raise KeyError(f"keyword {kw!r} is not in the embedding table")
        S[table.index[kw], f] = 1.0
    return S


def update_word_embeddings(table: EmbeddingTable, vocab: DisfluencyVocabulary,
                           h_f_refined: Optional[Tensor], proj: Optional[Linear] = None,
                           mode: str = "replace") -> Tensor:
    """Embedding weights with keyword rows replaced by ``proj(h_f_refined)``.

    ``h_f_refined`` may be ``[m, d_g]`` or batched ``[B, m, d_g]``; the result
    is ``[V, d_t]`` or ``[B, V, d_t]``. ``proj=None`` means identity.
    ``mode="blend"`` adds the projection to the existing rows instead.
    """
    W = table.weights
    if len(vocab) == 0 or h_f_refined is None:
        return W
    x = proj(h_f_refined) if proj is not None else h_f_refined
    if x.shape[-1] != W.shape[-1] or x.shape[-2] != len(vocab):
        raise ShapeError("update_word_embeddings", x.shape, W.shape)
    S = keyword_scatter(table, vocab)
    rows = Tensor(S) @ x
    if mode == "blend":
        return W + rows
    if mode != "replace":
        raise ValueError(f"update mode must be one of {UPDATE_MODES}")
    keep = np.broadcast_to((S.sum(axis=1) == 0)[:, None], W.shape).astype(np.float64)
    return W * keep + rows


def encode_text(table, token_ids: np.ndarray, blocks: Sequence[AttentionBlockParams],
                cls_id: int, dropout: float = 0.0, training: bool = False, rng=None,
                trace: Optional["AttentionTrace"] = None) -> tuple[Tensor, Tensor]:
    """Prepend [CLS], embed, and run the self-attention stack.

    ``table`` is an :class:`EmbeddingTable` or a (possibly batched) weight
    tensor; ``token_ids`` is ``[n]`` or ``[B, n]``. Returns the full encoding
    ``[.., n+1, d_t]`` and the [CLS] row.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    if ids.shape[1] == 0:
        raise ValueError("encode_text: empty token sequence")
    ids = np.concatenate([np.full((ids.shape[0], 1), cls_id), ids], axis=1)
    weights = table.weights if isinstance(table, EmbeddingTable) else table
    x = embed_lookup(weights, ids)
    for i, blk in enumerate(blocks):
        x, w = self_attention_block(x, blk, dropout, training, rng)
        if trace is not None:
            trace.add(f"T/self{i}", w)
    cls = x[:, 0, :]
    if single:
        return ad.reshape(x, x.shape[1:]), ad.reshape(cls, cls.shape[1:])
    return x, cls


class AttentionTrace:
    """Attention weights keyed by name, each ``[B, heads, n_query, n_key]``."""

    def __init__(self):
        self.matrices: dict[str, np.ndarray] = {}

    def add(self, name: str, weights: np.ndarray) -> None:
        w = np.asarray(weights)
        self.matrices[name] = w if w.ndim == 4 else w[None]

    def __getitem__(self, name):
        return self.matrices[name]

    def __contains__(self, name):
        return name in self.matrices

    def names(self) -> list[str]:
        return list(self.matrices)

    def pairs(self) -> list[str]:
        return [k for k in self.matrices if "->" in k]


class CrossmodalParams(Module):
    """Projections to the common width, directed cross blocks and per-target fusers."""

    def __init__(self, rng, modalities: str, dims: dict, d: int, heads: int, ffn_mult: int,
                 shared: bool = False):
        self.modalities = modalities
        self.d = d
        self.shared = shared
        self.proj = {m: Linear(rng, dims[m], d) for m in modalities}
        k = len(modalities)
        if shared:
            self.cross = {"*": AttentionBlockParams(rng, d, heads, ffn_mult, cross=True)}
            self.fuser = {"*": AttentionBlockParams(rng, (k - 1) * d, heads, ffn_mult)}
        else:
            self.cross = {f"{s}->{t}": AttentionBlockParams(rng, d, heads, ffn_mult, cross=True)
                          for t in modalities for s in modalities if s != t}
            self.fuser = {t: AttentionBlockParams(rng, (k - 1) * d, heads, ffn_mult)
                          for t in modalities}

    @property
    def out_dim(self) -> int:
        return (len(self.modalities) - 1) * self.d

    def cross_block(self, src: str, tgt: str) -> AttentionBlockParams:
        return self.cross["*"] if self.shared else self.cross[f"{src}->{tgt}"]

    def fuser_block(self, tgt: str) -> AttentionBlockParams:
        return self.fuser["*"] if self.shared else self.fuser[tgt]


def _pool(seq: Tensor, pooling: str) -> Tensor:
    if pooling == "mean":
        return ad.reduce_mean(seq, axis=-2)
    return seq[..., -1, :]


def crossmodal_encode(h_t: Optional[Tensor], h_v: Optional[Tensor], h_a: Optional[Tensor],
                      params: CrossmodalParams, pooling: str = "last", dropout: float = 0.0,
                      training: bool = False, rng=None,
                      trace: Optional[AttentionTrace] = None) -> dict:
    """Per target modality: cross-attend to each other modality, concatenate, fuse, pool.

    Inputs are ``[B, n, d_m]`` (or unbatched ``[n, d_m]``). Returns
    ``{modality: [B, (k-1)*d]}``.
    """
    raw = {"T": h_t, "V": h_v, "A": h_a}
    single = False
    seqs = {}
    for m in params.modalities:
        x = raw[m]
        if x is None:
            raise ValueError(f"crossmodal_encode: missing modality {m}")
        if x.ndim == 2:
            single = True
            x = ad.reshape(x, (1,) + x.shape)
        seqs[m] = params.proj[m](x)
    trace = trace if trace is not None else AttentionTrace()
    out = {}
    for tgt in params.modalities:
        parts = []
        for src in params.modalities:
            if src == tgt:
                continue
            y, w = cross_attention_block(seqs[tgt], seqs[src], params.cross_block(src, tgt),
                                         dropout, training, rng)
            trace.add(f"{src}->{tgt}", w)
            parts.append(y)
        z = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)
        z, w = self_attention_block(z, params.fuser_block(tgt), dropout, training, rng)
        trace.add(f"{tgt}/fuse", w)
        u = _pool(z, pooling)
        out[tgt] = ad.reshape(u, (u.shape[-1],)) if single else u
    return out


def fuse(us: Sequence[Tensor], h_cls: Tensor, kind: str = "mult",
         P: Optional[Linear] = None) -> Tensor:
    """Combine pooled modality vectors and add the [CLS] residual.

    ``mult``, ``sp-lite`` and ``concat`` concatenate then project with ``P``;
    ``add`` sums and ``multiply`` takes the elementwise product, both
    requiring vectors already at the text width.
    """
    if kind not in FUSION_KINDS:
        raise ValueError(f"fusion kind must be one of {FUSION_KINDS}")
    us = list(us)
    if not us:
        raise ValueError("fuse: no modality vectors")
    if kind in ("mult", "sp-lite", "concat"):
        if P is None:
            raise ValueError(f"fusion kind {kind!r} needs a projection")
        cat = us[0] if len(us) == 1 else ad.concat(us, axis=-1)
        if cat.shape[-1] != P.d_in:
            raise ShapeError("fuse", cat.shape, P.W.shape)
        z = P(cat)
    else:
        for u in us:
            if u.shape != h_cls.shape:
                raise ShapeError("fuse", u.shape, h_cls.shape, detail=f"{kind} fusion")
        z = us[0]
        for u in us[1:]:
            z = z + u if kind == "add" else z * u
    if z.shape != h_cls.shape:
        raise ShapeError("fuse", z.shape, h_cls.shape)
    return z + h_cls


class Decoder(Module):
    def __init__(self, rng, d_in: int, d_hidden: int, n_out: int = N_CLASSES,
                 uniform: bool = False):
        self.F1 = Linear(rng, d_in, d_hidden)
        self.F2 = Linear(rng, d_hidden, n_out)
        if uniform:
            self.F2.W.data[...] = 0.0


def predict(u_final: Tensor, decoder: Decoder) -> Tensor:
    """Logits ``F2(relu(F1(u)))``; no softmax."""
    return decoder.F2(ad.relu(decoder.F1(u_final)))


# ---------------------------------------------------------------------------
# batches and the full model
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    token_ids: np.ndarray  # [B, n]
    keyword_at: np.ndarray  # [B, n], -1 where no keyword
    gestures: np.ndarray  # [B, n, 69]
    audio: np.ndarray  # [B, n, 25]
    labels: np.ndarray  # [B]
    texts: list = field(default_factory=list)
    sample_ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


def sample_key(sample: AlignedSample, index: int = 0) -> str:
    sid = sample.session_id or sample.subject_id
    return f"{sid}#{index}"


class AphasiaModel(Module):
    """Full classifier; holds every trainable tensor."""

    def __init__(self, config: ModelConfig, tokens: Sequence[str],
                 keywords: DisfluencyVocabulary, seed: int = 0):
        config.validate()
        self.config = config
        self.keywords = keywords
        rng = np.random.default_rng(seed)
        c = config
        mods = c.modalities
        self.table = EmbeddingTable(tokens, c.d_text, rng)
        for kw in keywords.keywords:
            if kw not in self.table.index:
                raise KeyError(f"keyword {kw!r} missing from token vocabulary")
        self.gesture_rnn = BiRecurrentParams(rng, GESTURE_DIM, c.rnn_hidden, c.rnn_layers) \
            if "V" in mods else None
        self.audio_rnn = BiRecurrentParams(rng, AUDIO_DIM, c.rnn_hidden, c.rnn_layers) \
            if "A" in mods else None
        d_seq = 2 * c.rnn_hidden
        self.graph = None
        self.kw_proj = None
        if c.graph_active:
            self.graph = GraphEncoderParams(
                rng, c.d_text, d_seq, d_seq, c.d_graph, depth=c.graph_depth, node_agg=c.node_agg,
                hetero_agg=c.hetero_agg, agg_hidden=c.agg_hidden,
                relations=[r for r in ("v", "a") if r.upper() in mods])
            d_seq = c.d_graph
            if c.update_embeddings:
                self.kw_proj = Linear(rng, c.d_graph, c.d_text)
        self.text_blocks = [AttentionBlockParams(rng, c.d_text, c.heads, c.ffn_mult)
                            for _ in range(c.text_layers)] if "T" in mods else []
        self.uni_proj = None
        self.uni_blocks = []
        self.crossmodal = None
        self.P = None
        dims = {"T": c.d_text, "V": d_seq, "A": d_seq}
        k = len(mods)
        if k == 1 and mods != "T":
            self.uni_proj = Linear(rng, d_seq, c.d_text)
            self.uni_blocks = [AttentionBlockParams(rng, c.d_text, c.heads, c.ffn_mult)
                               for _ in range(c.text_layers)]
        elif k > 1:
            if c.fusion == "concat":
                self.concat_proj = {m: Linear(rng, dims[m], c.d_cross) for m in mods}
                self.P = Linear(rng, k * c.d_cross, c.d_text)
            else:
                self.crossmodal = CrossmodalParams(rng, mods, dims, c.d_cross, c.heads,
                                                   c.ffn_mult, shared=(c.fusion == "sp-lite"))
                if c.fusion in ("add", "multiply"):
                    if self.crossmodal.out_dim != c.d_text:
                        raise ShapeError("fuse", (self.crossmodal.out_dim,), (c.d_text,),
                                         detail=f"{c.fusion} fusion needs (k-1)*d_cross == d_text")
                else:
                    self.P = Linear(rng, k * self.crossmodal.out_dim, c.d_text)
        self.decoder = Decoder(rng, c.d_text, c.d_text, N_CLASSES, uniform=c.uniform_init)
        self._scatter = keyword_scatter(self.table, keywords) if self.kw_proj else None

    # -- data -------------------------------------------------------------

    def make_batch(self, samples: Sequence[AlignedSample], keys: Sequence[str] = ()) -> Batch:
        lengths = {s.n_tokens for s in samples}
        if len(lengths) != 1:
            raise ValueError("make_batch: samples must share a token count")
        texts = [s.texts for s in samples]
        return Batch(
            token_ids=np.stack([self.table.ids(t) for t in texts]),
            keyword_at=np.stack([keyword_positions(t, self.keywords) for t in texts]),
            gestures=np.stack([s.gesture_matrix() for s in samples]),
            audio=np.stack([s.audio_matrix() for s in samples]),
            labels=np.array([int(s.label) for s in samples], dtype=np.int64),
            texts=texts,
            sample_ids=list(keys) or [sample_key(s) for s in samples],
        )

    # -- forward ----------------------------------------------------------

    def forward(self, batch: Batch, training: bool = False, rng=None,
                trace: Optional[AttentionTrace] = None) -> tuple[Tensor, AttentionTrace]:
        c = self.config
        mods = c.modalities
        trace = trace if trace is not None else AttentionTrace()
        drop = c.dropout if training else 0.0
        B, n = batch.token_ids.shape
        if n == 0:
            raise ValueError("forward: empty samples")
        h_v = birnn_encode(Tensor(batch.gestures), self.gesture_rnn) if "V" in mods else None
        h_a = birnn_encode(Tensor(batch.audio), self.audio_rnn) if "A" in mods else None
        weights = self.table.weights
        if self.graph is not None:
            adj = adjacency_from_positions(batch.keyword_at, len(self.keywords))
            kw_rows = self.table.ids(self.keywords.keywords)
            nodes = {"f": embed_lookup(self.table, kw_rows)}
            if h_v is not None:
                nodes["v"] = h_v
            if h_a is not None:
                nodes["a"] = h_a
            refined = encode_graph(adj, nodes, self.graph)
            h_v = refined.get("v", h_v)
            h_a = refined.get("a", h_a)
            if self.kw_proj is not None:
                weights = update_word_embeddings(self.table, self.keywords, refined["f"],
                                                 self.kw_proj, c.update_mode)
        if "T" in mods:
            h_t, h_cls = encode_text(weights, batch.token_ids, self.text_blocks,
                                     self.table.cls_id, drop, training, rng, trace)
        if len(mods) == 1:
            if mods == "T":
                u = h_cls
            else:
                x = self.uni_proj(h_v if mods == "V" else h_a)
                for i, blk in enumerate(self.uni_blocks):
                    x, w = self_attention_block(x, blk, drop, training, rng)
                    trace.add(f"{mods}/self{i}", w)
                u = _pool(x, c.pooling)
        elif c.fusion == "concat":
            seqs = {"T": h_t, "V": h_v, "A": h_a}
            us = [_pool(self.concat_proj[m](seqs[m]), c.pooling) for m in mods]
            u = fuse(us, h_cls, "concat", self.P)
        else:
            U = crossmodal_encode(h_t, h_v, h_a, self.crossmodal, c.pooling, drop, training,
                                  rng, trace)
            u = fuse([U[m] for m in mods], h_cls, c.fusion, self.P)
        return predict(u, self.decoder), trace

    def forward_loss(self, batch, training: bool = False, rng=None):
        """Mean cross-entropy over the batch, logits and attention trace."""
        if isinstance(batch, AlignedSample):
            batch = self.make_batch([batch])
        elif isinstance(batch, (list, tuple)):
            batch = self.make_batch(batch)
        logits, trace = self.forward(batch, training, rng)
        return ad.cross_entropy(logits, batch.labels, N_CLASSES), logits, trace

    def predict_proba(self, batch: Batch) -> np.ndarray:
        logits, _ = self.forward(batch, training=False)
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    # -- persistence ------------------------------------------------------

    def save(self, path) -> Path:
        path = Path(path)
        meta = {"config": self.config.to_dict(),
                "tokens": self.table.vocab[3:],
                "keywords": list(self.keywords.keywords)}
        arrays = {f"param:{k}": v for k, v in self.state_dict().items()}
        arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
        with path.open("wb") as fh:
            np.savez(fh, **arrays)
        return path

    @classmethod
    def load(cls, path) -> "AphasiaModel":
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            state = {k[len("param:"):]: z[k] for k in z.files if k.startswith("param:")}
        model = cls(ModelConfig.from_dict(meta["config"]), meta["tokens"],
                    DisfluencyVocabulary(tuple(meta["keywords"])))
        model.load_state_dict(state)
        return model


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------


def _labels_for(modality: str, texts: Sequence[str]) -> list[str]:
    if modality == "T":
        return ["[CLS]"] + [f"{t}@{i}" for i, t in enumerate(texts)]
    return [f"{modality}{i}:{t}" for i, t in enumerate(texts)]


def format_attention_matrix(weights: np.ndarray, pair: str, sample_id: str,
                            row_labels: Sequence[str], col_labels: Sequence[str]) -> str:
    """CSV text for one head-averaged matrix with a one-line ``#`` header."""
    buf = io.StringIO()
    buf.write(f"# pair={pair} sample={sample_id}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query\\key"] + list(col_labels))
    for label, row in zip(row_labels, weights):
        w.writerow([label] + [repr(float(v)) for v in row])
    return buf.getvalue()


def export_attention(trace: AttentionTrace, batch: Batch, index: int, out_dir,
                     pairs: Optional[Sequence[str]] = None) -> list[Path]:
    """Write every directed cross-modal matrix of sample ``index`` to ``out_dir``.

    Weights are averaged over heads; rows remain stochastic.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    texts = batch.texts[index]
    sid = batch.sample_ids[index]
    safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in sid)
    written = []
    for pair in pairs or trace.pairs():
        src, tgt = pair.split("->")
        w = trace[pair][index].mean(axis=0)
        text = format_attention_matrix(w, pair, sid, _labels_for(tgt, texts),
                                       _labels_for(src, texts))
        p = out_dir / f"{safe}_{src}-{tgt}.csv"
        p.write_text(text, encoding="utf-8")
        written.append(p)
    return written


def read_attention_matrix(path) -> tuple[dict, list[str], list[str], np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = dict(part.split("=", 1) for part in lines[0][2:].split())
    rows = list(csv.reader(lines[1:]))
    cols = rows[0][1:]
    labels = [r[0] for r in rows[1:]]
    mat = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return header, labels, cols, mat


def with_overrides(config: ModelConfig, **kw) -> ModelConfig:
    return replace(config, **kw)
