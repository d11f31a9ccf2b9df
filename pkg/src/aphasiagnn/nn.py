"""Neural sequence blocks: embeddings, bidirectional LSTMs, attention blocks."""
from __future__ import annotations

from typing import Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

PAD, UNK, CLS = "[PAD]", "[UNK]", "[CLS]"
RESERVED = (PAD, UNK, CLS)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


class Module:
    """Holds parameter tensors and sub-modules as attributes.

    Parameters are discovered in attribute-insertion order, which keeps
    naming (and therefore optimizer state and checkpoints) deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            yield from _walk(val, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError("load_state_dict", p.shape, arr.shape, detail=k)
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(val, name: str) -> Iterator[tuple[str, Tensor]]:
    # containers may nest (e.g. a list of per-layer dicts of modules)
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(val, dict):
        for k, item in val.items():
            yield from _walk(item, f"{name}.{k}")


def param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-lim, lim, size=(fan_in, fan_out)))


def zeros(*shape) -> Tensor:
    return param(np.zeros(shape))


def ones(*shape) -> Tensor:
    return param(np.ones(shape))


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.W = glorot(rng, d_in, d_out)
        self.b = zeros(d_out) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError("linear", x.shape, self.W.shape)
        if x.ndim == 1:
            y = ad.reshape(ad.reshape(x, (1, self.d_in)) @ self.W, (self.d_out,))
        else:
            y = x @ self.W
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = ones(d)
        self.beta = zeros(d)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return ad.reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


class EmbeddingTable(Module):
    """Trainable token embedding table with reserved [PAD], [UNK], [CLS] rows."""

    def __init__(self, tokens: Sequence[str], dim: int, rng: np.random.Generator,
                 scale: float = 0.1):
        vocab = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(vocab)) != len(vocab):
            raise ValueError("duplicate tokens in embedding vocabulary")
        self.vocab = vocab
        self.index = {t: i for i, t in enumerate(vocab)}
        self.dim = dim
        self.weights = param(rng.normal(0.0, scale, size=(len(vocab), dim)))

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    def ids(self, tokens: Sequence[str]) -> np.ndarray:
        unk = self.unk_id
        return np.array([self.index.get(t, unk) for t in tokens], dtype=np.int64)


def embed_lookup(table, ids) -> Tensor:
    """Rows of ``table`` (an :class:`EmbeddingTable` or a weight tensor) at ``ids``.

    A batched table ``[B, V, d]`` with ids ``[B, n]`` gathers per sample.
    """
    weights = table.weights if isinstance(table, EmbeddingTable) else table
    ids = np.asarray(ids, dtype=np.int64)
    V = weights.shape[-2]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embed_lookup: token id out of range [0, {V})")
    if weights.ndim == 2:
        return ad.getitem(weights, ids)
    if weights.ndim == 3 and ids.ndim == 2 and ids.shape[0] == weights.shape[0]:
        rows = np.arange(ids.shape[0])[:, None]
        return ad.getitem(weights, (rows, ids))
    raise ShapeError("embed_lookup", weights.shape, ids.shape)


# ---------------------------------------------------------------------------
# recurrent encoders
# ---------------------------------------------------------------------------


class LSTMParams(Module):
    """One direction of a single LSTM layer; gates ordered [input, forget, cell, output]."""

    def __init__(self, rng, d_in: int, hidden: int):
        self.Wx = glorot(rng, d_in, 4 * hidden)
        self.Wh = glorot(rng, hidden, 4 * hidden)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.b = param(b)
        self.d_in, self.hidden = d_in, hidden


def lstm_scan(x: Tensor, p: LSTMParams, reverse: bool = False,
              mask: Optional[np.ndarray] = None) -> tuple[list, Tensor]:
    """Run an LSTM over ``x`` of shape ``[R, L, d_in]``.

    Returns per-step hidden states (indexed by time, in original order) and
    the final hidden state. Where ``mask[r, t]`` is False the state is carried
    unchanged, so padded rows with no valid steps end at the zero state.
    """
    R, L, d = x.shape
    if d != p.d_in:
        raise ShapeError("lstm", x.shape, p.Wx.shape)
    H = p.hidden
    xp = x @ p.Wx + p.b
    state = Tensor(np.zeros((R, 2 * H)))
    outs: list = [None] * L
    steps = range(L - 1, -1, -1) if reverse else range(L)
    for t in steps:
        gates = xp[:, t, :] + state[:, :H] @ p.Wh
        new = ad.lstm_cell(gates, state[:, H:])
        if mask is not None:
            new = ad.where(mask[:, t:t + 1], new, state)
        state = new
        outs[t] = state[:, :H]
    return outs, state[:, :H]


class BiRecurrentParams(Module):
    def __init__(self, rng, d_in: int, hidden: int, layers: int = 1):
        if layers < 1:
            raise ValueError("layers must be >= 1")
        self.fwd = []
        self.bwd = []
        for i in range(layers):
            din = d_in if i == 0 else 2 * hidden
            self.fwd.append(LSTMParams(rng, din, hidden))
            self.bwd.append(LSTMParams(rng, din, hidden))
        self.d_in, self.hidden, self.layers = d_in, hidden, layers

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden


def birnn_encode(seq: Tensor, params: BiRecurrentParams) -> Tensor:
    """Bidirectional LSTM encoding; output ``[.., n, 2 * hidden]``.

    Position i concatenates the forward state after tokens 1..i with the
    backward state after tokens n..i.
    """
    x, squeeze = _batched(seq)
    if x.shape[1] == 0:
        raise ValueError("birnn_encode: empty sequence")
    for fp, bp in zip(params.fwd, params.bwd):
        f_out, _ = lstm_scan(x, fp)
        b_out, _ = lstm_scan(x, bp, reverse=True)
        x = ad.concat([ad.stack(f_out, axis=1), ad.stack(b_out, axis=1)], axis=-1)
    return _unbatched(x, squeeze)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


class MultiHeadAttention(Module):
    def __init__(self, rng, d: int, heads: int):
        if d % heads:
            raise ValueError(f"model dim {d} not divisible by head count {heads}")
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.o = Linear(rng, d, d)
        self.d, self.heads = d, heads

    def __call__(self, query: Tensor, kv: Tensor) -> tuple[Tensor, np.ndarray]:
        B, nq, d = query.shape
        nk = kv.shape[1]
        h = self.heads
        dh = d // h

        def split(t, n):
            return ad.transpose(ad.reshape(t, (B, n, h, dh)), (0, 2, 1, 3))

        Q = split(self.q(query), nq)
        K = split(self.k(kv), nk)
        V = split(self.v(kv), nk)
        scores = ad.scale(Q @ ad.transpose(K), 1.0 / np.sqrt(dh))
        weights = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.transpose(weights @ V, (0, 2, 1, 3)), (B, nq, d))
        return self.o(ctx), weights.data


class FeedForward(Module):
    def __init__(self, rng, d: int, hidden: int):
        self.l1 = Linear(rng, d, hidden)
        self.l2 = Linear(rng, hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(ad.relu(self.l1(x)))


class AttentionBlockParams(Module):
    """Pre-norm attention block; ``cross=True`` adds a separate key/value norm."""

    def __init__(self, rng, d: int, heads: int = 4, ffn_mult: int = 2, cross: bool = False):
        self.ln_q = LayerNorm(d)
        self.ln_kv = LayerNorm(d) if cross else None
        self.attn = MultiHeadAttention(rng, d, heads)
        self.ln_ff = LayerNorm(d)
        self.ffn = FeedForward(rng, d, ffn_mult * d)
        self.d, self.heads, self.cross = d, heads, cross


def _block(target: Tensor, source: Optional[Tensor], p: AttentionBlockParams,
           dropout: float, training: bool, rng) -> tuple[Tensor, np.ndarray]:
    qn = p.ln_q(target)
    kvn = qn if source is None else (p.ln_kv or p.ln_q)(source)
    a, w = p.attn(qn, kvn)
    x = target + ad.dropout(a, dropout, training, rng)
    f = p.ffn(p.ln_ff(x))
    return x + ad.dropout(f, dropout, training, rng), w


def self_attention_block(seq: Tensor, params: AttentionBlockParams, dropout: float = 0.0,
                         training: bool = False, rng=None) -> tuple[Tensor, np.ndarray]:
    """Pre-norm multi-head self-attention followed by a feed-forward sublayer.

    Returns the output sequence and attention weights ``[.., heads, n, n]``.
    """
    if seq.shape[-1] != params.d:
        raise ShapeError("self_attention_block", seq.shape, (params.d,))
    x, squeeze = _batched(seq)
    if x.shape[1] < 1:
        raise ValueError("self_attention_block: empty sequence")
    out, w = _block(x, None, params, dropout, training, rng)
    return _unbatched(out, squeeze), (w[0] if squeeze else w)


def cross_attention_block(target: Tensor, source: Tensor, params: AttentionBlockParams,
                          dropout: float = 0.0, training: bool = False,
                          rng=None) -> tuple[Tensor, np.ndarray]:
    """Queries from ``target``, keys and values from ``source``; residual onto target."""
    if target.shape[-1] != params.d or source.shape[-1] != params.d:
        raise ShapeError("cross_attention_block", target.shape, source.shape)
    t, squeeze = _batched(target)
    s, _ = _batched(source)
    if t.shape[0] != s.shape[0]:
        raise ShapeError("cross_attention_block", target.shape, source.shape,
                         detail="batch sizes differ")
    if t.shape[1] < 1 or s.shape[1] < 1:
        raise ValueError("cross_attention_block: empty sequence")
    out, w = _block(t, s, params, dropout, training, rng)
    return _unbatched(out, squeeze), (w[0] if squeeze else w)


def cls_pool(seq: Tensor) -> Tensor:
    """Row 0 of ``[n+1, d]`` (or ``[B, n+1, d]``), the [CLS] slot."""
    if seq.ndim < 2 or seq.shape[-2] == 0:
        raise ValueError("cls_pool: empty sequence")
    return seq[..., 0, :]
