import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aphasiagnn import autodiff as ad
from aphasiagnn.autodiff import ShapeError, Tensor
from aphasiagnn.graph import (HETERO_AGGREGATORS, NODE_AGGREGATORS, DisfluencyVocabulary,
                              GraphEncoderParams, NodeAggParams, build_hetero_graph,
                              encode_graph, extract_disfluency_keywords, hetero_aggregate,
                              node_aggregate, sage_update)

from oracles import aggregate_dense, all_small_graphs, encode_graph_dense


class _S:
    """Minimal stand-in with a ``tokens`` list of objects carrying ``text``."""

    def __init__(self, texts):
        self.tokens = [type("T", (), {"text": t})() for t in texts]


def enc_params(m_dim=3, d=3, out=3, depth=1, node="mean", hetero="mean", hidden=2, seed=0,
               relations=("v", "a")):
    return GraphEncoderParams(np.random.default_rng(seed), m_dim, d, d, out, depth=depth,
                              node_agg=node, hetero_agg=hetero, agg_hidden=hidden,
                              relations=relations)


class TestKeywords:
    def test_frequency_order(self):
        s = _S(["the"] * 5 + ["um"] * 3 + ["cat"])
        assert extract_disfluency_keywords([s], 2).keywords == ("the", "um")

    def test_single_token(self):
        assert extract_disfluency_keywords([_S(["uh", "uh"])], 1).keywords == ("uh",)

    def test_ties_lexicographic(self):
        s = _S(["b", "a", "c", "b", "a", "c"])
        assert extract_disfluency_keywords([s], 3).keywords == ("a", "b", "c")

    def test_too_many(self):
        with pytest.raises(ValueError, match="only 2"):
            extract_disfluency_keywords([_S(["a", "b"])], 3)

    def test_save_load(self, tmp_path):
        v = DisfluencyVocabulary(("[*]", "the", "um"))
        v.save(tmp_path / "vocab.txt")
        assert (tmp_path / "vocab.txt").read_text() == "[*]\nthe\num\n"
        assert DisfluencyVocabulary.load(tmp_path / "vocab.txt") == v

    def test_unique(self):
        with pytest.raises(ValueError):
            DisfluencyVocabulary(("a", "a"))


class TestBuild:
    def test_edges(self):
        g = build_hetero_graph(["she", "um", "went", "um"], DisfluencyVocabulary(("um",)))
        assert g.edges_fv == ((0, 1), (0, 3))
        assert g.edges_fa == g.edges_fv

    def test_no_keyword(self):
        g = build_hetero_graph(["a", "b"], DisfluencyVocabulary(("um", "uh")))
        assert g.edges_fv == () and g.edges_fa == ()
        assert not g.adjacency().any()

    def test_all_keyword(self):
        g = build_hetero_graph(["um"] * 4, DisfluencyVocabulary(("um",)))
        assert g.degree(0) == 4

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.sampled_from(["a", "b", "um", "uh"]), min_size=1, max_size=12))
    def test_edges_recomputed_from_text(self, texts):
        vocab = DisfluencyVocabulary(("um", "a"))
        g = build_hetero_graph(_S(texts), vocab)
        expect = sorted((vocab.index[t], p) for p, t in enumerate(texts) if t in vocab.index)
        assert list(g.edges_fv) == expect == list(g.edges_fa)
        assert g.n_tokens == len(texts)


class TestNodeAggregate:
    def test_mean(self):
        p = NodeAggParams(np.random.default_rng(0), "mean", 2, 2)
        out = node_aggregate(Tensor([[1.0, 3.0], [3.0, 1.0]]), p)
        np.testing.assert_array_equal(out.data, [2.0, 2.0])

    def test_pool_identity(self):
        p = NodeAggParams(np.random.default_rng(0), "pool", 2, 2)
        p.pool.W.data = np.eye(2)
        p.pool.b.data[:] = 0
        out = node_aggregate(Tensor([[1.0, 0.0], [0.0, 2.0]]), p)
        np.testing.assert_array_equal(out.data, [1.0, 2.0])

    @pytest.mark.parametrize("kind", ["lstm", "bilstm"])
    def test_recurrent_oracle(self, kind):
        p = NodeAggParams(np.random.default_rng(1), kind, 3, 4)
        vecs = np.random.default_rng(2).standard_normal((2, 3))
        out = node_aggregate(Tensor(vecs), p).data
        np.testing.assert_allclose(out, aggregate_dense(list(vecs), p), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("kind", NODE_AGGREGATORS)
    def test_empty_is_zero(self, kind):
        p = NodeAggParams(np.random.default_rng(0), kind, 3, 4)
        out = node_aggregate(Tensor(np.zeros((0, 3))), p)
        np.testing.assert_array_equal(out.data, np.zeros(p.out_dim))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            NodeAggParams(np.random.default_rng(0), "attention", 3, 4)


class TestSageUpdate:
    def test_zero_weight(self):
        out = sage_update(Tensor([1.0, -2.0]), Tensor([3.0]), Tensor(np.zeros((3, 2))))
        np.testing.assert_array_equal(out.data, [0.0, 0.0])

    def test_identity_nonnegative(self):
        out = sage_update(Tensor([1.0, 2.0]), Tensor([3.0]), Tensor(np.eye(3)))
        np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])

    def test_random_oracle(self):
        rng = np.random.default_rng(0)
        a, b, W = rng.standard_normal(3), rng.standard_normal(2), rng.standard_normal((5, 4))
        out = sage_update(Tensor(a), Tensor(b), Tensor(W)).data
        np.testing.assert_allclose(out, np.maximum(np.concatenate([a, b]) @ W, 0), rtol=0, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sage_update(Tensor([1.0]), Tensor([1.0]), Tensor(np.zeros((3, 2))))


class TestHeteroAggregate:
    def test_min(self):
        out = hetero_aggregate([Tensor([1.0, 2.0]), Tensor([3.0, 0.0])], "min")
        np.testing.assert_array_equal(out.data, [1.0, 0.0])

    @pytest.mark.parametrize("kind", HETERO_AGGREGATORS)
    def test_single_identity(self, kind):
        x = Tensor([1.5, -2.0])
        np.testing.assert_array_equal(hetero_aggregate([x], kind).data, x.data)

    def test_sum_mean_factor(self):
        xs = [Tensor(np.random.default_rng(i).standard_normal(4)) for i in range(3)]
        np.testing.assert_allclose(hetero_aggregate(xs, "sum").data,
                                   3 * hetero_aggregate(xs, "mean").data, rtol=1e-14)

    def test_empty(self):
        with pytest.raises(ValueError):
            hetero_aggregate([], "mean")

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_min_mean_max_order(self, j, seed):
        xs = [Tensor(v) for v in np.random.default_rng(seed).standard_normal((j, 6))]
        lo, mid, hi = (hetero_aggregate(xs, k).data for k in ("min", "mean", "max"))
        assert np.all(lo <= mid + 1e-15) and np.all(mid <= hi + 1e-15)


def _inputs(A, d=3, seed=0):
    m, n = A.shape
    rng = np.random.default_rng(seed)
    return {"f": rng.standard_normal((m, d)), "v": rng.standard_normal((n, d)),
            "a": rng.standard_normal((n, d))}


class TestEncodeGraph:
    def test_three_node_hand_unrolled(self):
        params = enc_params(node="mean", hetero="sum", seed=3)
        A = np.array([[True]])
        h = _inputs(A, seed=4)
        out = encode_graph(A[None], {k: Tensor(v[None]) for k, v in h.items()}, params)
        L = params.layers[0]
        relu = lambda z: np.maximum(z, 0)
        fv = relu(np.concatenate([h["f"][0], h["v"][0]]) @ L["f<-v"].W.data)
        fa = relu(np.concatenate([h["f"][0], h["a"][0]]) @ L["f<-a"].W.data)
        v = relu(np.concatenate([h["v"][0], h["f"][0]]) @ L["v<-f"].W.data)
        a = relu(np.concatenate([h["a"][0], h["f"][0]]) @ L["a<-f"].W.data)
        np.testing.assert_allclose(out["f"].data[0, 0], fv + fa, rtol=0, atol=1e-14)
        np.testing.assert_allclose(out["v"].data[0, 0], v, rtol=0, atol=1e-14)
        np.testing.assert_allclose(out["a"].data[0, 0], a, rtol=0, atol=1e-14)

    def test_isolated_keywords(self):
        params = enc_params(node="bilstm", hetero="min")
        A = np.zeros((2, 3), dtype=bool)
        A[0, 1] = True
        h = _inputs(A)
        out = encode_graph(A[None], {k: Tensor(v[None]) for k, v in h.items()}, params)
        h2 = _inputs(A, seed=9)
        h2["f"][1] = h["f"][1]
        out2 = encode_graph(A[None], {k: Tensor(v[None]) for k, v in h2.items()}, params)
        assert out["f"].data[0, 1].tobytes() == out2["f"].data[0, 1].tobytes()

    @pytest.mark.parametrize("node", ["mean", "pool"])
    def test_position_relabeling_invariance(self, node):
        params = enc_params(node=node, hetero="max")
        rng = np.random.default_rng(0)
        A = rng.random((2, 5)) < 0.4
        h = _inputs(A)
        perm = rng.permutation(5)
        base = encode_graph(A, {k: Tensor(v) for k, v in h.items()}, params)
        hp = {"f": h["f"], "v": h["v"][perm], "a": h["a"][perm]}
        out = encode_graph(A[:, perm], {k: Tensor(v) for k, v in hp.items()}, params)
        np.testing.assert_allclose(out["f"].data, base["f"].data, rtol=0, atol=1e-14)
        np.testing.assert_allclose(out["v"].data, base["v"].data[perm], rtol=0, atol=1e-14)

    def test_accepts_hetero_graph(self):
        vocab = DisfluencyVocabulary(("um", "the"))
        g = build_hetero_graph(["um", "a", "the", "um"], vocab)
        params = enc_params(node="lstm", hetero="mean")
        h = _inputs(g.adjacency())
        out = encode_graph(g, {k: Tensor(v) for k, v in h.items()}, params)
        ref = encode_graph_dense(g.adjacency(), h, params)
        assert out["f"].shape == (2, 3) and out["v"].shape == (4, 3)
        for k in ref:
            np.testing.assert_allclose(out[k].data, ref[k], rtol=0, atol=1e-12)

    def test_single_relation(self):
        params = enc_params(node="pool", hetero="min", relations=("v",))
        A = np.array([[True, False, True]])
        h = _inputs(A)
        out = encode_graph(A, {k: Tensor(v) for k, v in h.items()}, params)
        assert set(out) == {"f", "v"}
        ref = encode_graph_dense(A, {"f": h["f"], "v": h["v"]}, params)
        np.testing.assert_allclose(out["f"].data, ref["f"], rtol=0, atol=1e-13)

    def test_wrong_input_dim(self):
        params = enc_params()
        A = np.ones((1, 2), dtype=bool)
        h = {k: Tensor(v) for k, v in _inputs(A, d=4).items()}
        with pytest.raises(ShapeError):
            encode_graph(A, h, params)

    @pytest.mark.parametrize("node", NODE_AGGREGATORS)
    def test_gradients(self, node):
        params = enc_params(node=node, hetero="mean", depth=2, seed=2)
        A = np.array([[True, False, True], [False, True, False]])
        h = {k: Tensor(v, requires_grad=True) for k, v in _inputs(A, seed=5).items()}
        w = {k: np.random.default_rng(7).standard_normal(v.shape[:1] + (3,)) for k, v in h.items()}

        def loss(_):
            out = encode_graph(A, h, params)
            return sum(((out[k] * Tensor(w[k])).sum() for k in out), Tensor(0.0))

        for k in ("f", "v"):
            assert ad.grad_check(loss, h[k]) < 1e-4
        assert ad.grad_check(loss, params.layers[0]["f<-v"].W) < 1e-4


def test_encode_graph_matches_dense_oracle_exhaustive():
    """Every graph with at most six nodes, depth 1 and 2, all 16 aggregator pairs."""
    graphs = list(all_small_graphs())
    assert len(graphs) == 27
    worst = 0.0
    for node, hetero in itertools.product(NODE_AGGREGATORS, HETERO_AGGREGATORS):
        for depth in (1, 2):
            params = enc_params(node=node, hetero=hetero, depth=depth, seed=depth)
            for i, A in enumerate(graphs):
                h = _inputs(A, seed=i)
                out = encode_graph(A, {k: Tensor(v) for k, v in h.items()}, params)
                ref = encode_graph_dense(A, h, params)
                for k in ref:
                    worst = max(worst, float(np.abs(out[k].data - ref[k]).max()))
    assert worst <= 1e-10


def test_batched_equals_per_graph():
    params = enc_params(node="bilstm", hetero="min", depth=2)
    rng = np.random.default_rng(0)
    A = rng.random((4, 3, 5)) < 0.3
    h = {"f": rng.standard_normal((3, 3)), "v": rng.standard_normal((4, 5, 3)),
         "a": rng.standard_normal((4, 5, 3))}
    out = encode_graph(A, {k: Tensor(v) for k, v in h.items()}, params)
    for b in range(4):
        ref = encode_graph_dense(A[b], {"f": h["f"], "v": h["v"][b], "a": h["a"][b]}, params)
        for k in ref:
            np.testing.assert_allclose(out[k].data[b], ref[k], rtol=0, atol=1e-12)
