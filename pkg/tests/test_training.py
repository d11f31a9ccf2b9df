import numpy as np
import pytest

from aphasiagnn import training
from aphasiagnn.ablation import AXES, ablate, apply_point, parse_axis, run_experiment
from aphasiagnn.autodiff import NumericError, Tensor
from aphasiagnn.model import ModelConfig
from aphasiagnn.synthetic import SyntheticConfig, generate_synthetic
from aphasiagnn.training import (EarlyStopping, OptimizerState, TrainConfig, adamw_step,
                                 confusion_matrix, lr_exponential, make_batches,
                                 report_from_confusion, report_from_predictions, train)

from oracles import metrics_brute

TINY_MODEL = dict(d_text=8, rnn_hidden=4, d_graph=8, agg_hidden=4, d_cross=4, heads=2,
                  text_layers=1)


def tiny_corpus(seed=0, subjects=3):
    return generate_synthetic(SyntheticConfig(subjects_per_class=subjects, session_tokens=(24, 24),
                                              chunk_size=12, seed=seed))


def tiny_config(**kw):
    base = dict(epochs=2, patience=2, batch_size=8, n_keywords=4, model=ModelConfig(**TINY_MODEL))
    base.update(kw)
    return TrainConfig(**base)


class TestAdamW:
    def test_zero_grad_no_decay_unchanged(self):
        p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        adamw_step(p, {"w": np.zeros(2)}, OptimizerState(lr=0.1, weight_decay=0.0))
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    @pytest.mark.parametrize("g", [0.3, -5.0, 1e-3])
    def test_first_step_closed_form(self, g):
        eta, eps = 0.01, 1e-8
        p = {"w": np.array([0.7])}
        adamw_step(p, {"w": np.array([g])}, OptimizerState(lr=eta, eps=eps, weight_decay=0.0))
        # m_hat = g and v_hat = g^2 after one step
        assert p["w"][0] == pytest.approx(0.7 - eta * g / (abs(g) + eps), abs=1e-15)
        assert abs(p["w"][0] - 0.7) == pytest.approx(eta, rel=1e-4)

    def test_decoupled_decay(self):
        eta, lam = 0.1, 0.5
        p = {"w": np.array([2.0, -4.0])}
        st = OptimizerState(lr=eta, weight_decay=lam)
        for k in range(1, 4):
            adamw_step(p, {"w": np.zeros(2)}, st)
            np.testing.assert_allclose(p["w"], np.array([2.0, -4.0]) * (1 - eta * lam) ** k,
                                       rtol=1e-15)

    def test_lr_zero_identity(self):
        rng = np.random.default_rng(0)
        w0 = rng.standard_normal((3, 4))
        p = {"w": w0.copy()}
        st = OptimizerState(lr=0.0, weight_decay=0.3)
        for _ in range(5):
            adamw_step(p, {"w": rng.standard_normal((3, 4))}, st)
        np.testing.assert_array_equal(p["w"], w0)
        assert st.step == 5

    def test_nan_names_parameter(self):
        with pytest.raises(NumericError, match="layer.W"):
            adamw_step({"layer.W": np.zeros(2)}, {"layer.W": np.array([np.nan, 0.0])},
                       OptimizerState())

    def test_shape_mismatch(self):
        from aphasiagnn.autodiff import ShapeError
        with pytest.raises(ShapeError):
            adamw_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState())


class TestSchedule:
    def test_values(self):
        assert lr_exponential(0.1, 0.9, 0) == 0.1
        assert lr_exponential(0.1, 1.0, 17) == 0.1
        assert lr_exponential(0.8, 0.5, 3) == 0.1

    def test_bad_gamma(self):
        with pytest.raises(ValueError):
            lr_exponential(0.1, 0.0, 1)

    def test_published_gamma_flag(self):
        assert TrainConfig().effective_gamma == 0.95
        assert TrainConfig(published_gamma=True).effective_gamma == 0.001


class TestMetrics:
    def test_toy_confusion(self):
        rep = report_from_confusion(np.array([[2, 1], [0, 3]]))
        np.testing.assert_allclose(rep.precision, [1.0, 0.75])
        np.testing.assert_allclose(rep.recall, [2 / 3, 1.0])
        f0, f1 = 0.8, 2 * 0.75 / 1.75
        assert rep.weighted_f1 == pytest.approx(0.5 * f0 + 0.5 * f1, abs=1e-15)

    def test_all_correct(self):
        rep = report_from_predictions([0, 1, 2, 3, 3], [0, 1, 2, 3, 3])
        np.testing.assert_array_equal(rep.f1, 1.0)

    def test_never_predicted_class_zero(self):
        rep = report_from_predictions([0, 1, 2, 2], [0, 1, 1, 1])
        assert rep.precision[2] == 0.0 and rep.f1[2] == 0.0
        assert rep.rows()[3][1] == "0.000"

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            y = rng.integers(0, 4, n)
            p = np.where(rng.random(n) < 0.5, y, rng.integers(0, 4, n))
            rep = report_from_predictions(y, p)
            P, R, F, S, wp, wr, wf = metrics_brute(list(y), list(p), 4)
            assert np.array_equal(rep.precision, P) and np.array_equal(rep.recall, R)
            assert np.array_equal(rep.f1, F) and np.array_equal(rep.support, S)
            assert abs(rep.weighted_precision - wp) <= 1e-15
            assert abs(rep.weighted_recall - wr) <= 1e-15
            assert abs(rep.weighted_f1 - wf) <= 1e-15
            assert rep.support.sum() == n
            np.testing.assert_array_equal(rep.confusion.sum(axis=1), rep.support)

    def test_weighted_f1_between_extremes(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            y = rng.integers(0, 4, 30)
            p = rng.integers(0, 4, 30)
            rep = report_from_predictions(y, p)
            nz = rep.support > 0
            assert rep.f1[nz].min() - 1e-15 <= rep.weighted_f1 <= rep.f1[nz].max() + 1e-15

    def test_confusion_length_mismatch(self):
        with pytest.raises(ValueError):
            confusion_matrix([0, 1], [0])


class TestEarlyStopping:
    def test_stops_at_epoch_10(self):
        es = EarlyStopping(7)
        scores = [0.1, 0.2, 0.3] + [0.3] * 20
        stop = next(e for e, s in enumerate(scores, 1) if es.update(s, e))
        assert stop == 10 and es.best_epoch == 3

    def test_train_restores_best(self, monkeypatch):
        scripted = iter([0.2, 0.5, 0.4, 0.45, 0.3])
        snapshots = []
        real = training.report_from_predictions

        def fake(labels, preds):
            rep = real(labels, preds)
            rep.weighted_f1 = next(scripted)
            return rep

        monkeypatch.setattr(training, "report_from_predictions", fake)
        res = train(tiny_corpus(), tiny_config(epochs=5, patience=3),
                    log=lambda row: snapshots.append(row))
        assert res.best_epoch == 2 and res.stopped_epoch == 5 and res.best_val_f1 == 0.5
        assert [r["epoch"] for r in snapshots] == [1, 2, 3, 4, 5]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=3, patience=7).validate()
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0).validate()


class TestBatches:
    def test_equal_lengths_and_cover(self):
        c = generate_synthetic(SyntheticConfig(subjects_per_class=3, seed=1))
        batches = make_batches(c.samples, 4, np.random.default_rng(0))
        assert sorted(i for b in batches for i in b) == list(range(len(c)))
        for b in batches:
            assert len({c.samples[i].n_tokens for i in b}) == 1 and len(b) <= 4


class TestTrain:
    def test_deterministic(self):
        a = train(tiny_corpus(), tiny_config())
        b = train(tiny_corpus(), tiny_config())
        assert a.history == b.history
        sa, sb = a.model.state_dict(), b.model.state_dict()
        assert sa.keys() == sb.keys()
        for k in sa:
            assert sa[k].tobytes() == sb[k].tobytes()

    def test_loss_decreases(self):
        res = train(tiny_corpus(subjects=4), tiny_config(epochs=6, patience=6))
        losses = [h["train_loss"] for h in res.history]
        assert abs(losses[0] - np.log(4)) < 0.2
        assert losses[-1] < losses[0]

    def test_keywords_from_train_split_only(self):
        from aphasiagnn.corpus import Corpus
        c = tiny_corpus()
        val = Corpus([s for s in c.samples[:4]])
        tr = Corpus(c.samples[4:])
        res = train(tr, tiny_config(epochs=1, patience=1), val_corpus=val)
        train_tokens = {t.text for s in tr.samples for t in s.tokens}
        assert set(res.model.keywords.keywords) <= train_tokens

    def test_empty(self):
        from aphasiagnn.corpus import Corpus
        with pytest.raises(ValueError):
            train(Corpus([]), tiny_config())


class TestAblation:
    def test_one_point_equals_direct_run(self):
        c = tiny_corpus(subjects=5)
        base = tiny_config()
        rows = ablate(c, {"hetero": ["min"]}, base, seeds=[0])
        direct = run_experiment(c, apply_point(base, {"hetero": "min"}))
        assert len(rows) == 1
        assert rows[0]["f1"] == direct["f1"] and rows[0]["precision"] == direct["precision"]

    def test_m_sweep_three_rows(self):
        c = tiny_corpus(subjects=5)
        rows = ablate(c, {"m": [1, 2, 3]}, tiny_config(epochs=1, patience=1))
        assert [r["m"] for r in rows] == [1, 2, 3]

    def test_invalid_value_lists_valid(self):
        with pytest.raises(ValueError, match="mean"):
            parse_axis("hetero=median")
        with pytest.raises(ValueError, match="node"):
            parse_axis("bogus=1")

    def test_text_only_disables_graph(self):
        cfg = apply_point(tiny_config(), {"modality": "T"})
        assert not cfg.model.graph_active
        assert set(AXES) == {"node", "hetero", "fusion", "modality", "m", "chunk", "graph",
                             "update"}
