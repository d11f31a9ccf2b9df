import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aphasiagnn.corpus import (AUDIO_DIM, GESTURE_SHAPE, AlignedSample, AlignedToken, ClassLabel,
                               Corpus, CorpusFormatError, chunk_session, format_corpus,
                               group_stratified_kfold, parse_corpus, parse_corpus_text, rechunk,
                               split_disjoint_subjects, write_corpus)
from aphasiagnn.graph import extract_disfluency_keywords
from aphasiagnn.synthetic import (DISFLUENCY_TOKENS, JOINT_WEIGHTS, SyntheticConfig,
                                  generate_synthetic)
from aphasiagnn.corpus import KEYPOINT_NAMES


def make_tokens(n, dur=0.5, seed=0, texts=None):
    rng = np.random.default_rng(seed)
    out = []
    t = 0.0
    for i in range(n):
        text = texts[i] if texts else f"w{i % 7}"
        out.append(AlignedToken(text, rng.standard_normal(GESTURE_SHAPE),
                                rng.standard_normal(AUDIO_DIM), t, t + dur))
        t += dur
    return out


def toy_corpus(subjects_per_class=(10, 10, 10, 10), samples_per_subject=1):
    samples = []
    for label, k in zip(ClassLabel, subjects_per_class):
        for s in range(k):
            for j in range(samples_per_subject):
                samples.append(AlignedSample(f"{label.display}-{s}", label, make_tokens(2, dur=2.0),
                                             f"{label.display}-{s}-0"))
    return Corpus(samples, {"source": "toy"})


class TestFormat:
    def test_empty_round_trip(self, tmp_path):
        p = write_corpus(Corpus([], {"a": 1}), tmp_path / "c.jsonl")
        assert len(p.read_text().splitlines()) == 1
        c = parse_corpus(p)
        assert len(c) == 0 and c.metadata == {"a": 1}

    def test_one_sample_bit_identical(self, tmp_path):
        s = AlignedSample("S1", ClassLabel.FLUENT, make_tokens(3, dur=1.1), "S1-0")
        s.tokens[0].gesture[0, 0] = 0.1 + 0.2  # not exactly representable as a short decimal
        p = write_corpus(Corpus([s]), tmp_path / "c.jsonl")
        back = parse_corpus(p)
        assert back.samples[0] == s
        for a, b in zip(back.samples[0].tokens, s.tokens):
            assert a.gesture.tobytes() == b.gesture.tobytes()
            assert a.audio.tobytes() == b.audio.tobytes()

    def test_gesture_arity_error_names_token(self):
        s = AlignedSample("S1", ClassLabel.CONTROL, make_tokens(3), "")
        text = format_corpus(Corpus([s]))
        lines = text.splitlines()
        rec = json.loads(lines[1])
        rec["tokens"][2]["gesture"] = rec["tokens"][2]["gesture"][:66]  # 22 keypoints
        lines[1] = json.dumps(rec)
        with pytest.raises(CorpusFormatError) as ei:
            parse_corpus_text("\n".join(lines))
        assert ei.value.line == 2 and ei.value.field == "gesture" and ei.value.token_index == 2
        assert "token 2" in str(ei.value)

    @pytest.mark.parametrize("mutate,field", [
        (lambda r: r.pop("label"), "label"),
        (lambda r: r.update(label="Aphasic"), "label"),
        (lambda r: r["tokens"][0].update(t_end=-1.0), "t_end"),
        (lambda r: r["tokens"][1]["audio"].append(0.0), "audio"),
        (lambda r: r.update(tokens=[]), "tokens"),
    ])
    def test_malformed_fields(self, mutate, field):
        s = AlignedSample("S1", ClassLabel.CONTROL, make_tokens(2), "")
        lines = format_corpus(Corpus([s, s])).splitlines()
        rec = json.loads(lines[2])
        mutate(rec)
        lines[2] = json.dumps(rec)
        with pytest.raises(CorpusFormatError) as ei:
            parse_corpus_text("\n".join(lines))
        assert ei.value.line == 3 and ei.value.field == field

    def test_bad_header(self):
        with pytest.raises(CorpusFormatError):
            parse_corpus_text('{"format": "other", "version": 1}\n')

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(list(ClassLabel)), st.integers(1, 4),
                              st.integers(0, 2**31 - 1),
                              st.lists(st.text(min_size=0, max_size=6), min_size=4, max_size=4)),
                    min_size=0, max_size=4))
    def test_random_round_trip(self, specs):
        samples = []
        for i, (label, n, seed, texts) in enumerate(specs):
            rng = np.random.default_rng(seed)
            toks = make_tokens(n, dur=float(rng.uniform(0.01, 3.0)), seed=seed, texts=texts)
            for t in toks:
                t.gesture = t.gesture * 10.0 ** rng.integers(-300, 300)
            samples.append(AlignedSample(f"s{i}é", label, toks, f"sess{i}"))
        c = Corpus(samples, {"seed": 1})
        assert parse_corpus_text(format_corpus(c)) == c


class TestChunk:
    def test_50_50_20(self):
        out = chunk_session(make_tokens(120, dur=0.5), 50)
        assert [s.n_tokens for s in out] == [50, 50, 20]

    def test_short_remainder_dropped(self):
        toks = make_tokens(50, dur=1.0) + make_tokens(5, dur=0.5, seed=1)
        t0 = toks[49].t_end
        for i, t in enumerate(toks[50:]):
            t.t_start, t.t_end = t0 + 0.5 * i, t0 + 0.5 * (i + 1)
        out = chunk_session(toks, 50)
        assert [s.n_tokens for s in out] == [50]

    def test_thirty_token_variant(self):
        assert [s.n_tokens for s in chunk_session(make_tokens(30), 30)] == [30]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 60), st.floats(0.05, 1.0))
    def test_counts(self, total, n, dur):
        toks = make_tokens(total, dur=dur)
        out = chunk_session(toks, n)
        assert sum(s.n_tokens for s in out) <= total
        rem = total % n or n
        if rem * dur >= 3.0 and n * dur >= 3.0:
            assert sum(s.n_tokens for s in out) == total
        for s in out:
            s.validate()

    def test_rechunk(self):
        c = Corpus(chunk_session(make_tokens(100), 50, subject_id="A", session_id="A-0"))
        r = rechunk(c, 25)
        assert [s.n_tokens for s in r.samples] == [25] * 4


class TestSplits:
    def test_disjoint_and_ratio(self):
        c = toy_corpus()
        tr, te = split_disjoint_subjects(c, 0.8, seed=3)
        assert not set(tr.subjects()) & set(te.subjects())
        per_class = Counter(s.label for s in te.samples)
        assert all(v == 2 for v in per_class.values())

    def test_deterministic(self):
        c = toy_corpus()
        a = split_disjoint_subjects(c, 0.8, 5)[1].subjects()
        assert a == split_disjoint_subjects(c, 0.8, 5)[1].subjects()

    def test_single_subject_class(self):
        with pytest.raises(ValueError, match="NonFluent"):
            split_disjoint_subjects(toy_corpus((3, 3, 3, 1)), 0.8, 0)

    def test_kfold_partition(self):
        c = toy_corpus((5, 5, 5, 5))
        folds = group_stratified_kfold(c, 5, seed=1)
        vals = [set(v.subjects()) for _, v in folds]
        assert set().union(*vals) == set(c.subjects())
        assert sum(len(v) for v in vals) == len(c.subjects())
        for tr, va in folds:
            assert not set(tr.subjects()) & set(va.subjects())

    def test_leave_one_subject_out(self):
        c = toy_corpus((2, 2, 2, 2))
        folds = group_stratified_kfold(c, 8, seed=0)
        assert all(len(v.subjects()) == 1 for _, v in folds)

    @pytest.mark.parametrize("seed", range(5))
    def test_kfold_class_balance_exhaustive(self, seed):
        counts = (7, 5, 5, 3)  # 20 subjects
        c = toy_corpus(counts)
        folds = group_stratified_kfold(c, 5, seed)
        labels = c.subject_labels()
        for _, va in folds:
            per = Counter(labels[s] for s in va.subjects())
            for lab, total in zip(ClassLabel, counts):
                assert abs(per.get(lab, 0) - total / 5) <= 1

    def test_kfold_too_few(self):
        with pytest.raises(ValueError):
            group_stratified_kfold(toy_corpus((1, 1, 1, 1)), 5)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(2, 6), min_size=4, max_size=4), st.integers(0, 1000),
           st.integers(2, 5))
    def test_every_split_disjoint(self, counts, seed, k):
        c = toy_corpus(tuple(counts), samples_per_subject=2)
        tr, te = split_disjoint_subjects(c, 0.8, seed)
        assert not set(tr.subjects()) & set(te.subjects())
        assert len(tr) + len(te) == len(c)
        for a, b in group_stratified_kfold(c, k, seed):
            assert not set(a.subjects()) & set(b.subjects())


class TestSynthetic:
    def test_deterministic_bytes(self):
        cfg = SyntheticConfig(subjects_per_class=2, seed=7)
        assert format_corpus(generate_synthetic(cfg)) == format_corpus(generate_synthetic(cfg))

    def test_samples_valid(self):
        c = generate_synthetic(SyntheticConfig(subjects_per_class=2, seed=1))
        for s in c.samples:
            s.validate()
            for t in s.tokens:
                t.validate()
        assert set(Counter(c.subject_labels().values()).values()) == {2}

    def test_bad_config(self):
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticConfig(amplitude_multipliers=(1.0, 0.0, 1.0, 1.0)))
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticConfig(disfluency_rates=(0.1, 1.5, 0.1, 0.1)))

    def test_wrist_std_scales_with_multiplier(self):
        cfg = SyntheticConfig(subjects_per_class=125, session_tokens=(100, 100), chunk_size=25,
                              seed=0)
        c = generate_synthetic(cfg)
        wrists = [KEYPOINT_NAMES.index("LEFT_WRIST"), KEYPOINT_NAMES.index("RIGHT_WRIST")]
        disfl = set(DISFLUENCY_TOKENS)
        stds = {}
        for label in (ClassLabel.CONTROL, ClassLabel.NON_FLUENT):
            samples = [s for s in c.samples if s.label == label][:500]
            assert len(samples) == 500
            g = np.stack([t.gesture[wrists] for s in samples for t in s.tokens if t.text in disfl])
            stds[label] = g.std(axis=0).mean()
        ratio = stds[ClassLabel.NON_FLUENT] / stds[ClassLabel.CONTROL]
        assert abs(ratio - 3.0) <= 0.15 * 3.0

    def test_keyword_rates_rank_classes(self):
        cfg = SyntheticConfig(subjects_per_class=20, seed=2)
        c = generate_synthetic(cfg)
        disfl = set(DISFLUENCY_TOKENS)
        rate = {}
        for label in ClassLabel:
            toks = [t.text for s in c.samples if s.label == label for t in s.tokens]
            rate[label] = sum(t in disfl for t in toks) / len(toks)
            p = cfg.disfluency_rates[label]
            assert abs(rate[label] - p) <= 4 * np.sqrt(p * (1 - p) / len(toks))
        assert rate[ClassLabel.NON_FLUENT] > rate[ClassLabel.FLUENT] > rate[ClassLabel.CONTROL]

    def test_keyword_extraction_sees_disfluency_tokens(self):
        c = generate_synthetic(SyntheticConfig(subjects_per_class=5, seed=0))
        top = extract_disfluency_keywords(c.samples, 10).keywords
        assert "[*]" in top

    def test_joint_weights_wrists_largest(self):
        assert JOINT_WEIGHTS.max() == JOINT_WEIGHTS[KEYPOINT_NAMES.index("LEFT_WRIST"), 0]
