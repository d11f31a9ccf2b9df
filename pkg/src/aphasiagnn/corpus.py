"""Aligned (text, gesture, audio) token data: records, file format, chunking, splits."""
from __future__ import annotations

import enum
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

N_KEYPOINTS = 23
GESTURE_SHAPE = (N_KEYPOINTS, 3)
GESTURE_DIM = N_KEYPOINTS * 3
AUDIO_DIM = 25
MIN_DURATION = 3.0
FORMAT_NAME = "aphasiagnn-corpus"
FORMAT_VERSION = 1

# upper-body pose landmarks 0..22, in landmark-index order
KEYPOINT_NAMES = (
    "NOSE", "LEFT_EYE_INNER", "LEFT_EYE", "LEFT_EYE_OUTER", "RIGHT_EYE_INNER",
    "RIGHT_EYE", "RIGHT_EYE_OUTER", "LEFT_EAR", "RIGHT_EAR", "MOUTH_LEFT",
    "MOUTH_RIGHT", "LEFT_SHOULDER", "RIGHT_SHOULDER", "LEFT_ELBOW", "RIGHT_ELBOW",
    "LEFT_WRIST", "RIGHT_WRIST", "LEFT_PINKY", "RIGHT_PINKY", "LEFT_INDEX",
    "RIGHT_INDEX", "LEFT_THUMB", "RIGHT_THUMB",
)


class ClassLabel(enum.IntEnum):
    CONTROL = 0
    FLUENT = 1
    NON_COMPREHENSION = 2
    NON_FLUENT = 3

    @property
    def display(self) -> str:
        return _DISPLAY[self]

    @classmethod
    def parse(cls, value) -> "ClassLabel":
        if isinstance(value, ClassLabel):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).replace("-", "").replace("_", "").replace(" ", "").lower()
        for lab, name in _DISPLAY.items():
            if name.lower() == key:
                return lab
        raise ValueError(f"unknown class label {value!r}")


_DISPLAY = {
    ClassLabel.CONTROL: "Control",
    ClassLabel.FLUENT: "Fluent",
    ClassLabel.NON_COMPREHENSION: "NonComprehension",
    ClassLabel.NON_FLUENT: "NonFluent",
}
N_CLASSES = len(ClassLabel)


class CorpusFormatError(ValueError):
    """Malformed corpus record; carries the 1-based line number and field."""

    def __init__(self, line: int, field_name: str, message: str, token_index: Optional[int] = None):
        self.line = line
        self.field = field_name
        self.token_index = token_index
        where = f"line {line}, field {field_name!r}"
        if token_index is not None:
            where += f", token {token_index}"
        super().__init__(f"{where}: {message}")


@dataclass
class AlignedToken:
    text: str
    gesture: np.ndarray  # (23, 3)
    audio: np.ndarray  # (25,)
    t_start: float
    t_end: float

    def __post_init__(self):
        self.gesture = np.asarray(self.gesture, dtype=np.float64)
        self.audio = np.asarray(self.audio, dtype=np.float64)

    def validate(self) -> None:
        if self.gesture.shape != GESTURE_SHAPE:
            raise ValueError(f"gesture must be {GESTURE_SHAPE}, got {self.gesture.shape}")
        if self.audio.shape != (AUDIO_DIM,):
            raise ValueError(f"audio must be ({AUDIO_DIM},), got {self.audio.shape}")
        if not (self.t_end > self.t_start >= 0):
            raise ValueError(f"need t_end > t_start >= 0, got {self.t_start}, {self.t_end}")

    def __eq__(self, other):
        if not isinstance(other, AlignedToken):
            return NotImplemented
        return (self.text == other.text and self.t_start == other.t_start
                and self.t_end == other.t_end
                and np.array_equal(self.gesture, other.gesture)
                and np.array_equal(self.audio, other.audio))


@dataclass
class AlignedSample:
    subject_id: str
    label: ClassLabel
    tokens: list
    session_id: str = ""

    def __post_init__(self):
        self.label = ClassLabel.parse(self.label)

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def texts(self) -> list[str]:
        return [t.text for t in self.tokens]

    @property
    def duration(self) -> float:
        return self.tokens[-1].t_end - self.tokens[0].t_start if self.tokens else 0.0

    def gesture_matrix(self) -> np.ndarray:
        """Token gestures flattened to ``[n, 69]``."""
        return np.stack([t.gesture.reshape(-1) for t in self.tokens])

    def audio_matrix(self) -> np.ndarray:
        return np.stack([t.audio for t in self.tokens])

    def validate(self, min_duration: float = MIN_DURATION) -> None:
        if not self.tokens:
            raise ValueError("sample has no tokens")
        for tok in self.tokens:
            tok.validate()
        for a, b in zip(self.tokens, self.tokens[1:]):
            if b.t_start < a.t_start:
                raise ValueError("token timestamps decrease")
        if self.duration < min_duration:
            raise ValueError(f"sample duration {self.duration:.3f}s below {min_duration}s")


@dataclass
class Corpus:
    samples: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def subjects(self) -> list[str]:
        return sorted({s.subject_id for s in self.samples})

    def subject_labels(self) -> dict[str, ClassLabel]:
        """Subject -> label; raises if a subject carries two labels."""
        out: dict[str, ClassLabel] = {}
        for s in self.samples:
            prev = out.setdefault(s.subject_id, s.label)
            if prev != s.label:
                raise ValueError(f"subject {s.subject_id!r} has samples with different labels")
        return out

    def subset(self, subjects: Iterable[str]) -> "Corpus":
        keep = set(subjects)
        return Corpus([s for s in self.samples if s.subject_id in keep], dict(self.metadata))

    def labels(self) -> np.ndarray:
        return np.array([int(s.label) for s in self.samples], dtype=np.int64)


# ---------------------------------------------------------------------------
# file format: one JSON header line, then one JSON record per sample
# ---------------------------------------------------------------------------


def _token_record(tok: AlignedToken) -> dict:
    return {
        "text": tok.text,
        "gesture": tok.gesture.reshape(-1).tolist(),
        "audio": tok.audio.tolist(),
        "t_start": float(tok.t_start),
        "t_end": float(tok.t_end),
    }


def sample_to_record(s: AlignedSample) -> dict:
    return {
        "subject_id": s.subject_id,
        "session_id": s.session_id,
        "label": s.label.display,
        "tokens": [_token_record(t) for t in s.tokens],
    }


def format_corpus(corpus: Corpus) -> str:
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "metadata": corpus.metadata}
    lines = [json.dumps(header, sort_keys=True, allow_nan=False)]
    for s in corpus.samples:
        lines.append(json.dumps(sample_to_record(s), allow_nan=False))
    return "\n".join(lines) + "\n"


def write_corpus(corpus: Corpus, path) -> Path:
    path = Path(path)
    path.write_text(format_corpus(corpus), encoding="utf-8")
    return path


def _floats(value, n: int, line: int, name: str, ti: int) -> np.ndarray:
    if not isinstance(value, list):
        raise CorpusFormatError(line, name, "expected a list of numbers", ti)
    if len(value) != n:
        raise CorpusFormatError(line, name, f"expected {n} values, got {len(value)}", ti)
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise CorpusFormatError(line, name, "non-numeric value", ti)
    return np.array(value, dtype=np.float64)


def _parse_token(rec, line: int, ti: int) -> AlignedToken:
    if not isinstance(rec, dict):
        raise CorpusFormatError(line, "tokens", "token record must be an object", ti)
    for key in ("text", "gesture", "audio", "t_start", "t_end"):
        if key not in rec:
            raise CorpusFormatError(line, key, "missing field", ti)
    if not isinstance(rec["text"], str):
        raise CorpusFormatError(line, "text", "expected a string", ti)
    gesture = _floats(rec["gesture"], GESTURE_DIM, line, "gesture", ti).reshape(GESTURE_SHAPE)
    audio = _floats(rec["audio"], AUDIO_DIM, line, "audio", ti)
    times = []
    for key in ("t_start", "t_end"):
        v = rec[key]
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise CorpusFormatError(line, key, "expected a number", ti)
        times.append(float(v))
    if not times[1] > times[0] >= 0:
        raise CorpusFormatError(line, "t_end", "need t_end > t_start >= 0", ti)
    return AlignedToken(rec["text"], gesture, audio, times[0], times[1])


def parse_record(rec, line: int = 1) -> AlignedSample:
    if not isinstance(rec, dict):
        raise CorpusFormatError(line, "record", "expected an object")
    for key in ("subject_id", "label", "tokens"):
        if key not in rec:
            raise CorpusFormatError(line, key, "missing field")
    try:
        label = ClassLabel.parse(rec["label"])
    except ValueError as e:
        raise CorpusFormatError(line, "label", str(e)) from None
    toks = rec["tokens"]
    if not isinstance(toks, list) or not toks:
        raise CorpusFormatError(line, "tokens", "expected a non-empty list")
    tokens = [_parse_token(t, line, i) for i, t in enumerate(toks)]
    for i in range(1, len(tokens)):
        if tokens[i].t_start < tokens[i - 1].t_start:
            raise CorpusFormatError(line, "t_start", "timestamps decrease", i)
    return AlignedSample(str(rec["subject_id"]), label, tokens, str(rec.get("session_id", "")))


def parse_corpus_text(text: str) -> Corpus:
    lines = text.splitlines()
    if not lines:
        raise CorpusFormatError(1, "header", "empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CorpusFormatError(1, "header", f"invalid JSON: {e.msg}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise CorpusFormatError(1, "format", f"expected format {FORMAT_NAME!r}")
    if header.get("version") != FORMAT_VERSION:
        raise CorpusFormatError(1, "version", f"unsupported version {header.get('version')!r}")
    samples = []
    for no, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(no, "record", f"invalid JSON: {e.msg}") from None
        samples.append(parse_record(rec, no))
    return Corpus(samples, header.get("metadata") or {})


def parse_corpus(path) -> Corpus:
    return parse_corpus_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# chunking and splitting
# ---------------------------------------------------------------------------


def chunk_session(tokens: Sequence[AlignedToken], n: int = 50, min_duration: float = MIN_DURATION,
                  subject_id: str = "", label=ClassLabel.CONTROL,
                  session_id: str = "") -> list[AlignedSample]:
    """Cut a session into consecutive non-overlapping windows of ``n`` tokens.

    Any window (in practice, the short remainder) spanning less than
    ``min_duration`` seconds is dropped.
    """
    if n < 1:
        raise ValueError("chunk size must be >= 1")
    out = []
    for start in range(0, len(tokens), n):
        window = list(tokens[start:start + n])
        s = AlignedSample(subject_id, label, window, session_id)
        if s.duration >= min_duration:
            out.append(s)
    return out


def _sessions(corpus: Corpus) -> dict:
    groups: dict = defaultdict(list)
    for s in corpus.samples:
        groups[(s.subject_id, s.session_id, s.label)].append(s)
    return groups


def rechunk(corpus: Corpus, n: int, min_duration: float = MIN_DURATION) -> Corpus:
    """Re-join each session's chunks in order and chunk again with window ``n``."""
    out = []
    for (subj, sess, label), samples in _sessions(corpus).items():
        tokens = [t for s in samples for t in s.tokens]
        out.extend(chunk_session(tokens, n, min_duration, subj, label, sess))
    meta = dict(corpus.metadata)
    meta["chunk_size"] = n
    return Corpus(out, meta)


def _subjects_by_class(corpus: Corpus) -> tuple[dict, Counter]:
    labels = corpus.subject_labels()
    counts = Counter(s.subject_id for s in corpus.samples)
    by_class: dict = defaultdict(list)
    for subj in sorted(labels):
        by_class[labels[subj]].append(subj)
    return by_class, counts


def split_disjoint_subjects(corpus: Corpus, ratio: float = 0.8,
                            seed: int = 0) -> tuple[Corpus, Corpus]:
    """Subject-disjoint train/test split, stratified by class.

    Within each class, subjects are shuffled with ``seed`` and moved to the
    test side while that brings the test share of samples closer to
    ``1 - ratio``. Each side keeps at least one subject per class.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    by_class, counts = _subjects_by_class(corpus)
    rng = np.random.default_rng(seed)
    test: set = set()
    for label in sorted(by_class):
        subs = by_class[label]
        if len(subs) < 2:
            raise ValueError(f"class {ClassLabel(label).display} has only {len(subs)} subject; "
                             "need at least 2 for a subject-disjoint split")
        order = [subs[i] for i in rng.permutation(len(subs))]
        total = sum(counts[s] for s in subs)
        target = (1.0 - ratio) * total
        chosen, n_test = [], 0
        for s in order:
            if len(chosen) == len(subs) - 1:
                break
            if not chosen or abs(n_test + counts[s] - target) < abs(n_test - target):
                chosen.append(s)
                n_test += counts[s]
        test.update(chosen)
    train = corpus.subset(s for s in counts if s not in test)
    return train, corpus.subset(test)


def group_stratified_kfold(corpus: Corpus, k: int = 5, seed: int = 0) -> list[tuple[Corpus, Corpus]]:
    """k (train, validation) pairs with every subject in exactly one validation fold.

    Each class's shuffled subjects are dealt round-robin, starting where the
    previous class stopped, so fold sizes stay balanced and per-class counts
    differ from proportional by at most one subject.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    by_class, counts = _subjects_by_class(corpus)
    n_subjects = sum(len(v) for v in by_class.values())
    if n_subjects < k:
        raise ValueError(f"need at least k={k} subjects, corpus has {n_subjects}")
    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    offset = 0
    for label in sorted(by_class):
        subs = by_class[label]
        order = [subs[i] for i in rng.permutation(len(subs))]
        for i, s in enumerate(order):
            folds[(offset + i) % k].append(s)
        offset += len(order)
    everyone = set(counts)
    return [(corpus.subset(everyone - set(f)), corpus.subset(f)) for f in folds]
