"""Optimizer, learning-rate schedule, training loop, evaluation metrics."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .corpus import N_CLASSES, ClassLabel, Corpus, split_disjoint_subjects
from .graph import extract_disfluency_keywords
from .model import AphasiaModel, ModelConfig

PUBLISHED_GAMMA = 0.001


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState) -> OptimizerState:
    """One AdamW update, in place on ``params`` (name -> Tensor or ndarray).

    Decay is decoupled: ``theta <- theta * (1 - lr * wd)`` before the Adam
    step. Missing gradients count as zero.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.betas
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    lr, wd = state.lr, state.weight_decay
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(data)
        if g.shape != data.shape:
            raise ad.ShapeError("adamw_step", data.shape, g.shape, detail=name)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        new = data * (1.0 - lr * wd) - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if isinstance(p, Tensor):
            p.data = new
        else:
            p[...] = new
    return state


def lr_exponential(lr0: float, gamma: float, epoch: int) -> float:
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    return lr0 * gamma ** epoch


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    confusion: np.ndarray
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    accuracy: float

    @property
    def n(self) -> int:
        return int(self.support.sum())

    def rows(self, names: Optional[Sequence[str]] = None) -> list[list]:
        """Table rows: per class, then the weighted average."""
        k = len(self.support)
        names = names or ([ClassLabel(i).display for i in range(k)] if k == N_CLASSES
                          else [str(i) for i in range(k)])
        out = [["class", "precision", "recall", "f1", "support"]]
        for i in range(k):
            out.append([names[i], f"{self.precision[i]:.3f}", f"{self.recall[i]:.3f}",
                        f"{self.f1[i]:.3f}", int(self.support[i])])
        out.append(["weighted avg", f"{self.weighted_precision:.3f}",
                    f"{self.weighted_recall:.3f}", f"{self.weighted_f1:.3f}", self.n])
        return out

    def to_dict(self) -> dict:
        return {"precision": self.weighted_precision, "recall": self.weighted_recall,
                "f1": self.weighted_f1, "accuracy": self.accuracy}


def confusion_matrix(y_true, y_pred, n_classes: int = N_CLASSES) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("label and prediction arrays differ in length")
    C = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(C, (y_true, y_pred), 1)
    return C


def report_from_confusion(C: np.ndarray) -> EvalReport:
    """Per-class and support-weighted metrics; undefined ratios are 0."""
    C = np.asarray(C, dtype=np.int64)
    tp = np.diag(C).astype(np.float64)
    pred = C.sum(axis=0).astype(np.float64)
    support = C.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(pred > 0, tp / np.where(pred > 0, pred, 1), 0.0)
        rec = np.where(support > 0, tp / np.where(support > 0, support, 1), 0.0)
        denom = prec + rec
        f1 = np.where(denom > 0, 2 * prec * rec / np.where(denom > 0, denom, 1), 0.0)
    total = support.sum()
    w = support / total if total else np.zeros_like(tp)
    return EvalReport(prec, rec, f1, support, C, float(w @ prec), float(w @ rec),
                      float(w @ f1), float(tp.sum() / total) if total else 0.0)


def report_from_predictions(y_true, y_pred, n_classes: int = N_CLASSES) -> EvalReport:
    return report_from_confusion(confusion_matrix(y_true, y_pred, n_classes))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    patience: int = 7
    lr: float = 1e-3
    gamma: float = 0.95
    published_gamma: bool = False
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    n_keywords: int = 10
    val_ratio: float = 0.8
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        for name in ("epochs", "batch_size", "patience", "n_keywords"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0 or self.gamma <= 0:
            raise ValueError("lr and gamma must be > 0")
        if self.patience > self.epochs:
            raise ValueError("patience must not exceed epochs")
        self.model.validate()

    @property
    def effective_gamma(self) -> float:
        return PUBLISHED_GAMMA if self.published_gamma else self.gamma

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        known = set(cls.__dataclass_fields__)
        return cls(model=model, **{k: v for k, v in d.items() if k in known})


class EarlyStopping:
    """Tracks the best score; ``update`` returns True once patience is exhausted."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, score: float, epoch: int) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.wait = score, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def make_batches(samples: Sequence, batch_size: int, rng: Optional[np.random.Generator] = None
                 ) -> list[list[int]]:
    """Index batches of samples that share a token count.

    With ``rng`` the order inside each length bucket and the batch order are
    shuffled; without it the order is stable.
    """
    buckets: dict = defaultdict(list)
    for i, s in enumerate(samples):
        buckets[s.n_tokens].append(i)
    batches = []
    for n in sorted(buckets):
        idx = np.array(buckets[n])
        if rng is not None:
            idx = idx[rng.permutation(len(idx))]
        batches.extend(idx[i:i + batch_size].tolist() for i in range(0, len(idx), batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def token_vocabulary(samples: Sequence) -> list[str]:
    return sorted({t.text for s in samples for t in s.tokens})


def predict_samples(model: AphasiaModel, samples: Sequence, batch_size: int = 64
                    ) -> tuple[np.ndarray, np.ndarray, float]:
    """Predicted labels, true labels and mean cross-entropy."""
    preds = np.empty(len(samples), dtype=np.int64)
    labels = np.array([int(s.label) for s in samples], dtype=np.int64)
    loss_sum = 0.0
    for idx in make_batches(samples, batch_size):
        batch = model.make_batch([samples[i] for i in idx])
        logits, _ = model.forward(batch, training=False)
        loss_sum += ad.cross_entropy(logits, batch.labels, N_CLASSES).item() * len(idx)
        preds[idx] = logits.data.argmax(axis=1)
    return preds, labels, loss_sum / max(len(samples), 1)


def evaluate(model: AphasiaModel, samples) -> EvalReport:
    samples = samples.samples if isinstance(samples, Corpus) else list(samples)
    if not samples:
        raise ValueError("evaluate: no samples")
    preds, labels, _ = predict_samples(model, samples)
    return report_from_predictions(labels, preds)


@dataclass
class TrainResult:
    model: AphasiaModel
    history: list
    best_epoch: int
    best_val_f1: float
    stopped_epoch: int


def train(corpus: Corpus, config: TrainConfig, val_corpus: Optional[Corpus] = None,
          log: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Mini-batch AdamW with early stopping on validation weighted F1.

    Without ``val_corpus`` a subject-disjoint slice of ``corpus`` is held out.
    The returned model carries the best-validation parameters.
    """
    config.validate()
    if len(corpus) == 0:
        raise ValueError("train: empty training corpus")
    if val_corpus is None:
        corpus, val_corpus = split_disjoint_subjects(corpus, config.val_ratio, config.seed)
    train_s = list(corpus.samples)
    val_s = list(val_corpus.samples)
    if not val_s:
        raise ValueError("train: empty validation split")
    keywords = extract_disfluency_keywords(train_s, config.n_keywords)
    model = AphasiaModel(config.model, token_vocabulary(train_s), keywords, seed=config.seed)
    params = dict(model.named_parameters())
    opt = OptimizerState(lr=config.lr, betas=tuple(config.betas), eps=config.eps,
                         weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    stopper = EarlyStopping(config.patience)
    best_state = model.state_dict()
    history = []
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        opt.lr = lr_exponential(config.lr, config.effective_gamma, epoch - 1)
        total, count = 0.0, 0
        for idx in make_batches(train_s, config.batch_size, rng):
            batch = model.make_batch([train_s[i] for i in idx])
            model.zero_grad()
            loss, _, _ = model.forward_loss(batch, training=True, rng=drop_rng)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            ad.backward(loss)
            adamw_step(params, {k: p.grad for k, p in params.items()}, opt)
            total += loss.item() * len(idx)
            count += len(idx)
        preds, labels, val_loss = predict_samples(model, val_s)
        rep = report_from_predictions(labels, preds)
        row = {"epoch": epoch, "lr": opt.lr, "train_loss": total / count, "val_loss": val_loss,
               "val_precision": rep.weighted_precision, "val_recall": rep.weighted_recall,
               "val_f1": rep.weighted_f1}
        history.append(row)
        if log:
            log(row)
        improved_before = stopper.best
        stop = stopper.update(rep.weighted_f1, epoch)
        if rep.weighted_f1 > improved_before:
            best_state = model.state_dict()
        if stop:
            break
    model.load_state_dict(best_state)
    model.zero_grad()
    return TrainResult(model, history, stopper.best_epoch, stopper.best, epoch)


def history_rows(history: Sequence[dict]) -> list[list]:
    keys = ["epoch", "lr", "train_loss", "val_loss", "val_precision", "val_recall", "val_f1"]
    return [keys] + [[h[k] if k == "epoch" else repr(float(h[k])) for k in keys] for h in history]
