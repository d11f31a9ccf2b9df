"""Transcript and gesture statistics: word error rate, one-way ANOVA, pose spread."""
from __future__ import annotations

import csv
import re
import string
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import betainc

from .corpus import KEYPOINT_NAMES, N_CLASSES, ClassLabel, Corpus

_PUNCT = re.compile(f"[{re.escape(string.punctuation.replace('[', '').replace(']', '').replace('*', ''))}]")


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance over token sequences with unit costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: Sequence[str], hypothesis: Sequence[str]) -> float:
    """Word error rate: edit distance divided by reference length."""
    if isinstance(reference, str):
        reference = reference.split()
    if isinstance(hypothesis, str):
        hypothesis = hypothesis.split()
    if len(reference) == 0:
        raise ValueError("wer: reference must be non-empty")
    return edit_distance(reference, hypothesis) / len(reference)


def normalize_transcript(tokens: Sequence[str]) -> list[str]:
    """Lowercase and strip punctuation; disfluency markers like ``[*]`` survive."""
    out = []
    for t in tokens:
        t = _PUNCT.sub("", t.lower())
        if t:
            out.append(t)
    return out


def grouped_wer(pairs: Sequence[tuple], preprocess: bool = False) -> dict:
    """Average WER per group from ``(group, reference, hypothesis)`` triples.

    Returns ``{group: {"sample_weighted": .., "token_weighted": .., "n": ..}}``;
    the token-weighted mean is total edits over total reference tokens.
    """
    acc: dict = defaultdict(lambda: [0.0, 0, 0, 0])
    for group, ref, hyp in pairs:
        if preprocess:
            ref, hyp = normalize_transcript(ref), normalize_transcript(hyp)
        d = edit_distance(ref, hyp)
        a = acc[group]
        a[0] += d / len(ref)
        a[1] += d
        a[2] += len(ref)
        a[3] += 1
    return {g: {"sample_weighted": a[0] / a[3], "token_weighted": a[1] / a[2], "n": a[3]}
            for g, a in acc.items()}


def f_survival(f: float, df1: float, df2: float) -> float:
    """P(F > f) for an F(df1, df2) variable via the regularized incomplete beta."""
    if f <= 0:
        return 1.0
    return float(betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f)))


def anova_oneway(groups: Sequence[Sequence[float]]) -> tuple[float, float]:
    """One-way ANOVA F statistic and p-value."""
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2:
        raise ValueError("anova_oneway: need at least 2 groups")
    if any(g.size < 2 for g in groups):
        raise ValueError("anova_oneway: every group needs at least 2 values")
    allv = np.concatenate(groups)
    grand = allv.mean()
    ssb = sum(g.size * (g.mean() - grand) ** 2 for g in groups)
    ssw = sum(((g - g.mean()) ** 2).sum() for g in groups)
    df1 = len(groups) - 1
    df2 = allv.size - len(groups)
    if ssw == 0.0:
        raise ValueError("anova_oneway: zero within-group variance, F is undefined")
    F = (ssb / df1) / (ssw / df2)
    return float(F), f_survival(F, df1, df2)


def pose_std_report(corpus: Corpus) -> np.ndarray:
    """Per-class standard deviation of every gesture coordinate, shape ``[4, 23, 3]``.

    Classes absent from the corpus get NaN rows.
    """
    if len(corpus) == 0:
        raise ValueError("pose_std_report: empty corpus")
    per_class: dict = defaultdict(list)
    for s in corpus.samples:
        per_class[int(s.label)].extend(t.gesture for t in s.tokens)
    out = np.full((N_CLASSES, len(KEYPOINT_NAMES), 3), np.nan)
    for c, gs in per_class.items():
        out[c] = np.std(np.stack(gs), axis=0)
    return out


def write_pose_std_report(table: np.ndarray, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class"] + [f"{k}_{ax}" for k in KEYPOINT_NAMES for ax in "xyz"])
        for c in range(table.shape[0]):
            w.writerow([ClassLabel(c).display] + [repr(float(v)) for v in table[c].reshape(-1)])
    return path
