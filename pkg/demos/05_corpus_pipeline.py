# %% [markdown]
# # Corpus, splits and statistics
#
# Samples are token streams where every token carries its text, a 23x3 pose
# and 25 audio descriptors. Corpora are stored as JSON lines.

# %%
import tempfile
from pathlib import Path

import numpy as np

from aphasiagnn.corpus import (ClassLabel, KEYPOINT_NAMES, group_stratified_kfold, parse_corpus,
                               split_disjoint_subjects, write_corpus)
from aphasiagnn.stats import anova_oneway, grouped_wer, pose_std_report
from aphasiagnn.synthetic import SyntheticConfig, generate_synthetic

corpus = generate_synthetic(SyntheticConfig(subjects_per_class=10, seed=0))
print(len(corpus), "samples from", len(corpus.subjects()), "subjects")

with tempfile.TemporaryDirectory() as d:
    path = write_corpus(corpus, Path(d) / "corpus.jsonl")
    print("round trip equal:", parse_corpus(path) == corpus)

# %% [markdown]
# Splits never put one subject on both sides.

# %%
train, test = split_disjoint_subjects(corpus, 0.8, seed=0)
print("train/test subjects overlap:", set(train.subjects()) & set(test.subjects()))
for i, (tr, va) in enumerate(group_stratified_kfold(corpus, 5, seed=0)):
    print(f"fold {i}: {len(va.subjects())} validation subjects")

# %% [markdown]
# Gesture amplitude per class. Disfluent tokens in the NonFluent class move
# three times as much as in Control.

# %%
table = pose_std_report(corpus)
wrist = KEYPOINT_NAMES.index("RIGHT_WRIST")
for label in ClassLabel:
    print(f"{label.display:>17}: right-wrist std {table[int(label), wrist].mean():.4f}")

# %% [markdown]
# One-way ANOVA on those per-sample spreads, and word error rates by group.

# %%
groups = [[np.std(s.gesture_matrix()[:, wrist * 3]) for s in corpus.samples if s.label == c]
          for c in ClassLabel]
F, p = anova_oneway(groups)
print(f"F = {F:.2f}, p = {p:.3g}")
print(grouped_wer([("asr", "she went to the ball".split(), "she want to ball".split())]))
