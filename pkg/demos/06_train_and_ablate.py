# %% [markdown]
# # Training, evaluation and ablation
#
# A deliberately small run so it finishes in about a minute. The acceptance
# suite trains the desk-scale model on a larger corpus.

# %%
from aphasiagnn.ablation import ablate, summarize
from aphasiagnn.corpus import split_disjoint_subjects
from aphasiagnn.model import ModelConfig
from aphasiagnn.synthetic import SyntheticConfig, generate_synthetic
from aphasiagnn.training import TrainConfig, evaluate, train

corpus = generate_synthetic(SyntheticConfig(subjects_per_class=10, session_tokens=(100, 100),
                                            chunk_size=50, seed=0))
small = ModelConfig(d_text=16, rnn_hidden=8, d_graph=16, agg_hidden=8, d_cross=8, heads=2,
                    text_layers=1)
config = TrainConfig(epochs=12, patience=5, batch_size=8, lr=3e-3, n_keywords=6, model=small)

train_part, test_part = split_disjoint_subjects(corpus, 0.8, seed=0)
result = train(train_part, config,
               log=lambda r: print(f"epoch {r['epoch']} loss {r['train_loss']:.3f} "
                                   f"val F1 {r['val_f1']:.3f}"))
print("best epoch", result.best_epoch)

# %%
report = evaluate(result.model, test_part)
for row in report.rows():
    print(row)

# %% [markdown]
# An ablation grid trains one model per configuration and seed and reports
# weighted metrics on a held-out subject split. At this size the numbers are
# noisy; the acceptance suite compares variants over three seeds on 40
# subjects per class.

# %%
rows = ablate(corpus, {"graph": ["on", "off"]}, TrainConfig(epochs=4, patience=4, batch_size=8,
                                                           lr=3e-3, n_keywords=6, model=small))
for r in summarize(rows, ["graph"]):
    print(r)
