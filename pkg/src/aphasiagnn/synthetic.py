"""Synthetic aligned corpus generator.

Class signal is carried in three places:

* text: each token is a disfluency token with a class-specific probability;
* gesture: pose trajectories follow a stationary smoothed random walk. At
  tokens that are disfluency tokens the displacement is scaled by the class
  amplitude multiplier (the co-speech gesture), elsewhere by the
  class-independent ``background_motion``;
* audio: class-specific loudness offset and spread.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .corpus import (AUDIO_DIM, GESTURE_SHAPE, KEYPOINT_NAMES, MIN_DURATION, AlignedToken,
                     ClassLabel, Corpus, chunk_session)

DISFLUENCY_TOKENS = ("[*]", "um", "uh", "the", "and", "so", "oh", "well")
CONTENT_TOKENS = (
    "she", "was", "they", "her", "to", "a", "cinderella", "prince", "ball", "slipper",
    "dress", "king", "glass", "stepmother", "fairy", "godmother", "midnight", "house",
    "mother", "sisters", "mice", "home", "girl", "woman", "dance", "castle", "pumpkin",
    "carriage", "shoe", "fit", "went", "came", "got", "go", "get", "had", "said", "know",
    "beautiful", "little", "time", "back", "clock", "night", "married", "found", "lost",
    "ran", "left", "happy",
)

# rest pose in normalised image coordinates (x right, y down, z depth)
_REST = np.array([
    [0.50, 0.20, -0.30], [0.48, 0.18, -0.28], [0.47, 0.18, -0.28], [0.46, 0.18, -0.28],
    [0.52, 0.18, -0.28], [0.53, 0.18, -0.28], [0.54, 0.18, -0.28], [0.44, 0.19, -0.15],
    [0.56, 0.19, -0.15], [0.48, 0.23, -0.27], [0.52, 0.23, -0.27], [0.40, 0.32, -0.10],
    [0.60, 0.32, -0.10], [0.36, 0.45, -0.05], [0.64, 0.45, -0.05], [0.40, 0.56, -0.15],
    [0.60, 0.56, -0.15], [0.41, 0.58, -0.16], [0.59, 0.58, -0.16], [0.42, 0.58, -0.17],
    [0.58, 0.58, -0.17], [0.42, 0.57, -0.16], [0.58, 0.57, -0.16],
])
assert _REST.shape == GESTURE_SHAPE


def _joint_weights() -> np.ndarray:
    w = np.full(len(KEYPOINT_NAMES), 0.1)
    for i, name in enumerate(KEYPOINT_NAMES):
        if "SHOULDER" in name:
            w[i] = 0.25
        elif "ELBOW" in name:
            w[i] = 0.6
        elif any(k in name for k in ("WRIST", "PINKY", "INDEX", "THUMB")):
            w[i] = 1.0
    return w[:, None] * np.ones((1, 3))


JOINT_WEIGHTS = _joint_weights()


@dataclass
class SyntheticConfig:
    subjects_per_class: int = 10
    sessions_per_subject: int = 1
    session_tokens: tuple = (60, 140)
    chunk_size: int = 50
    min_duration: float = MIN_DURATION
    token_duration: tuple = (0.25, 0.6)
    pause: tuple = (0.0, 0.15)
    # indexed by ClassLabel: Control, Fluent, NonComprehension, NonFluent
    amplitude_multipliers: tuple = (1.0, 1.5, 0.7, 3.0)
    disfluency_rates: tuple = (0.08, 0.16, 0.16, 0.32)
    audio_offsets: tuple = (0.0, 0.1, -0.1, 0.2)
    audio_scales: tuple = (1.0, 1.0, 1.1, 0.9)
    background_motion: float = 1.0
    motion_scale: float = 0.05
    smoothing: float = 0.8
    subject_offset: float = 0.01
    disfluency_tokens: tuple = DISFLUENCY_TOKENS
    content_tokens: tuple = CONTENT_TOKENS
    seed: int = 0

    def validate(self) -> None:
        for name in ("amplitude_multipliers", "disfluency_rates", "audio_offsets", "audio_scales"):
            if len(getattr(self, name)) != len(ClassLabel):
                raise ValueError(f"{name} needs one value per class")
        if any(m <= 0 for m in self.amplitude_multipliers):
            raise ValueError("amplitude multipliers must be > 0")
        if any(not 0.0 <= r <= 1.0 for r in self.disfluency_rates):
            raise ValueError("disfluency rates must lie in [0, 1]")
        if self.subjects_per_class < 1 or self.sessions_per_subject < 1:
            raise ValueError("need at least one subject and one session per class")
        lo, hi = self.session_tokens
        if not 1 <= lo <= hi:
            raise ValueError("session_tokens must satisfy 1 <= min <= max")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing must lie in [0, 1)")
        if set(self.disfluency_tokens) & set(self.content_tokens):
            raise ValueError("disfluency and content token sets overlap")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f for f in cls.__dataclass_fields__}
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in known}
        return cls(**kw)


def _zipf_probs(n: int) -> np.ndarray:
    p = 1.0 / np.arange(1, n + 1)
    return p / p.sum()


def _smoothed_walk(rng, n: int, rho: float) -> np.ndarray:
    """Stationary AR(1) path with unit marginal variance, shape ``[n, 23, 3]``."""
    eps = rng.standard_normal((n,) + GESTURE_SHAPE)
    out = np.empty_like(eps)
    out[0] = eps[0]
    k = np.sqrt(1.0 - rho * rho)
    for t in range(1, n):
        out[t] = rho * out[t - 1] + k * eps[t]
    return out


def generate_session(rng, config: SyntheticConfig, label: ClassLabel, offset: np.ndarray,
                     n_tokens: int) -> list[AlignedToken]:
    c = int(label)
    rate = config.disfluency_rates[c]
    amp = config.amplitude_multipliers[c]
    dis_p = _zipf_probs(len(config.disfluency_tokens))
    con_p = _zipf_probs(len(config.content_tokens))
    walk = _smoothed_walk(rng, n_tokens, config.smoothing)
    audio_base = np.linspace(-0.5, 0.5, AUDIO_DIM)
    tokens = []
    t = float(rng.uniform(0.0, 0.5))
    for i in range(n_tokens):
        disfluent = rng.random() < rate
        if disfluent:
            text = config.disfluency_tokens[rng.choice(len(dis_p), p=dis_p)]
        else:
            text = config.content_tokens[rng.choice(len(con_p), p=con_p)]
        scale = amp if disfluent else config.background_motion
        gesture = _REST + offset + config.motion_scale * scale * JOINT_WEIGHTS * walk[i]
        audio = (audio_base + config.audio_offsets[c]
                 + config.audio_scales[c] * rng.standard_normal(AUDIO_DIM))
        dur = float(rng.uniform(*config.token_duration))
        tokens.append(AlignedToken(text, gesture, audio, t, t + dur))
        t = t + dur + float(rng.uniform(*config.pause))
    return tokens


def generate_synthetic(config: SyntheticConfig | None = None) -> Corpus:
    """Deterministic synthetic corpus for ``config`` (same seed, same corpus)."""
    config = config or SyntheticConfig()
    config.validate()
    rng = np.random.default_rng(config.seed)
    samples = []
    lo, hi = config.session_tokens
    for label in ClassLabel:
        for s in range(config.subjects_per_class):
            subject = f"{label.display[:4].upper()}{s:03d}"
            offset = config.subject_offset * rng.standard_normal(GESTURE_SHAPE)
            for k in range(config.sessions_per_subject):
                n = int(rng.integers(lo, hi + 1))
                toks = generate_session(rng, config, label, offset, n)
                samples.extend(chunk_session(toks, config.chunk_size, config.min_duration,
                                             subject, label, f"{subject}-{k}"))
    return Corpus(samples, {"generator": "synthetic", "config": config.to_dict()})
