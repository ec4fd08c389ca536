"""Synthetic spectrogram-to-token tasks for desk-scale training.

Each content token owns a fixed unit-norm feature template (seeded Gaussian).
An utterance repeats each token's template for a few frames and adds white
noise, so the mapping is learnable but not trivial.  A configurable fraction
of utterances consist of one short n-gram repeated several times; these are
flagged so evaluation can report on them separately (repetition is where
position-free decoders are expected to struggle).
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple

import numpy as np

from .errors import ContractError
from .model import N_SPECIAL


class Utterance(NamedTuple):
    features: np.ndarray           # (T, feature_dim) float64
    tokens: np.ndarray             # (L,) int64 content ids in [3, vocab)
    repeated_ngram: bool = False


@dataclasses.dataclass(frozen=True)
class SynthTaskSpec:
    vocab_size: int = 32
    feature_dim: int = 8
    min_tokens: int = 3
    max_tokens: int = 8
    min_frames: int = 4
    max_frames: int = 8
    noise_sigma: float = 0.1
    ngram_fraction: float = 0.1
    template_seed: int = 1234

    def __post_init__(self):
        if self.vocab_size <= N_SPECIAL:
            raise ContractError("vocab_size leaves no room for content tokens")
        if not (1 <= self.min_tokens <= self.max_tokens):
            raise ContractError("bad token length bounds")
        if not (1 <= self.min_frames <= self.max_frames):
            raise ContractError("bad frames-per-token bounds")
        if self.min_tokens * self.min_frames < 4:
            raise ContractError("shortest utterance would be under 4 frames")
        if not 0.0 <= self.ngram_fraction <= 1.0:
            raise ContractError("ngram_fraction must be in [0, 1]")


def token_templates(spec: SynthTaskSpec) -> np.ndarray:
    """(vocab, feature_dim) array; unit-norm rows for content ids, zero for specials.

    When the feature dimension can hold them, content templates are mutually
    orthogonal (QR of a seeded Gaussian matrix) so tokens stay maximally
    distinguishable under noise; otherwise they are independent unit vectors.
    """
    rng = np.random.default_rng(spec.template_seed)
    n_content = spec.vocab_size - N_SPECIAL
    if n_content <= spec.feature_dim:
        q, r = np.linalg.qr(rng.normal(size=(spec.feature_dim, spec.feature_dim)))
        rows = (q * np.sign(np.diag(r))).T[:n_content]    # fix sign for determinism
    else:
        rows = rng.normal(size=(n_content, spec.feature_dim))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    t = np.zeros((spec.vocab_size, spec.feature_dim))
    t[N_SPECIAL:] = rows
    return t


def _sample_tokens(spec: SynthTaskSpec, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    length = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
    if rng.random() < spec.ngram_fraction:
        n = int(rng.integers(1, min(3, length) + 1))
        gram = rng.integers(N_SPECIAL, spec.vocab_size, size=n)
        reps = -(-length // n)                       # ceil
        return np.tile(gram, reps)[:length].astype(np.int64), True
    return rng.integers(N_SPECIAL, spec.vocab_size, size=length).astype(np.int64), False


def generate_synthetic(spec: SynthTaskSpec, n_utterances: int, seed: int) -> list[Utterance]:
    """Deterministic dataset: same (spec, n, seed) always yields the same bytes."""
    if n_utterances < 1:
        raise ContractError("need at least one utterance")
    templates = token_templates(spec)
    rng = np.random.default_rng(seed)
    out: list[Utterance] = []
    for _ in range(n_utterances):
        tokens, repeated = _sample_tokens(spec, rng)
        rows = []
        for tok in tokens:
            frames = int(rng.integers(spec.min_frames, spec.max_frames + 1))
            rows.append(np.tile(templates[tok], (frames, 1)))
        feats = np.concatenate(rows, axis=0)
        if spec.noise_sigma > 0:
            feats = feats + rng.normal(0.0, spec.noise_sigma, size=feats.shape)
        out.append(Utterance(feats, tokens, repeated))
    return out
