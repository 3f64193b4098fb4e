"""Synthetic corpus with known discrete structure, for end-to-end checks.

Frames are emitted from one of M well-separated Gaussian clusters whose
identity follows a first-order Markov chain with a self-transition bias, so
the hidden state is both recoverable from a single frame and predictable
from the past.  State ids double as "phone" labels in the alignment files,
giving exact ground truth for purity and probing metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureSequence
from .numerics import Rng


@dataclass
class SynthConfig:
    n_states: int
    dim: int
    transition: np.ndarray  # (M, M), row-stochastic
    means: np.ndarray  # (M, d)
    noise_sigma: float
    min_len: int
    max_len: int
    min_separation: float
    seed: int

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.transition.shape != (self.n_states, self.n_states):
            raise ValueError("transition matrix shape mismatch")
        if not np.allclose(self.transition.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition rows must sum to 1")
        if self.means.shape != (self.n_states, self.dim):
            raise ValueError("means shape mismatch")
        if self.n_states > 1 and _min_pairwise_distance(self.means) < self.min_separation:
            raise ValueError("centroid separation below the configured minimum")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("invalid utterance length range")


def _min_pairwise_distance(points: np.ndarray) -> float:
    diff = points[:, None, :] - points[None, :, :]
    d = np.sqrt((diff * diff).sum(-1))
    d[np.diag_indices_from(d)] = np.inf
    return float(d.min())


def _sample_means(n_states: int, dim: int, min_separation: float, rng: Rng) -> np.ndarray:
    """Standard-normal centroid draws, re-drawn until the separation holds."""
    for _ in range(1000):
        means = rng.normal(size=(n_states, dim))
        if n_states == 1 or _min_pairwise_distance(means) >= min_separation:
            return means
    raise ValueError("could not satisfy centroid separation; lower it or raise dim")


def default_config(
    seed: int,
    n_states: int = 8,
    dim: int = 40,
    self_bias: float = 0.7,
    noise_sigma: float = 0.5,
    separation_factor: float = 6.0,
    min_len: int = 80,
    max_len: int = 160,
) -> SynthConfig:
    """Well-separated preset: min centroid distance >= separation_factor * sigma."""
    rng = Rng(seed)
    min_separation = separation_factor * noise_sigma
    means = _sample_means(n_states, dim, min_separation, rng)
    if n_states > 1:
        off = (1.0 - self_bias) / (n_states - 1)
        transition = np.full((n_states, n_states), off)
        np.fill_diagonal(transition, self_bias)
    else:
        transition = np.ones((1, 1))
    return SynthConfig(
        n_states=n_states,
        dim=dim,
        transition=transition,
        means=means,
        noise_sigma=noise_sigma,
        min_len=min_len,
        max_len=max_len,
        min_separation=min_separation,
        seed=seed,
    )


def generate(
    config: SynthConfig, num_utterances: int
) -> tuple[list[FeatureSequence], dict[str, np.ndarray]]:
    """Draw utterances: Markov states, then frame = mean[state] + sigma * noise.

    Each utterance uses its own split RNG stream, so utterance i is the same
    no matter how many others are generated.
    """
    parent = Rng(config.seed)
    streams = parent.split(num_utterances)
    cum_rows = np.cumsum(config.transition, axis=1)
    sequences = []
    alignments = {}
    for idx, rng in enumerate(streams):
        length = int(rng.integers(config.min_len, config.max_len + 1))
        states = np.empty(length, dtype=np.int32)
        states[0] = int(rng.integers(config.n_states))
        u = rng.uniform(size=length - 1) if length > 1 else []
        for t in range(1, length):
            states[t] = int(
                min(
                    np.searchsorted(cum_rows[states[t - 1]], u[t - 1], side="right"),
                    config.n_states - 1,
                )
            )
        noise = rng.normal(size=(length, config.dim))
        frames = (config.means[states] + config.noise_sigma * noise).astype(np.float32)
        utt_id = f"synth-{idx:05d}"
        sequences.append(FeatureSequence(utt_id, frames))
        alignments[utt_id] = states
    return sequences, alignments


def oracle_codebook(config: SynthConfig) -> np.ndarray:
    """The true emission centroids, as an N=M codebook for oracle comparisons."""
    return config.means.copy()
