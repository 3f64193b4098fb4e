"""k-means++ initialization and Lloyd iterations over pooled acoustic frames.

The hard nearest-centroid assignment plus the mean update are the offline
target-preparation steps for hubert-like training; the centroids double as
the clamped codebook.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, sq_dist_matrix


@dataclass
class KmeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective: float
    history: list[float] = field(default_factory=list)


def _weighted_pick(weights: np.ndarray, rng: Rng) -> int:
    """Index drawn proportionally to non-negative weights (uniform fallback)."""
    total = float(weights.sum())
    if total <= 0.0:
        return int(rng.integers(weights.size))
    u = rng.uniform() * total
    return int(min(np.searchsorted(np.cumsum(weights), u, side="right"), weights.size - 1))


def kmeanspp_init(
    frames: np.ndarray, n_clusters: int, rng: Rng, greedy_trials: int = 1
) -> np.ndarray:
    """k-means++ seeding: first pick uniform, each next proportional to D^2.

    D^2(x) is the squared distance from x to its nearest already-chosen
    centroid.  With `greedy_trials > 1`, each step samples that many
    candidates from the D^2 law and keeps the one minimizing the resulting
    potential (sum of D^2), which spreads picks over rare clusters.
    """
    frames = np.atleast_2d(np.asarray(frames))
    m = frames.shape[0]
    if m < n_clusters:
        raise ValueError(f"need at least {n_clusters} frames, got {m}")
    if greedy_trials < 1:
        raise ValueError("greedy_trials must be >= 1")

    chosen = np.empty((n_clusters, frames.shape[1]), dtype=frames.dtype)
    first = int(rng.integers(m))
    chosen[0] = frames[first]
    d2 = sq_dist_matrix(frames, chosen[0:1])[:, 0]
    for j in range(1, n_clusters):
        if greedy_trials == 1:
            pick = _weighted_pick(d2, rng)
        else:
            candidates = [_weighted_pick(d2, rng) for _ in range(greedy_trials)]
            potentials = []
            for c in candidates:
                cand_d2 = sq_dist_matrix(frames, frames[c : c + 1])[:, 0]
                potentials.append(float(np.minimum(d2, cand_d2).sum()))
            pick = candidates[int(np.argmin(potentials))]
        chosen[j] = frames[pick]
        d2 = np.minimum(d2, sq_dist_matrix(frames, chosen[j : j + 1])[:, 0])
    return chosen.copy()


def _assign(frames: np.ndarray, centroids: np.ndarray):
    d2 = sq_dist_matrix(frames, centroids)
    assignments = np.argmin(d2, axis=1)  # argmin breaks ties at lowest index
    objective = float(d2[np.arange(frames.shape[0]), assignments].sum())
    return assignments, objective


def lloyd(frames: np.ndarray, init_centroids: np.ndarray, iters: int = 10) -> KmeansResult:
    """Alternate nearest-centroid assignment and mean updates.

    The objective (sum of squared distances to the assigned centroid) is
    non-increasing across iterations; iteration stops early once the
    assignment is stable.  An empty cluster is re-seeded with the frame
    currently farthest from its own centroid.
    """
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    centroids = np.array(init_centroids, dtype=np.float64, copy=True)
    if iters < 0:
        raise ValueError("iters must be >= 0")
    n = centroids.shape[0]

    assignments, objective = _assign(frames, centroids)
    history = [objective]
    for _ in range(iters):
        for j in range(n):
            members = assignments == j
            if members.any():
                centroids[j] = frames[members].mean(axis=0)
            else:
                d2 = sq_dist_matrix(frames, centroids)
                own = d2[np.arange(frames.shape[0]), assignments]
                centroids[j] = frames[int(np.argmax(own))]
                assignments, _ = _assign(frames, centroids)
        new_assignments, objective = _assign(frames, centroids)
        history.append(objective)
        changed = bool(np.any(new_assignments != assignments))
        assignments = new_assignments
        if not changed:
            break
    return KmeansResult(centroids, assignments, history[-1], history)


def assign_targets(
    sequences, centroids: np.ndarray
) -> dict[str, np.ndarray]:
    """Per-utterance nearest-centroid code for every frame (lowest-index ties)."""
    centroids = np.asarray(centroids)
    targets = {}
    for seq in sequences:
        if seq.frames.shape[1] != centroids.shape[1]:
            raise ValueError(
                f"{seq.utterance_id}: frame dim {seq.frames.shape[1]} does not "
                f"match centroid dim {centroids.shape[1]}"
            )
        d2 = sq_dist_matrix(seq.frames.astype(np.float64), centroids.astype(np.float64))
        targets[seq.utterance_id] = np.argmin(d2, axis=1).astype(np.int32)
    return targets
