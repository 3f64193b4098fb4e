"""Deterministic, seedable numerical primitives.

Everything stochastic in the package flows through :class:`Rng`, a thin
wrapper around numpy's counter-based Philox generator.  Its state is a small
set of integers that can be captured and restored exactly, so a checkpoint
pins the complete randomness of a run and resumed training is bit-identical.

Training arithmetic runs in float32; verification code (oracles and
:func:`grad_check`) runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_TWO_PI = math.log(2.0 * math.pi)

# Uniform draws are clamped to this open interval before log transforms.
UNIFORM_EPS = 1e-12


class Rng:
    """Seedable stream of randomness with explicit, serializable state.

    Identical seed + identical call sequence gives bit-identical output.
    Instances are not shareable across workers; use :meth:`split` to derive
    independent per-worker streams.
    """

    def __init__(self, seed: int | None = None, _bit_generator=None):
        if _bit_generator is not None:
            self._bg = _bit_generator
        else:
            if seed is None:
                raise ValueError("Rng requires an explicit seed")
            self._bg = np.random.Philox(seed=int(seed))
        self._gen = np.random.Generator(self._bg)

    # -- draws ------------------------------------------------------------

    def uniform(self, size=None) -> np.ndarray | float:
        """Uniform float64 on [0, 1)."""
        return self._gen.random(size)

    def normal(self, size=None) -> np.ndarray | float:
        """Standard normal float64."""
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int | None = None, size=None):
        """Integers in [low, high) (or [0, low) when high is None)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    # -- stream management -------------------------------------------------

    def split(self, n: int) -> list["Rng"]:
        """Derive n independent streams; the parent stream is unchanged."""
        return [Rng(_bit_generator=self._bg.jumped(i + 1)) for i in range(n)]

    def state(self) -> dict:
        """JSON-serializable snapshot of the generator state."""
        st = self._bg.state
        return {
            "counter": [int(x) for x in st["state"]["counter"]],
            "key": [int(x) for x in st["state"]["key"]],
            "buffer": [int(x) for x in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self._bg.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(seed=0)
        rng.set_state(state)
        return rng


# -- elementary ops --------------------------------------------------------


def logsumexp(v: np.ndarray, axis=None) -> np.ndarray | float:
    """log sum exp with max-shift; never overflows for finite input.

    Raises on an empty input ("empty input").
    """
    v = np.asarray(v)
    if v.size == 0:
        raise ValueError("empty input")
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift-invariant softmax; output sums to 1 along `axis`."""
    v = np.asarray(v)
    if v.size == 0:
        raise ValueError("empty input")
    m = np.max(v, axis=axis, keepdims=True)
    e = np.exp(v - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v)
    if v.size == 0:
        raise ValueError("empty input")
    m = np.max(v, axis=axis, keepdims=True)
    shifted = v - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats, with 0*log(0) treated as 0.

    Requires a probability vector: entries >= 0, sum within 1e-6 of 1.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("negative probability entry")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError("probabilities do not sum to 1")
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def sq_dist_matrix(X: np.ndarray, V: np.ndarray, block: int = 256) -> np.ndarray:
    """Pairwise squared Euclidean distances, entry (i, j) = ||x_i - v_j||^2.

    Computed from explicit differences (block-wise to bound memory) so equal
    rows give exactly 0 and no entry can go negative.
    """
    X = np.atleast_2d(np.asarray(X))
    V = np.atleast_2d(np.asarray(V))
    if X.shape[1] != V.shape[1]:
        raise ValueError(
            f"dimension mismatch: {X.shape[1]} vs {V.shape[1]} columns"
        )
    out = np.empty((X.shape[0], V.shape[0]), dtype=np.result_type(X, V))
    for start in range(0, X.shape[0], block):
        stop = min(start + block, X.shape[0])
        diff = X[start:stop, None, :] - V[None, :, :]
        out[start:stop] = np.einsum("mnd,mnd->mn", diff, diff)
    return out


def gumbel_noise(rng: Rng, shape) -> np.ndarray:
    """Standard Gumbel draws g = -log(-log(u)), u uniform on (0, 1).

    u is clamped to [1e-12, 1 - 1e-12] to keep the transform finite.
    """
    u = np.asarray(rng.uniform(size=shape))
    u = np.clip(u, UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -np.log(-np.log(u))


# -- gradient verification --------------------------------------------------


@dataclass
class BlockReport:
    """Finite-difference check summary for one parameter block."""

    name: str
    max_rel_err: float
    worst_coord: tuple
    analytic: float
    numeric: float
    coords_checked: int


@dataclass
class GradCheckReport:
    blocks: dict[str, BlockReport] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max(b.max_rel_err for b in self.blocks.values())

    @property
    def worst_block(self) -> str:
        return max(self.blocks.values(), key=lambda b: b.max_rel_err).name

    def __str__(self) -> str:
        lines = []
        for b in self.blocks.values():
            lines.append(
                f"{b.name}: max_rel_err={b.max_rel_err:.3e} at {b.worst_coord} "
                f"(analytic={b.analytic:.6e}, numeric={b.numeric:.6e}, "
                f"{b.coords_checked} coords)"
            )
        return "\n".join(lines)


def grad_check(
    loss_fn,
    params: dict[str, np.ndarray],
    epsilon: float = 1e-5,
    rng: Rng | None = None,
    coords_per_block: int = 200,
) -> GradCheckReport:
    """Compare analytic gradients against central differences in float64.

    `loss_fn(params) -> (loss, grads)` where `grads` has the same keys as
    `params`.  Each block is checked on all coordinates, or on a random
    subsample of `coords_per_block` when the block is larger.  Relative error
    is |ga - gn| / max(1, |ga|, |gn|).
    """
    if rng is None:
        rng = Rng(seed=0)
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    base_loss, grads = loss_fn(params)
    if not np.isfinite(base_loss):
        raise ValueError("non-finite loss at the unperturbed point")

    report = GradCheckReport()
    for name, theta in params.items():
        g_analytic = np.asarray(grads[name], dtype=np.float64)
        if g_analytic.shape != theta.shape:
            raise ValueError(f"gradient shape mismatch for block '{name}'")
        n = theta.size
        if n <= coords_per_block:
            flat_idx = np.arange(n)
        else:
            flat_idx = rng.permutation(n)[:coords_per_block]

        worst = BlockReport(name, -1.0, (), 0.0, 0.0, len(flat_idx))
        flat = theta.reshape(-1)
        for i in flat_idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            lp, _ = loss_fn(params)
            flat[i] = orig - epsilon
            lm, _ = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ValueError(f"non-finite loss while probing block '{name}'")
            gn = (lp - lm) / (2.0 * epsilon)
            ga = g_analytic.reshape(-1)[i]
            rel = abs(ga - gn) / max(1.0, abs(ga), abs(gn))
            if rel > worst.max_rel_err:
                worst.max_rel_err = rel
                worst.worst_coord = np.unravel_index(int(i), theta.shape)
                worst.analytic = float(ga)
                worst.numeric = float(gn)
        report.blocks[name] = worst
    return report
