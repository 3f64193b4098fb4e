"""The five per-batch training losses and their analytic gradients.

Every loss returns a :class:`LossBreakdown` (scalar total to minimize plus
reporting terms) and, when requested, a dict of gradients matching the
model's parameter blocks.  Gradients are hand-derived backprop; their
correctness contract is :func:`cotrain.numerics.grad_check`.

Conventions shared by all losses:

* an anchor is a time step t whose future frame t+shift is still inside the
  utterance; utterances shorter than shift+1 contribute nothing and are
  skipped with a warning;
* losses are means over all valid anchors in the batch, so padding and
  batch size do not rescale gradients;
* `per_frame_objective` reports the co-training summand
  entropy(q) + E_q[log p(x|z)] + E_q[log p(z|past)] (larger is better).
  The Gumbel variant optimizes a sampled surrogate but still reports the
  exact marginalization.  For vq-apc/apc, which have no confirmation
  distribution, it is simply the negated loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import SpeechCodeModel, lstm_backward
from .numerics import LOG_TWO_PI, Rng, gumbel_noise, log_softmax, sq_dist_matrix

logger = logging.getLogger(__name__)


@dataclass
class Batch:
    """Padded utterance batch: frames (B, T, d), per-utterance lengths.

    `targets` (hard code ids per frame, -1 at padding) is only needed for
    hubert-like training.
    """

    x: np.ndarray
    lengths: np.ndarray
    utt_ids: list[str]
    targets: np.ndarray | None = None

    @property
    def mask(self) -> np.ndarray:
        t = np.arange(self.x.shape[1])
        return t[None, :] < self.lengths[:, None]


@dataclass
class LossBreakdown:
    total: float
    ce_term: float
    recon_term: float
    entropy_term: float
    per_frame_objective: float
    n_frames: int


@dataclass
class GumbelConfig:
    """Temperature and estimator mode for Gumbel-softmax sampling."""

    temperature: float
    straight_through: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def gumbel_softmax(
    logits: np.ndarray,
    tau: float,
    rng: Rng | None = None,
    noise: np.ndarray | None = None,
):
    """Tempered noisy softmax sample; returns (hard one-hot, soft, argmax).

    The hard output is the one-hot of the tempered noisy argmax (ties at the
    lowest index); the soft output is what the straight-through estimator
    differentiates.
    """
    if noise is None:
        if rng is None:
            raise ValueError("need an rng when no noise is supplied")
        noise = gumbel_noise(rng, logits.shape)
    scores = (logits + noise.astype(logits.dtype)) / tau
    soft = np.exp(log_softmax(scores, axis=-1))
    idx = np.argmax(scores, axis=-1)
    hard = np.zeros_like(soft)
    hard[np.arange(soft.shape[0]), idx] = 1.0
    return hard, soft, idx


# -- shared plumbing ---------------------------------------------------------


def _anchors(batch: Batch, shift: int):
    """Flat anchor views: (batch idx, time idx, future frames)."""
    B, T, _ = batch.x.shape
    short = [u for u, n in zip(batch.utt_ids, batch.lengths) if n <= shift]
    if short:
        logger.warning(
            "skipping %d utterance(s) shorter than shift+1: %s", len(short), short
        )
    t = np.arange(T)
    anchor_mask = (t[None, :] + shift) < batch.lengths[:, None]
    bi, ti = np.nonzero(anchor_mask)
    if bi.size == 0:
        raise ValueError("batch has no valid frames (every utterance too short)")
    x_fut = batch.x[bi, ti + shift]
    return bi, ti, x_fut


def _lstm_grads_from_top(model, cache, d_top, grads):
    d_hidden = [None] * (len(model.lstm) - 1) + [d_top]
    layer_grads, _ = lstm_backward(model.lstm, cache, d_hidden)
    for i, g in enumerate(layer_grads):
        grads[f"lstm{i}.w_x"] = g["w_x"]
        grads[f"lstm{i}.w_h"] = g["w_h"]
        grads[f"lstm{i}.b"] = g["b"]


def _scatter_codeword_grad(d_b_logits, recon_weight, x_fut, codebook, scale):
    """Codebook gradient from the distance logits and the generator term.

    d_b_logits is dLoss/d(-scale * ||x - v||^2); recon_weight is
    dLoss/d(log p(x|z)) (identity output projection).
    """
    g = 2.0 * scale * d_b_logits - recon_weight
    return g.T @ x_fut - g.sum(axis=0)[:, None] * codebook


# -- co-training, exact marginalization ---------------------------------------


def cotrain_exact_loss(
    batch: Batch,
    model: SpeechCodeModel,
    want_grads: bool = True,
    q_mode: str = "soft",
    q_distance_scale: float = 1.0,
):
    """Exact expectation of the co-training summand under the confirmation q.

    For every anchor the summand sums over all N codes:
    q(z) * [-log q(z) + log p(x_future | z) + log p(z | past)].
    The total loss is the negated mean summand; gradients flow to the LSTM,
    the code projection, and the codebook (through q and the generator).

    `q_mode` is an evaluation hook: "posterior" swaps q for the exact code
    posterior, "hard" for the one-hot nearest-codeword assignment; gradients
    are only available in the default "soft" mode.
    """
    if q_mode not in ("soft", "posterior", "hard"):
        raise ValueError(f"unknown q_mode '{q_mode}'")
    if want_grads and q_mode != "soft":
        raise ValueError("gradients are only defined for q_mode='soft'")
    cfg = model.cfg
    hs, cache = model.forward_hidden(batch.x, want_cache=True)
    h_top = hs[-1]
    bi, ti, x_fut = _anchors(batch, cfg.shift)
    n_anchors = bi.size

    h_a = h_top[bi, ti]
    a_logits = h_a @ model.code_proj
    logp = log_softmax(a_logits, axis=1)

    d2 = sq_dist_matrix(x_fut, model.codebook)
    b_logits = -q_distance_scale * d2
    logq = log_softmax(b_logits, axis=1)
    loggen = -0.5 * cfg.frame_dim * LOG_TWO_PI - 0.5 * d2

    if q_mode == "soft":
        q = np.exp(logq)
        ent = -(q * logq).sum(axis=1)
    elif q_mode == "posterior":
        log_post = log_softmax(loggen + logp, axis=1)
        q = np.exp(log_post)
        ent = -(q * log_post).sum(axis=1)
    else:  # hard nearest-codeword assignment
        z = np.argmin(d2, axis=1)
        q = np.zeros_like(d2)
        q[np.arange(n_anchors), z] = 1.0
        ent = np.zeros(n_anchors, dtype=d2.dtype)

    recon = -(q * loggen).sum(axis=1)
    ce = -(q * logp).sum(axis=1)
    objective = float(np.mean(ent - recon - ce))
    breakdown = LossBreakdown(
        total=-objective,
        ce_term=float(ce.mean()),
        recon_term=float(recon.mean()),
        entropy_term=float(ent.mean()),
        per_frame_objective=objective,
        n_frames=n_anchors,
    )
    if not want_grads:
        return breakdown, None

    inv = 1.0 / n_anchors
    p = np.exp(logp)
    # predictor logits: d(summand)/da = q - p
    d_a = (p - q) * inv
    # confirmation logits via the softmax Jacobian; the shared constant in
    # g cancels inside q ⊙ (g - <q, g>)
    g = loggen + logp - logq
    d_b = -inv * q * (g - (q * g).sum(axis=1, keepdims=True))

    grads = {
        "code_proj": h_a.T @ d_a,
        "codebook": _scatter_codeword_grad(
            d_b, inv * q, x_fut, model.codebook, q_distance_scale
        ),
    }
    d_top = np.zeros_like(h_top)
    d_top[bi, ti] = d_a @ model.code_proj.T
    _lstm_grads_from_top(model, cache, d_top, grads)
    return breakdown, grads


# -- co-training, Gumbel approximation of the CE term -------------------------


def cotrain_gumbel_loss(
    batch: Batch,
    model: SpeechCodeModel,
    gumbel: GumbelConfig,
    rng: Rng | None = None,
    noise: np.ndarray | None = None,
    want_grads: bool = True,
):
    """Co-training loss with a single Gumbel-softmax sample for the CE term.

    Entropy and reconstruction are exact as in :func:`cotrain_exact_loss`;
    only the cross-entropy expectation is approximated by one tempered noisy
    sample from q's distance logits.  With straight-through on, the sample's
    forward value is the hard one-hot of the noisy argmax while its gradient
    uses the soft sample.  `per_frame_objective` is re-evaluated with exact
    marginalization regardless, so loss logs are comparable across variants.

    `noise` pins the Gumbel draws (testing); zeros reduce the CE term to the
    plain nearest-codeword cross entropy.
    """
    cfg = model.cfg
    hs, cache = model.forward_hidden(batch.x, want_cache=True)
    h_top = hs[-1]
    bi, ti, x_fut = _anchors(batch, cfg.shift)
    n_anchors = bi.size

    h_a = h_top[bi, ti]
    a_logits = h_a @ model.code_proj
    logp = log_softmax(a_logits, axis=1)
    p = np.exp(logp)

    d2 = sq_dist_matrix(x_fut, model.codebook)
    b_logits = -d2
    logq = log_softmax(b_logits, axis=1)
    q = np.exp(logq)
    loggen = -0.5 * cfg.frame_dim * LOG_TWO_PI - 0.5 * d2

    ent = -(q * logq).sum(axis=1)
    recon = -(q * loggen).sum(axis=1)
    ce_exact = -(q * logp).sum(axis=1)

    hard, soft, _ = gumbel_softmax(b_logits, gumbel.temperature, rng=rng, noise=noise)
    y_value = hard if gumbel.straight_through else soft
    ce_sampled = -(y_value * logp).sum(axis=1)

    objective_exact = float(np.mean(ent - recon - ce_exact))
    breakdown = LossBreakdown(
        total=float(np.mean(ce_sampled + recon - ent)),
        ce_term=float(ce_sampled.mean()),
        recon_term=float(recon.mean()),
        entropy_term=float(ent.mean()),
        per_frame_objective=objective_exact,
        n_frames=n_anchors,
    )
    if not want_grads:
        return breakdown, None

    inv = 1.0 / n_anchors
    # CE term: forward value uses y_value, gradient to the predictor logits
    # is exact for that value; gradient to q's logits flows through the soft
    # sample (straight-through) scaled by 1/tau.
    d_a = (p - y_value) * inv
    d_y = logp  # d(summand)/d(soft sample)
    d_s = soft * (d_y - (soft * d_y).sum(axis=1, keepdims=True))
    d_b_ce = -inv * d_s / gumbel.temperature
    # entropy + reconstruction contribution to q's logits
    g_er = loggen - logq
    d_b = -inv * q * (g_er - (q * g_er).sum(axis=1, keepdims=True)) + d_b_ce

    grads = {
        "code_proj": h_a.T @ d_a,
        "codebook": _scatter_codeword_grad(d_b, inv * q, x_fut, model.codebook, 1.0),
    }
    d_top = np.zeros_like(h_top)
    d_top[bi, ti] = d_a @ model.code_proj.T
    _lstm_grads_from_top(model, cache, d_top, grads)
    return breakdown, grads


# -- hubert-like: cross entropy against offline k-means codes ------------------


def hubert_like_loss(batch: Batch, model: SpeechCodeModel, want_grads: bool = True):
    """Cross entropy of the predictor against precomputed hard code targets.

    The codebook is clamped to the k-means centroids, so only the LSTM and
    the code projection receive gradients (the codebook gradient is
    identically zero).  Reporting fills the reconstruction term from the
    clamped codebook and sets entropy to zero, which makes
    `per_frame_objective` comparable with the co-training variants.
    """
    if batch.targets is None:
        raise ValueError("hubert-like loss needs hard targets")
    cfg = model.cfg
    hs, cache = model.forward_hidden(batch.x, want_cache=True)
    h_top = hs[-1]
    bi, ti, x_fut = _anchors(batch, cfg.shift)
    n_anchors = bi.size

    z = batch.targets[bi, ti + cfg.shift]
    if np.any(z < 0) or np.any(z >= cfg.n_codes):
        raise ValueError("target length mismatch with features (missing code ids)")

    h_a = h_top[bi, ti]
    a_logits = h_a @ model.code_proj
    logp = log_softmax(a_logits, axis=1)
    rows = np.arange(n_anchors)
    ce = -logp[rows, z]

    resid = x_fut - model.codebook[z]
    recon = 0.5 * cfg.frame_dim * LOG_TWO_PI + 0.5 * (resid * resid).sum(axis=1)
    breakdown = LossBreakdown(
        total=float(ce.mean()),
        ce_term=float(ce.mean()),
        recon_term=float(recon.mean()),
        entropy_term=0.0,
        per_frame_objective=float(-(ce + recon).mean()),
        n_frames=n_anchors,
    )
    if not want_grads:
        return breakdown, None

    inv = 1.0 / n_anchors
    d_a = np.exp(logp) * inv
    d_a[rows, z] -= inv
    grads = {
        "code_proj": h_a.T @ d_a,
        "codebook": np.zeros_like(model.codebook),
    }
    d_top = np.zeros_like(h_top)
    d_top[bi, ti] = d_a @ model.code_proj.T
    _lstm_grads_from_top(model, cache, d_top, grads)
    return breakdown, grads


# -- VQ-APC: sampled codeword regression --------------------------------------


def vq_apc_loss(
    batch: Batch,
    model: SpeechCodeModel,
    gumbel: GumbelConfig,
    rng: Rng | None = None,
    noise: np.ndarray | None = None,
    want_grads: bool = True,
):
    """Future-frame regression through a single sampled codeword.

    A code is sampled from the predictor logits with Gumbel-softmax; the
    selected codeword (straight-through: hard forward, soft backward) is
    mapped through the trained output projection and scored against the
    future frame under the unit-variance Gaussian, i.e. an MSE plus the
    Gaussian normalizer.  Gradients reach the LSTM, code projection,
    codebook and output projection.
    """
    if model.out_proj is None:
        raise ValueError("vq-apc needs a trainable output projection")
    cfg = model.cfg
    hs, cache = model.forward_hidden(batch.x, want_cache=True)
    h_top = hs[-1]
    bi, ti, x_fut = _anchors(batch, cfg.shift)
    n_anchors = bi.size

    h_a = h_top[bi, ti]
    a_logits = h_a @ model.code_proj
    hard, soft, idx = gumbel_softmax(a_logits, gumbel.temperature, rng=rng, noise=noise)

    if gumbel.straight_through:
        codewords = model.codebook[idx]
    else:
        codewords = soft @ model.codebook
    resid = x_fut - codewords @ model.out_proj.T
    loss = 0.5 * cfg.frame_dim * LOG_TWO_PI + 0.5 * (resid * resid).sum(axis=1)
    total = float(loss.mean())
    breakdown = LossBreakdown(
        total=total,
        ce_term=0.0,
        recon_term=total,
        entropy_term=0.0,
        per_frame_objective=-total,
        n_frames=n_anchors,
    )
    if not want_grads:
        return breakdown, None

    inv = 1.0 / n_anchors
    d_resid = resid * inv
    d_out_proj = -d_resid.T @ codewords
    d_codewords = -d_resid @ model.out_proj
    d_codebook = np.zeros_like(model.codebook)
    if gumbel.straight_through:
        # forward value of the sample is one-hot: only the chosen rows move
        np.add.at(d_codebook, idx, d_codewords)
    else:
        d_codebook += soft.T @ d_codewords
    # sample gradient flows through the soft softmax at temperature tau
    d_y = d_codewords @ model.codebook.T
    d_s = soft * (d_y - (soft * d_y).sum(axis=1, keepdims=True))
    d_a = d_s / gumbel.temperature

    grads = {
        "code_proj": h_a.T @ d_a,
        "codebook": d_codebook,
        "out_proj": d_out_proj,
    }
    d_top = np.zeros_like(h_top)
    d_top[bi, ti] = d_a @ model.code_proj.T
    _lstm_grads_from_top(model, cache, d_top, grads)
    return breakdown, grads


# -- APC baseline --------------------------------------------------------------


def apc_loss(batch: Batch, model: SpeechCodeModel, want_grads: bool = True):
    """Direct future-frame regression from the top hidden state.

    loss = mean over anchors of 0.5 ||x_future - head @ h||^2 plus the
    Gaussian normalizer, so values are on the same log-density scale as the
    other variants.
    """
    if model.apc_head is None:
        raise ValueError("apc needs a regression head")
    cfg = model.cfg
    hs, cache = model.forward_hidden(batch.x, want_cache=True)
    h_top = hs[-1]
    bi, ti, x_fut = _anchors(batch, cfg.shift)
    n_anchors = bi.size

    h_a = h_top[bi, ti]
    resid = x_fut - h_a @ model.apc_head.T
    loss = 0.5 * cfg.frame_dim * LOG_TWO_PI + 0.5 * (resid * resid).sum(axis=1)
    total = float(loss.mean())
    breakdown = LossBreakdown(
        total=total,
        ce_term=0.0,
        recon_term=total,
        entropy_term=0.0,
        per_frame_objective=-total,
        n_frames=n_anchors,
    )
    if not want_grads:
        return breakdown, None

    inv = 1.0 / n_anchors
    d_resid = resid * inv
    grads = {"apc_head": -d_resid.T @ h_a}
    d_top = np.zeros_like(h_top)
    d_top[bi, ti] = -d_resid @ model.apc_head
    _lstm_grads_from_top(model, cache, d_top, grads)
    return breakdown, grads
