"""Codebook model: LSTM predictor, distance-softmax confirmer, Gaussian generator.

The prediction side is a stack of unidirectional LSTM layers whose top output
h_t is projected to logits over N discrete codes.  The confirmation side
scores a frame against the codebook rows by negative squared distance.  The
generator emits a frame from a codeword through an optional linear output
projection (identity when absent) with an isotropic unit-variance Gaussian.

All distribution arithmetic happens in log space; probabilities are
materialized only at API boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kmeans import kmeanspp_init
from .numerics import LOG_TWO_PI, Rng, log_softmax, sq_dist_matrix


@dataclass
class LatentConfig:
    """Shapes of the latent-code model."""

    n_codes: int = 256
    shift: int = 5
    frame_dim: int = 40
    hidden_dim: int = 512
    layers: int = 3

    def __post_init__(self):
        if self.n_codes < 1 or self.shift < 1 or self.layers < 1:
            raise ValueError("n_codes, shift and layers must all be >= 1")
        if self.frame_dim < 1 or self.hidden_dim < 1:
            raise ValueError("frame_dim and hidden_dim must be >= 1")


@dataclass
class CodeDistribution:
    """Distribution over the N codes, kept consistent in both spaces."""

    probs: np.ndarray
    log_probs: np.ndarray

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "CodeDistribution":
        logp = log_softmax(np.asarray(logits, dtype=np.float64))
        return cls(probs=np.exp(logp), log_probs=logp)

    def __post_init__(self):
        if abs(float(self.probs.sum()) - 1.0) > 1e-6:
            raise ValueError("probabilities do not sum to 1")


@dataclass
class LstmLayer:
    """One LSTM layer; gate order in the stacked kernels is i, f, g, o."""

    w_x: np.ndarray  # (4H, in)
    w_h: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[1]


def init_lstm_layer(in_dim: int, hidden_dim: int, rng: Rng, dtype=np.float32) -> LstmLayer:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) kernels; forget-gate bias +1, rest 0."""
    scale = 1.0 / np.sqrt(hidden_dim)
    w_x = (rng.uniform(size=(4 * hidden_dim, in_dim)) * 2 - 1) * scale
    w_h = (rng.uniform(size=(4 * hidden_dim, hidden_dim)) * 2 - 1) * scale
    b = np.zeros(4 * hidden_dim)
    b[hidden_dim : 2 * hidden_dim] = 1.0
    return LstmLayer(w_x.astype(dtype), w_h.astype(dtype), b.astype(dtype))


def _sigmoid(x):
    # Split positive/negative branches to avoid overflow in exp.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def lstm_forward(
    layers: list[LstmLayer], frames: np.ndarray, want_cache: bool = False
):
    """Run the LSTM stack over (B, T, d) input with zero initial state.

    Strictly causal: h_t depends only on x_{1:t}.  Returns the list of
    per-layer hidden state arrays (B, T, H), plus a backward cache when
    requested.
    """
    x = np.asarray(frames)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    B, T, _ = x.shape

    hidden_all = []
    cache = []
    layer_in = x
    for layer in layers:
        H = layer.hidden_dim
        dtype = layer.w_x.dtype
        hs = np.zeros((B, T, H), dtype=dtype)
        gates_i = np.zeros((B, T, H), dtype=dtype)
        gates_f = np.zeros((B, T, H), dtype=dtype)
        gates_g = np.zeros((B, T, H), dtype=dtype)
        gates_o = np.zeros((B, T, H), dtype=dtype)
        cells = np.zeros((B, T, H), dtype=dtype)
        h_prev = np.zeros((B, H), dtype=dtype)
        c_prev = np.zeros((B, H), dtype=dtype)
        for t in range(T):
            z = layer_in[:, t] @ layer.w_x.T + h_prev @ layer.w_h.T + layer.b
            i = _sigmoid(z[:, :H])
            f = _sigmoid(z[:, H : 2 * H])
            g = np.tanh(z[:, 2 * H : 3 * H])
            o = _sigmoid(z[:, 3 * H :])
            c = f * c_prev + i * g
            h = o * np.tanh(c)
            gates_i[:, t], gates_f[:, t], gates_g[:, t], gates_o[:, t] = i, f, g, o
            cells[:, t] = c
            hs[:, t] = h
            h_prev, c_prev = h, c
        cache.append(
            {"x": layer_in, "i": gates_i, "f": gates_f, "g": gates_g, "o": gates_o,
             "c": cells, "h": hs}
        )
        hidden_all.append(hs)
        layer_in = hs

    if squeeze:
        hidden_all = [h[0] for h in hidden_all]
    if want_cache:
        return hidden_all, cache
    return hidden_all


def lstm_backward(
    layers: list[LstmLayer], cache: list[dict], d_hidden: list[np.ndarray | None]
):
    """Backpropagate through time given per-layer output gradients.

    `d_hidden[l]` is dLoss/d(h of layer l), shape (B, T, H), or None.
    Returns (per-layer grads [{w_x, w_h, b}], dLoss/d input frames).
    """
    d_below = None
    grads: list[dict] = [None] * len(layers)
    for l in range(len(layers) - 1, -1, -1):
        layer, cc = layers[l], cache[l]
        B, T, H = cc["h"].shape
        dtype = layer.w_x.dtype
        dh_layer = np.zeros((B, T, H), dtype=dtype)
        if d_hidden[l] is not None:
            dh_layer += d_hidden[l]
        if d_below is not None:
            dh_layer += d_below

        d_wx = np.zeros_like(layer.w_x)
        d_wh = np.zeros_like(layer.w_h)
        d_b = np.zeros_like(layer.b)
        dx = np.zeros_like(cc["x"])
        dh_next = np.zeros((B, H), dtype=dtype)
        dc_next = np.zeros((B, H), dtype=dtype)
        for t in range(T - 1, -1, -1):
            i, f, g, o = cc["i"][:, t], cc["f"][:, t], cc["g"][:, t], cc["o"][:, t]
            c = cc["c"][:, t]
            tanh_c = np.tanh(c)
            dh = dh_layer[:, t] + dh_next
            do = dh * tanh_c
            dc = dh * o * (1 - tanh_c * tanh_c) + dc_next
            c_prev = cc["c"][:, t - 1] if t > 0 else np.zeros_like(c)
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            dc_next = dc * f
            dz = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)],
                axis=1,
            )
            x_t = cc["x"][:, t]
            h_prev = cc["h"][:, t - 1] if t > 0 else np.zeros((B, H), dtype=dtype)
            d_wx += dz.T @ x_t
            d_wh += dz.T @ h_prev
            d_b += dz.sum(axis=0)
            dx[:, t] = dz @ layer.w_x
            dh_next = dz @ layer.w_h
        grads[l] = {"w_x": d_wx, "w_h": d_wh, "b": d_b}
        d_below = dx
    return grads, d_below


# -- code distributions -------------------------------------------------------


def predictor_distribution(h_t: np.ndarray, code_proj: np.ndarray) -> CodeDistribution:
    """p(z | x_{1:t}) = softmax(h_t @ code_proj) over the N codes."""
    h_t = np.asarray(h_t, dtype=np.float64).reshape(-1)
    return CodeDistribution.from_logits(h_t @ np.asarray(code_proj, dtype=np.float64))


def confirmation_distribution(
    x: np.ndarray, codebook: np.ndarray, distance_scale: float = 1.0
) -> CodeDistribution:
    """q(z | x) = softmax(-scale * ||x - v_z||^2); mode = nearest codeword.

    `distance_scale` sharpens the distribution (scale -> inf yields the
    one-hot nearest-codeword assignment).
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    d2 = sq_dist_matrix(x, np.asarray(codebook, dtype=np.float64))[0]
    return CodeDistribution.from_logits(-distance_scale * d2)


def generation_log_densities(
    x: np.ndarray, codebook: np.ndarray, out_proj: np.ndarray | None = None
) -> np.ndarray:
    """log p(x | z) for every code: unit-variance Gaussian at (out_proj @ v_z)."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    means = np.asarray(codebook, dtype=np.float64)
    if out_proj is not None:
        means = means @ np.asarray(out_proj, dtype=np.float64).T
    d = x.shape[1]
    if means.shape[1] != d:
        raise ValueError("dimension mismatch between frame and generator mean")
    d2 = sq_dist_matrix(x, means)[0]
    return -0.5 * d * LOG_TWO_PI - 0.5 * d2


def generation_log_density(
    x: np.ndarray, z: int, codebook: np.ndarray, out_proj: np.ndarray | None = None
) -> float:
    n = np.asarray(codebook).shape[0]
    if not 0 <= z < n:
        raise ValueError(f"code index {z} out of range [0, {n})")
    return float(generation_log_densities(x, codebook, out_proj)[z])


def posterior_distribution(
    x_future: np.ndarray,
    prior: CodeDistribution,
    codebook: np.ndarray,
    out_proj: np.ndarray | None = None,
) -> CodeDistribution:
    """p(z | x_{1:t}, x_{t+k}) propto p(x_{t+k} | z) p(z | x_{1:t})."""
    joint = generation_log_densities(x_future, codebook, out_proj) + prior.log_probs
    return CodeDistribution.from_logits(joint)


def marginal_log_likelihood(
    x_future: np.ndarray,
    prior: CodeDistribution,
    codebook: np.ndarray,
    out_proj: np.ndarray | None = None,
) -> float:
    """log sum_z p(x | z) prior(z), evaluated stably in log space."""
    from .numerics import logsumexp

    joint = generation_log_densities(x_future, codebook, out_proj) + prior.log_probs
    return float(logsumexp(joint))


# -- full model ---------------------------------------------------------------

# Greedy trials used when sampling codebook rows from data frames; several
# candidates per pick keeps rare clusters from being missed at init.
CODEBOOK_INIT_TRIALS = 8


@dataclass
class SpeechCodeModel:
    """Trainable parameter bundle for all five training variants.

    `out_proj is None` means the generator projection is fixed to the
    identity (the co-training setup).  `frozen` names parameter blocks the
    optimizer must not touch.
    """

    cfg: LatentConfig
    lstm: list[LstmLayer]
    code_proj: np.ndarray | None = None  # (H, N)
    codebook: np.ndarray | None = None  # (N, d_c)
    out_proj: np.ndarray | None = None  # (d, d_c), None = identity, frozen
    apc_head: np.ndarray | None = None  # (d, H)
    frozen: frozenset = field(default_factory=frozenset)

    def param_blocks(self) -> dict[str, np.ndarray]:
        """Named live views of every parameter block, in a stable order."""
        blocks: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.lstm):
            blocks[f"lstm{i}.w_x"] = layer.w_x
            blocks[f"lstm{i}.w_h"] = layer.w_h
            blocks[f"lstm{i}.b"] = layer.b
        if self.code_proj is not None:
            blocks["code_proj"] = self.code_proj
        if self.codebook is not None:
            blocks["codebook"] = self.codebook
        if self.out_proj is not None:
            blocks["out_proj"] = self.out_proj
        if self.apc_head is not None:
            blocks["apc_head"] = self.apc_head
        return blocks

    def trainable_blocks(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.param_blocks().items() if k not in self.frozen}

    def with_blocks(self, blocks: dict[str, np.ndarray]) -> "SpeechCodeModel":
        """New model with the given arrays substituted (shapes must match)."""
        own = self.param_blocks()
        merged = {k: np.asarray(blocks.get(k, v)) for k, v in own.items()}
        lstm = [
            LstmLayer(merged[f"lstm{i}.w_x"], merged[f"lstm{i}.w_h"], merged[f"lstm{i}.b"])
            for i in range(len(self.lstm))
        ]
        return SpeechCodeModel(
            cfg=self.cfg,
            lstm=lstm,
            code_proj=merged.get("code_proj"),
            codebook=merged.get("codebook"),
            out_proj=merged.get("out_proj"),
            apc_head=merged.get("apc_head"),
            frozen=self.frozen,
        )

    def astype(self, dtype) -> "SpeechCodeModel":
        return self.with_blocks(
            {k: v.astype(dtype) for k, v in self.param_blocks().items()}
        )

    @property
    def dtype(self):
        return self.lstm[0].w_x.dtype

    def forward_hidden(self, frames: np.ndarray, want_cache: bool = False):
        return lstm_forward(self.lstm, frames, want_cache=want_cache)


def init_codebook_from_frames(
    frames: np.ndarray, n_codes: int, rng: Rng, greedy_trials: int = CODEBOOK_INIT_TRIALS
) -> np.ndarray:
    """Codebook rows sampled from actual data frames.

    Uses distance-squared weighted sampling with a few greedy candidate
    trials per row so the picks spread over the data and dead codes are
    unlikely.
    """
    return kmeanspp_init(frames, n_codes, rng, greedy_trials=greedy_trials)


def build_model(
    cfg: LatentConfig,
    variant: str,
    rng: Rng,
    init_frames: np.ndarray | None = None,
    centroids: np.ndarray | None = None,
    vq_codeword_dim: int = 512,
    dtype=np.float32,
) -> SpeechCodeModel:
    """Construct and initialize the parameter bundle for a training variant.

    `init_frames` (pooled training frames) are required for the co-training
    variants, whose codebook starts from sampled data frames; `centroids`
    are required for hubert-like, whose codebook is clamped.
    """
    lstm = []
    in_dim = cfg.frame_dim
    for _ in range(cfg.layers):
        lstm.append(init_lstm_layer(in_dim, cfg.hidden_dim, rng, dtype))
        in_dim = cfg.hidden_dim
    scale = 1.0 / np.sqrt(cfg.hidden_dim)

    def uniform(shape, s):
        return ((rng.uniform(size=shape) * 2 - 1) * s).astype(dtype)

    if variant in ("cotrain-exact", "cotrain-gumbel"):
        if init_frames is None:
            raise ValueError(f"{variant} needs training frames for codebook init")
        codebook = init_codebook_from_frames(init_frames, cfg.n_codes, rng).astype(dtype)
        return SpeechCodeModel(
            cfg, lstm, code_proj=uniform((cfg.hidden_dim, cfg.n_codes), scale),
            codebook=codebook,
        )
    if variant == "hubert-like":
        if centroids is None:
            raise ValueError("hubert-like needs k-means centroids")
        centroids = np.asarray(centroids, dtype=dtype)
        if centroids.shape != (cfg.n_codes, cfg.frame_dim):
            raise ValueError(
                f"centroid shape {centroids.shape} does not match "
                f"({cfg.n_codes}, {cfg.frame_dim})"
            )
        return SpeechCodeModel(
            cfg, lstm, code_proj=uniform((cfg.hidden_dim, cfg.n_codes), scale),
            codebook=centroids.copy(), frozen=frozenset({"codebook"}),
        )
    if variant == "vq-apc":
        dc_scale = 1.0 / np.sqrt(vq_codeword_dim)
        return SpeechCodeModel(
            cfg, lstm, code_proj=uniform((cfg.hidden_dim, cfg.n_codes), scale),
            codebook=uniform((cfg.n_codes, vq_codeword_dim), dc_scale),
            out_proj=uniform((cfg.frame_dim, vq_codeword_dim), dc_scale),
        )
    if variant == "apc":
        return SpeechCodeModel(cfg, lstm, apc_head=uniform((cfg.frame_dim, cfg.hidden_dim), scale))
    raise ValueError(f"unknown variant '{variant}'")
