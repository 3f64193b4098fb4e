"""Optimization driver: batching, Adam, temperature schedule, checkpoints.

Runs are deterministic given the seed: one Philox stream drives model
initialization, per-epoch shuffling and Gumbel noise in sequence, and its
state is stored in every checkpoint, so a resumed run reproduces the
unbroken run bit-exactly (single-threaded mode).

Checkpoint file layout (version 1): ASCII magic ``ACT1``, u32 LE version,
u32 LE block count, then per block: u32 name length, UTF-8 name, u32 rows,
u32 cols, rows*cols float32 LE values.  Parameter blocks come first, then
Adam first/second moments (``adam.m.<name>`` / ``adam.v.<name>``).  After
the blocks: u32 LE metadata length and a canonical JSON object holding the
config, counters, RNG state and loss history.  save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureSequence
from .model import LatentConfig, LstmLayer, SpeechCodeModel, build_model
from .numerics import Rng
from .objectives import (
    Batch,
    GumbelConfig,
    apc_loss,
    cotrain_exact_loss,
    cotrain_gumbel_loss,
    hubert_like_loss,
    vq_apc_loss,
)

CHECKPOINT_MAGIC = b"ACT1"
CHECKPOINT_VERSION = 1

VARIANTS = ("cotrain-exact", "cotrain-gumbel", "hubert-like", "vq-apc", "apc")

LOSS_LOG_HEADER = "epoch,variant,objective,ce,recon,entropy"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str
    seed: int
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    n_codes: int = 256
    shift: int = 5
    frame_dim: int = 40
    hidden_dim: int = 512
    layers: int = 3
    tau_start: float = 2.0
    tau_end: float = 0.5
    tau_decay: float = 0.99995
    vq_codeword_dim: int = 512
    grad_clip: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}'")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid lr / batch_size / epochs")
        if self.tau_end > self.tau_start:
            raise ValueError("tau_end must not exceed tau_start")

    def latent_config(self) -> LatentConfig:
        return LatentConfig(
            n_codes=self.n_codes,
            shift=self.shift,
            frame_dim=self.frame_dim,
            hidden_dim=self.hidden_dim,
            layers=self.layers,
        )


def temperature(step: int, cfg: TrainConfig) -> float:
    """Per-update-step cooling, clamped at tau_end."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return max(cfg.tau_end, cfg.tau_start * cfg.tau_decay**step)


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """Bias-corrected Adam update, in place, for the blocks in `state`."""
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name in state.m:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in block '{name}'")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = float(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    norm = total**0.5
    if norm > max_norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# -- batching -------------------------------------------------------------------


def make_batches(n_utterances: int, batch_size: int, rng: Rng) -> list[np.ndarray]:
    """Seeded shuffle of utterance indices, chunked into batches."""
    if n_utterances < 1:
        raise ValueError("empty dataset")
    order = rng.permutation(n_utterances)
    return [order[i : i + batch_size] for i in range(0, n_utterances, batch_size)]


def pad_batch(
    sequences: list[FeatureSequence],
    targets: dict[str, np.ndarray] | None = None,
) -> Batch:
    """Zero-pad to the longest utterance; masked positions carry no loss."""
    lengths = np.array([s.frames.shape[0] for s in sequences], dtype=np.int64)
    t_max = int(lengths.max())
    dim = sequences[0].frames.shape[1]
    x = np.zeros((len(sequences), t_max, dim), dtype=np.float32)
    target_arr = None
    if targets is not None:
        target_arr = np.full((len(sequences), t_max), -1, dtype=np.int64)
    for i, seq in enumerate(sequences):
        x[i, : lengths[i]] = seq.frames
        if targets is not None:
            codes = targets.get(seq.utterance_id)
            if codes is None or len(codes) != lengths[i]:
                raise ValueError(
                    f"target length mismatch with features for '{seq.utterance_id}'"
                )
            target_arr[i, : lengths[i]] = codes
    return Batch(x=x, lengths=lengths, utt_ids=[s.utterance_id for s in sequences],
                 targets=target_arr)


# -- checkpoint I/O ---------------------------------------------------------------


@dataclass
class Checkpoint:
    model: SpeechCodeModel
    adam: AdamState
    rng: Rng
    noise_rng: Rng
    epoch: int
    step: int
    config: TrainConfig
    history: list[dict] = field(default_factory=list)


def _write_block(f, name: str, arr: np.ndarray) -> None:
    arr2 = np.atleast_2d(np.asarray(arr, dtype=np.float32))
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<II", arr2.shape[0], arr2.shape[1]))
    f.write(arr2.astype("<f4").tobytes(order="C"))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blocks: list[tuple[str, np.ndarray]] = list(ckpt.model.param_blocks().items())
    blocks += [(f"adam.m.{k}", v) for k, v in ckpt.adam.m.items()]
    blocks += [(f"adam.v.{k}", v) for k, v in ckpt.adam.v.items()]
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(ckpt.config),
        "epoch": int(ckpt.epoch),
        "step": int(ckpt.step),
        "adam": {
            "step": int(ckpt.adam.step),
            "beta1": ckpt.adam.beta1,
            "beta2": ckpt.adam.beta2,
            "eps": ckpt.adam.eps,
        },
        "rng": ckpt.rng.state(),
        "noise_rng": ckpt.noise_rng.state(),
        "frozen": sorted(ckpt.model.frozen),
        "history": ckpt.history,
    }
    payload = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks:
            _write_block(f, name, arr)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[0:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n_blocks,) = struct.unpack_from("<I", raw, 8)
    offset = 12
    blocks: dict[str, np.ndarray] = {}
    order: list[str] = []
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        rows, cols = struct.unpack_from("<II", raw, offset)
        offset += 8
        arr = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=offset)
        offset += 4 * rows * cols
        blocks[name] = arr.reshape(rows, cols).copy()
        order.append(name)
    (meta_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    meta = json.loads(raw[offset : offset + meta_len].decode("utf-8"))

    cfg = TrainConfig(**meta["config"])
    lstm = []
    for i in range(cfg.layers):
        lstm.append(
            LstmLayer(
                w_x=blocks[f"lstm{i}.w_x"],
                w_h=blocks[f"lstm{i}.w_h"],
                b=blocks[f"lstm{i}.b"].reshape(-1),
            )
        )
    model = SpeechCodeModel(
        cfg=cfg.latent_config(),
        lstm=lstm,
        code_proj=blocks.get("code_proj"),
        codebook=blocks.get("codebook"),
        out_proj=blocks.get("out_proj"),
        apc_head=blocks.get("apc_head"),
        frozen=frozenset(meta["frozen"]),
    )
    adam_meta = meta["adam"]
    adam = AdamState(m={}, v={}, step=adam_meta["step"], beta1=adam_meta["beta1"],
                     beta2=adam_meta["beta2"], eps=adam_meta["eps"])
    param_blocks = model.param_blocks()
    for name in order:
        if name.startswith("adam.m."):
            key = name[len("adam.m.") :]
            adam.m[key] = blocks[name].reshape(param_blocks[key].shape)
        elif name.startswith("adam.v."):
            key = name[len("adam.v.") :]
            adam.v[key] = blocks[name].reshape(param_blocks[key].shape)
    return Checkpoint(
        model=model,
        adam=adam,
        rng=Rng.from_state(meta["rng"]),
        noise_rng=Rng.from_state(meta["noise_rng"]),
        epoch=int(meta["epoch"]),
        step=int(meta["step"]),
        config=cfg,
        history=meta["history"],
    )


def write_loss_log(path, history: list[dict]) -> None:
    lines = [LOSS_LOG_HEADER]
    for row in history:
        lines.append(
            f"{row['epoch']},{row['variant']},{row['objective']!r},"
            f"{row['ce']!r},{row['recon']!r},{row['entropy']!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- training loop -----------------------------------------------------------------


def _batch_loss(variant, batch, model, tau, rng):
    if variant == "cotrain-exact":
        return cotrain_exact_loss(batch, model)
    if variant == "cotrain-gumbel":
        return cotrain_gumbel_loss(batch, model, GumbelConfig(tau), rng=rng)
    if variant == "hubert-like":
        return hubert_like_loss(batch, model)
    if variant == "vq-apc":
        return vq_apc_loss(batch, model, GumbelConfig(tau), rng=rng)
    if variant == "apc":
        return apc_loss(batch, model)
    raise ValueError(f"unknown variant '{variant}'")


def train(
    cfg: TrainConfig,
    dataset: list[FeatureSequence],
    targets: dict[str, np.ndarray] | None = None,
    centroids: np.ndarray | None = None,
    out_dir=None,
    resume_from=None,
) -> Checkpoint:
    """Run the epoch loop; returns the final checkpoint state.

    With `out_dir` set, writes a checkpoint after every epoch plus the loss
    log CSV.  A non-finite loss aborts with a diagnostic checkpoint.
    `resume_from` restores parameters, optimizer, RNG and counters, then
    continues up to `cfg.epochs`.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if cfg.variant == "hubert-like" and (targets is None or centroids is None):
        raise ValueError("hubert-like training needs targets and centroids")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config.variant != cfg.variant:
            raise ValueError(
                f"checkpoint variant '{ckpt.config.variant}' does not match '{cfg.variant}'"
            )
        # everything but the target epoch count comes from the checkpoint,
        # so a resumed run cannot silently change hyperparameters
        cfg = dataclasses.replace(ckpt.config, epochs=cfg.epochs)
        model, adam, rng, noise_rng = ckpt.model, ckpt.adam, ckpt.rng, ckpt.noise_rng
        start_epoch, step, history = ckpt.epoch, ckpt.step, list(ckpt.history)
    else:
        rng = Rng(cfg.seed)
        # Gumbel noise comes from its own split stream: variants then see
        # identical init and shuffle randomness for the same seed
        noise_rng = rng.split(1)[0]
        init_frames = None
        if cfg.variant in ("cotrain-exact", "cotrain-gumbel"):
            init_frames = np.concatenate([s.frames for s in dataset], axis=0)
        model = build_model(
            cfg.latent_config(),
            cfg.variant,
            rng,
            init_frames=init_frames,
            centroids=centroids,
            vq_codeword_dim=cfg.vq_codeword_dim,
        )
        adam = init_adam(model.trainable_blocks())
        start_epoch, step, history = 0, 0, []

    if cfg.epochs == 0 and out_dir is not None:
        ckpt0 = Checkpoint(model, adam, rng, noise_rng, 0, step, cfg, history)
        save_checkpoint(out_dir / "epoch0000.ckpt", ckpt0)
        save_checkpoint(out_dir / "latest.ckpt", ckpt0)

    params = model.param_blocks()
    for epoch in range(start_epoch, cfg.epochs):
        sums = {"objective": 0.0, "ce": 0.0, "recon": 0.0, "entropy": 0.0}
        frames = 0
        for idx in make_batches(len(dataset), cfg.batch_size, rng):
            batch = pad_batch([dataset[i] for i in idx], targets)
            tau = temperature(step, cfg)
            breakdown, grads = _batch_loss(cfg.variant, batch, model, tau, noise_rng)
            if not np.isfinite(breakdown.total):
                if out_dir is not None:
                    save_checkpoint(
                        out_dir / "diverged.ckpt",
                        Checkpoint(model, adam, rng, noise_rng, epoch, step, cfg, history),
                    )
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}"
                )
            if cfg.grad_clip > 0:
                clip_gradients(grads, cfg.grad_clip)
            adam_step(params, grads, adam, cfg.lr)
            step += 1
            n = breakdown.n_frames
            frames += n
            sums["objective"] += breakdown.per_frame_objective * n
            sums["ce"] += breakdown.ce_term * n
            sums["recon"] += breakdown.recon_term * n
            sums["entropy"] += breakdown.entropy_term * n
        row = {
            "epoch": epoch,
            "variant": cfg.variant,
            "objective": sums["objective"] / frames,
            "ce": sums["ce"] / frames,
            "recon": sums["recon"] / frames,
            "entropy": sums["entropy"] / frames,
        }
        history.append(row)
        if out_dir is not None:
            ckpt_e = Checkpoint(model, adam, rng, noise_rng, epoch + 1, step, cfg,
                                history)
            save_checkpoint(out_dir / f"epoch{epoch + 1:04d}.ckpt", ckpt_e)
            save_checkpoint(out_dir / "latest.ckpt", ckpt_e)
            write_loss_log(out_dir / "loss_log.csv", history)

    return Checkpoint(model, adam, rng, noise_rng, cfg.epochs, step, cfg, history)
