"""Frozen-model evaluation: linear phone probing and code/phone co-occurrence.

The probe trains a single linear softmax classifier on hidden states of one
LSTM layer against frame-level phone labels; the backbone is never touched.
PER here is frame-level classification error (1 - accuracy), the protocol
for forced-alignment labels.  Code/phone matrices count which phone appears
under each discrete code, with the code read either from the predictor's
mode or the confirmer's nearest codeword.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureSequence
from .model import SpeechCodeModel
from .numerics import LOG_TWO_PI, Rng, log_softmax, logsumexp, sq_dist_matrix
from .objectives import Batch, apc_loss, cotrain_exact_loss
from .training import adam_step, init_adam, make_batches


@dataclass
class ProbeResult:
    layer: int
    per: float
    confusion: np.ndarray  # (P, P), rows = reference phone, cols = predicted
    n_frames: int
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class CodePhoneMatrix:
    cond: np.ndarray  # (P, N) conditional p(phone | code); zero columns for unused codes
    occupancy: np.ndarray  # (N,) frames per code
    counts: np.ndarray  # (P, N) raw co-occurrence counts


def _check_labels(seqs, labels, num_phones):
    pairs = []
    for seq in seqs:
        lab = labels.get(seq.utterance_id)
        if lab is None or len(lab) != seq.frames.shape[0]:
            raise ValueError(
                f"alignment length mismatch for utterance '{seq.utterance_id}'"
            )
        if lab.size and int(lab.max()) >= num_phones:
            raise ValueError(
                f"phone id {int(lab.max())} out of range for inventory of {num_phones}"
            )
        pairs.append((seq, np.asarray(lab, dtype=np.int64)))
    return pairs


def _hidden_states(model: SpeechCodeModel, seq: FeatureSequence, layer: int) -> np.ndarray:
    if not 1 <= layer <= len(model.lstm):
        raise ValueError(f"layer must be in [1, {len(model.lstm)}]")
    return model.forward_hidden(seq.frames)[layer - 1]


def probe_train(
    model: SpeechCodeModel,
    layer: int,
    train_set: list[FeatureSequence],
    train_labels: dict[str, np.ndarray],
    eval_set: list[FeatureSequence],
    eval_labels: dict[str, np.ndarray],
    num_phones: int,
    lr: float = 1e-3,
    epochs: int = 10,
    batch_size: int = 16,
    seed: int = 0,
) -> ProbeResult:
    """Train a linear phone classifier on frozen layer-`layer` hidden states.

    Weights start at zero and the bias at the log class priors of the probe
    training labels, so an untrained probe predicts the majority phone.
    Optimized with Adam over utterance batches; returns the frame error rate
    and confusion counts on the held-out set.
    """
    train_pairs = _check_labels(train_set, train_labels, num_phones)
    eval_pairs = _check_labels(eval_set, eval_labels, num_phones)
    rng = Rng(seed)

    # backbone is frozen: hidden states are computed once
    train_h = [_hidden_states(model, seq, layer) for seq, _ in train_pairs]
    hidden_dim = train_h[0].shape[1]

    counts = np.zeros(num_phones, dtype=np.float64)
    for _, lab in train_pairs:
        counts += np.bincount(lab, minlength=num_phones)
    priors = np.log(np.maximum(counts / counts.sum(), 1e-12))

    weights = np.zeros((num_phones, hidden_dim), dtype=np.float32)
    bias = priors.astype(np.float32)
    clf = {"w": weights, "b": bias}
    adam = init_adam(clf)
    for _ in range(epochs):
        for idx in make_batches(len(train_pairs), batch_size, rng):
            h = np.concatenate([train_h[i] for i in idx], axis=0)
            y = np.concatenate([train_pairs[i][1] for i in idx], axis=0)
            logits = h @ weights.T + bias
            logp = log_softmax(logits, axis=1)
            d_logits = np.exp(logp)
            d_logits[np.arange(y.size), y] -= 1.0
            d_logits /= y.size
            grads = {"w": d_logits.T @ h, "b": d_logits.sum(axis=0)}
            adam_step(clf, grads, adam, lr)

    confusion = np.zeros((num_phones, num_phones), dtype=np.int64)
    for seq, lab in eval_pairs:
        h = _hidden_states(model, seq, layer)
        pred = np.argmax(h @ weights.T + bias, axis=1)
        np.add.at(confusion, (lab, pred), 1)
    total = int(confusion.sum())
    per = 1.0 - float(np.trace(confusion)) / total
    return ProbeResult(layer=layer, per=per, confusion=confusion, n_frames=total,
                       weights=weights, bias=bias)


def code_phone_matrix(
    model: SpeechCodeModel,
    dataset: list[FeatureSequence],
    labels: dict[str, np.ndarray],
    source: str,
    num_phones: int,
) -> CodePhoneMatrix:
    """Co-occurrence of phone labels and discrete codes over valid frames.

    For anchor t the pair is (phone at t+shift, code of frame t+shift); the
    code is the predictor's mode computed from h_t ("predictor") or the
    nearest codeword of the future frame ("confirmer").  Each code column of
    the result is normalized to a conditional distribution over phones.
    """
    if source not in ("predictor", "confirmer"):
        raise ValueError(f"unknown code source '{source}'")
    if model.codebook is None:
        raise ValueError("model has no codebook")
    pairs = _check_labels(dataset, labels, num_phones)
    k = model.cfg.shift
    n_codes = model.cfg.n_codes
    counts = np.zeros((num_phones, n_codes), dtype=np.int64)
    for seq, lab in pairs:
        t_len = seq.frames.shape[0]
        if t_len <= k:
            continue
        future = seq.frames[k:]
        if source == "confirmer":
            codes = np.argmin(
                sq_dist_matrix(future.astype(np.float64),
                               model.codebook.astype(np.float64)),
                axis=1,
            )
        else:
            h = model.forward_hidden(seq.frames)[-1][: t_len - k]
            codes = np.argmax(h @ model.code_proj, axis=1)
        np.add.at(counts, (lab[k:], codes), 1)
    occupancy = counts.sum(axis=0)
    cond = np.zeros((num_phones, n_codes), dtype=np.float64)
    used = occupancy > 0
    cond[:, used] = counts[:, used] / occupancy[used]
    return CodePhoneMatrix(cond=cond, occupancy=occupancy, counts=counts)


def purity(matrix: CodePhoneMatrix) -> float:
    """Occupancy-weighted mean of each code's most probable phone."""
    total = int(matrix.occupancy.sum())
    if total == 0:
        raise ValueError("zero total occupancy")
    top = matrix.cond.max(axis=0)
    return float((matrix.occupancy * top).sum() / total)


def dataset_objective(
    model: SpeechCodeModel, dataset: list[FeatureSequence], variant: str
) -> list[dict]:
    """Per-utterance per-frame objective and marginal log-likelihood.

    The objective follows each variant's reporting convention: the exact
    co-training summand for the co-training variants, the hard-assignment
    form for hubert-like, and the negated (mode-decoded, for vq-apc)
    reconstruction loss for the regression variants.  The marginal is
    log sum_z p(x_future | z) p(z | past) and needs a codebook.
    """
    k = model.cfg.shift
    rows = []
    for seq in dataset:
        t_len = seq.frames.shape[0]
        if t_len <= k:
            continue
        batch = Batch(
            x=seq.frames[None].astype(np.float32),
            lengths=np.array([t_len]),
            utt_ids=[seq.utterance_id],
        )
        marginal = None
        if model.codebook is not None:
            h = model.forward_hidden(seq.frames)[-1][: t_len - k]
            logp = log_softmax(h @ model.code_proj, axis=1)
            means = model.codebook
            if model.out_proj is not None:
                means = model.codebook @ model.out_proj.T
            d2 = sq_dist_matrix(seq.frames[k:].astype(np.float64),
                                means.astype(np.float64))
            loggen = -0.5 * model.cfg.frame_dim * LOG_TWO_PI - 0.5 * d2
            per_anchor = [logsumexp(loggen[i] + logp[i]) for i in range(d2.shape[0])]
            marginal = float(np.mean(per_anchor))

        if variant in ("cotrain-exact", "cotrain-gumbel"):
            bd, _ = cotrain_exact_loss(batch, model, want_grads=False)
            objective = bd.per_frame_objective
        elif variant == "hubert-like":
            bd, _ = cotrain_exact_loss(batch, model, want_grads=False, q_mode="hard")
            objective = bd.per_frame_objective
        elif variant == "vq-apc":
            h = model.forward_hidden(seq.frames)[-1][: t_len - k]
            codes = np.argmax(h @ model.code_proj, axis=1)
            recon = seq.frames[k:] - model.codebook[codes] @ model.out_proj.T
            objective = float(
                -np.mean(0.5 * model.cfg.frame_dim * LOG_TWO_PI
                         + 0.5 * (recon * recon).sum(axis=1))
            )
        elif variant == "apc":
            bd, _ = apc_loss(batch, model, want_grads=False)
            objective = -bd.total
        else:
            raise ValueError(f"unknown variant '{variant}'")
        rows.append(
            {"utt_id": seq.utterance_id, "frames": t_len - k,
             "objective": objective, "marginal": marginal}
        )
    if not rows:
        raise ValueError("no utterance long enough for the configured shift")
    return rows


# -- CSV emitters -----------------------------------------------------------


def probe_result_csv(result: ProbeResult) -> str:
    return f"layer,per,frames\n{result.layer},{result.per!r},{result.n_frames}\n"


def confusion_csv(result: ProbeResult, phone_names: list[str]) -> str:
    header = "phone," + ",".join(phone_names)
    lines = [header]
    for i, name in enumerate(phone_names):
        lines.append(name + "," + ",".join(str(int(c)) for c in result.confusion[i]))
    return "\n".join(lines) + "\n"


def code_phone_csv(matrix: CodePhoneMatrix, phone_names: list[str]) -> str:
    n_codes = matrix.cond.shape[1]
    header = "phone," + ",".join(f"code{j}" for j in range(n_codes))
    lines = [header]
    for i, name in enumerate(phone_names):
        lines.append(name + "," + ",".join(repr(float(v)) for v in matrix.cond[i]))
    lines.append("occupancy," + ",".join(str(int(v)) for v in matrix.occupancy))
    return "\n".join(lines) + "\n"
