"""Acoustic front end: WAV input, log-Mel features, normalization, archives.

File formats
------------
FTR1 feature file: bytes 0-3 ASCII ``FTR1``, then u32 LE row count T, u32 LE
column count d, then T*d float32 LE values in row-major order.  Normalization
stats reuse the same container with T=2 (row 0 mean, row 1 std).

Manifest: UTF-8 TSV, one ``utt_id<TAB>relative_path`` line per utterance.

Alignment file: UTF-8 TSV, one ``utt_id<TAB>p_1 p_2 ... p_T`` line per
utterance with space-separated non-negative integer phone ids, one per frame.
Phone inventory: TSV ``id<TAB>name``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"FTR1"

# Energy floor applied before the log; keeps all-zero input finite.
ENERGY_FLOOR = 1e-10


@dataclass
class FeatureSequence:
    """One utterance worth of frames (T x d), plus its hop in milliseconds."""

    utterance_id: str
    frames: np.ndarray
    frame_hop_ms: float = 10.0

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames))
        if self.frames.shape[0] < 1:
            raise ValueError(f"{self.utterance_id}: empty feature sequence")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"{self.utterance_id}: non-finite feature values")


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean/std dimension mismatch")
        self.std = np.maximum(self.std, 1e-8)


# -- WAV -----------------------------------------------------------------


def wav_read(path) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM RIFF/WAVE file.

    Returns (samples scaled by 1/32768 as float64, sample rate in Hz).
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated header")
    if raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise ValueError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    offset = 12
    while offset + 8 <= len(raw):
        chunk_id = raw[offset : offset + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, offset + 4)
        body = raw[offset + 8 : offset + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise ValueError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise ValueError(f"{path}: truncated data chunk")
            data = body
        # chunks are word-aligned
        offset += 8 + chunk_size + (chunk_size & 1)

    if fmt is None or data is None:
        raise ValueError(f"{path}: missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise ValueError(f"{path}: unsupported format (non-PCM, tag {audio_format})")
    if channels != 1:
        raise ValueError(f"{path}: unsupported channel count ({channels})")
    if bits != 16:
        raise ValueError(f"{path}: unsupported sample width ({bits} bits)")

    samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    return samples, int(sample_rate)


# -- log-Mel pipeline ------------------------------------------------------


def hz_to_mel(f):
    """HTK Mel scale: 2595 * log10(1 + f / 700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular Mel filters spanning 0 .. sample_rate/2.

    Filter centers are spaced uniformly on the HTK Mel scale; each filter
    rises linearly (in Hz) from its left neighbor's center to its own and
    falls to its right neighbor's.  Returns (n_mels, n_fft//2 + 1) weights.
    """
    n_bins = n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * (sample_rate / n_fft)
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2), n_mels + 2))
    weights = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_hz - left) / max(center - left, 1e-12)
        down = (right - bin_hz) / max(right - center, 1e-12)
        weights[m] = np.maximum(0.0, np.minimum(up, down))
    return weights


def log_mel(
    samples: np.ndarray,
    sample_rate: int,
    window_ms: float = 25.0,
    hop_ms: float = 10.0,
    n_mels: int = 40,
    pre_emphasis: float = 0.0,
) -> np.ndarray:
    """Log-Mel spectrogram: Hamming window, magnitude STFT, Mel filters, ln.

    Frame count is 1 + floor((S - win) / hop).  FFT size is the next power
    of two >= the window length.  Filter outputs are floored at 1e-10
    before the natural log, so any finite input yields finite features.
    """
    samples = np.asarray(samples, dtype=np.float64)
    win = int(round(sample_rate * window_ms / 1000.0))
    hop = int(round(sample_rate * hop_ms / 1000.0))
    if samples.size < win:
        raise ValueError(
            f"signal shorter than one window ({samples.size} < {win} samples)"
        )
    if pre_emphasis > 0.0:
        samples = np.concatenate([samples[:1], samples[1:] - pre_emphasis * samples[:-1]])

    n_frames = 1 + (samples.size - win) // hop
    n_fft = 1
    while n_fft < win:
        n_fft *= 2

    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = samples[idx] * np.hamming(win)[None, :]
    spectrum = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    energies = spectrum @ mel_filterbank(sample_rate, n_fft, n_mels).T
    return np.log(np.maximum(energies, ENERGY_FLOOR)).astype(np.float32)


# -- normalization ----------------------------------------------------------


def compute_norm_stats(dataset: list[FeatureSequence]) -> NormStats:
    """Per-dimension mean and population std over all frames (float64)."""
    if not dataset:
        raise ValueError("empty dataset")
    total = 0
    acc = np.zeros(dataset[0].frames.shape[1], dtype=np.float64)
    for seq in dataset:
        acc += seq.frames.astype(np.float64).sum(axis=0)
        total += seq.frames.shape[0]
    mean = acc / total
    acc_sq = np.zeros_like(acc)
    for seq in dataset:
        diff = seq.frames.astype(np.float64) - mean
        acc_sq += (diff * diff).sum(axis=0)
    std = np.sqrt(acc_sq / total)
    return NormStats(mean=mean, std=std)


def normalize(seq: FeatureSequence, stats: NormStats) -> FeatureSequence:
    """(x - mean) / std per dimension, returned as float32 frames."""
    if seq.frames.shape[1] != stats.mean.shape[0]:
        raise ValueError(
            f"dimension mismatch: frames have {seq.frames.shape[1]} dims, "
            f"stats have {stats.mean.shape[0]}"
        )
    frames = (seq.frames.astype(np.float64) - stats.mean) / stats.std
    return FeatureSequence(seq.utterance_id, frames.astype(np.float32), seq.frame_hop_ms)


# -- FTR1 container ----------------------------------------------------------


def write_feature_file(path, matrix: np.ndarray) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float32))
    rows, cols = matrix.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", rows, cols))
        f.write(matrix.astype("<f4").tobytes(order="C"))


def read_feature_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated feature file")
    if raw[0:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad magic")
    rows, cols = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * rows * cols
    if len(raw) != expected:
        raise ValueError(
            f"{path}: length mismatch vs header ({len(raw)} bytes, expected {expected})"
        )
    data = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=12)
    return data.reshape(rows, cols).copy()


def save_norm_stats(path, stats: NormStats) -> None:
    write_feature_file(path, np.stack([stats.mean, stats.std]))


def load_norm_stats(path) -> NormStats:
    matrix = read_feature_file(path)
    if matrix.shape[0] != 2:
        raise ValueError(f"{path}: stats file must have exactly 2 rows")
    return NormStats(mean=matrix[0], std=matrix[1])


# -- archive (features + manifest) -------------------------------------------


def archive_write(sequences: list[FeatureSequence], out_dir) -> Path:
    """Write one FTR1 file per utterance plus a manifest; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for seq in sequences:
        rel = f"{seq.utterance_id}.ftr"
        write_feature_file(out_dir / rel, seq.frames)
        lines.append(f"{seq.utterance_id}\t{rel}\n")
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest


def archive_read(manifest_path, frame_hop_ms: float = 10.0) -> list[FeatureSequence]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    sequences = []
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            utt_id, rel = line.split("\t")
        except ValueError:
            raise ValueError(f"{manifest_path}: malformed manifest line: {line!r}")
        path = root / rel
        if not path.exists():
            raise ValueError(f"missing feature file for utterance '{utt_id}': {path}")
        sequences.append(FeatureSequence(utt_id, read_feature_file(path), frame_hop_ms))
    if not sequences:
        raise ValueError(f"{manifest_path}: empty manifest")
    return sequences


# -- alignments ----------------------------------------------------------


def write_alignments(path, alignments: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, labels in alignments.items():
            f.write(utt_id + "\t" + " ".join(str(int(x)) for x in labels) + "\n")


def read_alignments(path) -> dict[str, np.ndarray]:
    alignments = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        utt_id, _, rest = line.partition("\t")
        labels = np.array([int(x) for x in rest.split()], dtype=np.int32)
        if labels.size and labels.min() < 0:
            raise ValueError(f"{path}: negative phone id for utterance '{utt_id}'")
        alignments[utt_id] = labels
    return alignments


def write_phone_inventory(path, names: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, name in enumerate(names):
            f.write(f"{i}\t{name}\n")


def read_phone_inventory(path) -> list[str]:
    names = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        idx, _, name = line.partition("\t")
        names[int(idx)] = name
    if sorted(names) != list(range(len(names))):
        raise ValueError(f"{path}: phone ids must be contiguous from 0")
    return [names[i] for i in range(len(names))]
