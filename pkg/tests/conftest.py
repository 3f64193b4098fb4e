import struct

import numpy as np
import pytest

from cotrain.model import LatentConfig, build_model
from cotrain.numerics import Rng
from cotrain.objectives import Batch


def write_wav(path, samples, rate=16000, channels=1, bits=16, audio_format=1):
    """Minimal RIFF/WAVE writer for test fixtures (int16 samples)."""
    samples = np.asarray(samples, dtype="<i2")
    if channels > 1:
        samples = np.repeat(samples, channels)
    data = samples.tobytes()
    byte_rate = rate * channels * bits // 8
    block_align = channels * bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, audio_format, channels, rate, byte_rate, block_align, bits
    )
    header += b"data" + struct.pack("<I", len(data))
    with open(path, "wb") as f:
        f.write(header + data)
    return path


def tiny_model(variant, seed=3, n_codes=5, dim=4, hidden=8, layers=2, shift=2,
               dtype=np.float64, n_frames=64, vq_dim=6):
    """Small randomly initialized model plus matching init frames."""
    rng = Rng(seed)
    cfg = LatentConfig(n_codes=n_codes, shift=shift, frame_dim=dim,
                       hidden_dim=hidden, layers=layers)
    frames = np.asarray(rng.normal(size=(n_frames, dim)))
    if variant == "hubert-like":
        centroids = frames[rng.permutation(n_frames)[:n_codes]]
        model = build_model(cfg, variant, rng, centroids=centroids, dtype=dtype)
    else:
        model = build_model(cfg, variant, rng, init_frames=frames,
                            vq_codeword_dim=vq_dim, dtype=dtype)
    return model, frames


def random_batch(seed, n_utts=2, t_len=12, dim=4, dtype=np.float64, lengths=None):
    rng = Rng(seed)
    x = np.asarray(rng.normal(size=(n_utts, t_len, dim)), dtype=dtype)
    if lengths is None:
        lengths = np.full(n_utts, t_len)
    else:
        lengths = np.asarray(lengths)
        for i, n in enumerate(lengths):
            x[i, n:] = 0.0
    return Batch(x=x, lengths=lengths, utt_ids=[f"u{i}" for i in range(n_utts)])


@pytest.fixture
def rng():
    return Rng(12345)
