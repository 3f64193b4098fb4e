"""Autoregressive co-training of discrete speech codes.

A library and CLI for learning discrete frame-level speech representations
with a codebook model trained by exact marginalization, Gumbel-softmax
approximation, HuBERT-like offline targets, VQ-APC, or plain APC, plus
linear phone probing and code/phone co-occurrence analysis.
"""

__version__ = "0.1.0"
