"""Deterministic seed derivation.

All stochastic components draw from named substreams derived from one root
seed, so independent stages (corpus synthesis, corruption, training,
sampling, attacks) stay reproducible and decoupled: adding draws to one
stage never shifts another stage's stream.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


def derive_seed(root: int, name: str) -> int:
    """Derive a 64-bit child seed from a root seed and a stream name."""
    digest = hashlib.sha256(f"{root}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK64


def numpy_rng(root: int, name: str) -> np.random.Generator:
    """A numpy Generator on the named substream."""
    return np.random.default_rng(derive_seed(root, name))


def torch_generator(root: int, name: str) -> torch.Generator:
    """A torch CPU Generator on the named substream."""
    gen = torch.Generator(device="cpu")
    # torch.Generator.manual_seed rejects values >= 2**63 on some builds.
    gen.manual_seed(derive_seed(root, name) & ((1 << 63) - 1))
    return gen
