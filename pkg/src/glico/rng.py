"""Named random substreams derived from one master seed.

Every stochastic consumer (data order, replacement coins, interpolation
factors, noise draws, ...) gets its own stream so that changing how often
one of them is consulted never perturbs the others.  A stream is identified
by ``(master_seed, name, *extra)``; ``name`` is hashed with CRC32 so the
derivation is stable across Python processes and versions::

    SeedSequence([master_seed, crc32(name), *extra])
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _entropy(seed: int, name: str, extra) -> list[int]:
    return [int(seed), zlib.crc32(name.encode("utf-8")), *(int(e) for e in extra)]


def seed_sequence(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(_entropy(seed, name, extra))


def numpy_stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, name, *extra))


def int_seed(seed: int, name: str, *extra: int) -> int:
    """A 63-bit integer seed for APIs that only take ints."""
    return int(seed_sequence(seed, name, *extra).generate_state(1, np.uint64)[0] >> np.uint64(1))


def torch_stream(seed: int, name: str, *extra: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int_seed(seed, name, *extra))
    return g


def set_deterministic(enabled: bool = True) -> None:
    """Force bitwise-reproducible kernels (single intra-op thread on CPU)."""
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)
