"""Deterministic random-stream derivation.

Every stochastic choice in the package flows through a counter-based
Philox generator keyed by a list of integer components (seed, domain tag,
frame index, epoch, ...). Identical components give identical streams on
any platform, and distinct component tuples give independent streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _component(value) -> int:
    if isinstance(value, (int, np.integer)):
        return int(value) & _MASK64
    if isinstance(value, str):
        digest = hashlib.blake2b(value.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    if isinstance(value, bytes):
        digest = hashlib.blake2b(value, digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"rng component must be int, str, or bytes, got {type(value)!r}")


def derive_seed(*components) -> int:
    """Collapse components into one 64-bit seed (stable across runs)."""
    entropy = [_component(c) for c in components]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def stream(*components) -> np.random.Generator:
    """Philox generator keyed by the component tuple."""
    entropy = [_component(c) for c in components]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
