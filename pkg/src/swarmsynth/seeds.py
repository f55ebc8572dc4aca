"""Deterministic RNG stream derivation.

Every stochastic component draws from a numpy Generator created through
these helpers so that a scenario seed fixes every random draw in a run.
Stream labels are hashed to integers, which keeps derivations stable across
processes (no reliance on Python's randomized str hash).
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def label_to_int(label: str) -> int:
    """Stable 64-bit integer for a stream label."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(root: int, *labels: str | int) -> int:
    """Derive a child seed from a root seed and a path of labels."""
    h = hashlib.sha256()
    h.update(int(root & _MASK64).to_bytes(8, "little"))
    for lab in labels:
        if isinstance(lab, int):
            h.update(b"i" + int(lab & _MASK64).to_bytes(8, "little"))
        else:
            h.update(b"s" + lab.encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(root: int, *labels: str | int) -> np.random.Generator:
    """Seeded Generator for the stream identified by (root, labels)."""
    return np.random.default_rng(derive_seed(root, *labels))
