"""Deterministic random-stream derivation.

Every run consumes randomness from a single 64-bit seed. Independent
consumers (parameter init, data resampling, dropout masks, ...) each pull a
named stream derived from that seed, so adding a new consumer never perturbs
the draws seen by existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np

#: Stream names used by the package. Free-form names are allowed; these are
#: the ones the training stack reserves.
INIT = "init"
DATA = "data"
DROPOUT = "dropout"


def derive_seed(seed: int, name: str, *indices: int) -> int:
    """Derive a child seed from ``seed`` for the stream ``name``.

    Extra integer ``indices`` select sub-streams (per split, per instance,
    per layer, ...). The derivation hashes the decimal rendering of all the
    parts, so it is stable across platforms and numpy versions.
    """
    if not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    parts = [str(int(seed)), name] + [str(int(i)) for i in indices]
    digest = hashlib.sha256("/".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return a ``numpy.random.Generator`` for the named stream."""
    return np.random.default_rng(derive_seed(seed, name, *indices))
