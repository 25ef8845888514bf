"""Keyed, process-stable random number derivation.

Every stochastic decision in the pipeline (model init, batch shuffles, clip
starts, splits) draws from an rng derived from a string key rather than a
shared global stream.  This makes joint multi-modality runs bit-identical to
the corresponding independent per-modality runs: each consumer sees the same
stream no matter what else runs alongside it.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(*parts) -> int:
    """Map an arbitrary key tuple to a stable 64-bit seed (sha256-based)."""
    key = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK64


def derive_rng(*parts) -> np.random.Generator:
    """numpy Generator seeded from the key tuple; identical across processes."""
    return np.random.default_rng(derive_seed(*parts))
