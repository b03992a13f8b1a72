"""Root-seed derivation.

Every pipeline stage draws its own seed from the root seed and a stage
label, so one root seed reproduces the whole run without bookkeeping.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, label: str) -> int:
    """Stable 64-bit seed for a named stage under the given root seed."""
    digest = hashlib.sha256(f"{root}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(root: int, label: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root, label)))
