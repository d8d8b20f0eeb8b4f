"""Deterministic seed derivation for independent RNG streams."""

from __future__ import annotations

import hashlib


def derive_seed(base_seed: int, *parts: int) -> int:
    """Hash (base_seed, parts...) into a fresh 63-bit seed.

    Used wherever a sub-task needs its own reproducible stream (one model per
    online step, one frame per dataset index) without coupling streams through
    shared RNG state.
    """
    h = hashlib.sha256()
    h.update(str(int(base_seed)).encode())
    for part in parts:
        h.update(b"/")
        h.update(str(int(part)).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
