"""Deterministic seed derivation.

One master seed fans out to every stochastic choice in the system through
a keyed hash of (seed, scope strings), so independent components never
share RNG streams and full runs are reproducible from a single integer.
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *scope: str) -> int:
    h = hashlib.blake2b(digest_size=8, person=b"igt-seed")
    h.update(str(int(master)).encode("ascii"))
    for part in scope:
        h.update(b"\x00")
        h.update(part.encode("utf-8"))
    return int.from_bytes(h.digest(), "little") % (2**63)
