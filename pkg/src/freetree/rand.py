"""Deterministic seed derivation.

All stochastic components key their generators off a master seed plus a
string path (subject index, tree node path, splitter name, ...). Hashing
with SHA-256 keeps the derivation stable across platforms and Python
processes, unlike the builtin ``hash``.
"""

from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary string-able parts."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
