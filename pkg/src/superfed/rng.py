"""Named, schedule-independent random streams.

Every random draw in a run comes from a generator keyed by
``(master seed, purpose, client id, round)``. Two workers asking for the same
key get the same sequence no matter which order they run in, which is what
makes serial and threaded client execution produce identical results.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["purpose_tag", "stream"]


def purpose_tag(purpose: str) -> int:
    """Stable 32-bit tag for a purpose string (unlike ``hash``, not salted per process)."""
    digest = hashlib.sha256(purpose.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def stream(
    seed: int, purpose: str, client: int | None = None, round: int | None = None
) -> np.random.Generator:
    # None maps to 0 and real ids shift by one so that client 0 and "no client" differ.
    key = (
        purpose_tag(purpose),
        0 if client is None else int(client) + 1,
        0 if round is None else int(round) + 1,
    )
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
