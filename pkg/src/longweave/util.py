"""Small shared helpers: reproducible seeding and lazy sampling."""

from __future__ import annotations

import hashlib
import random
from typing import Iterator


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary parts.

    Built on sha256 rather than hash() so results survive interpreter hash
    randomization; this is what makes parallel builds byte-reproducible.
    """
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def shuffled_indices(rng: random.Random, n: int) -> Iterator[int]:
    """Lazily yield 0..n-1 in uniformly random order (inside-out shuffle).

    Only O(k) state after k draws, so sampling a few hundred items without
    replacement from a large pool stays cheap.
    """
    swap: dict[int, int] = {}
    for j in range(n):
        k = rng.randrange(j, n)
        vj = swap.get(j, j)
        vk = swap.get(k, k)
        swap[j] = vk
        swap[k] = vj
        yield swap[j]
