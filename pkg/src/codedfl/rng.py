"""Named deterministic random streams.

Every random draw in the simulator comes from a generator derived from the
run seed plus a tuple of tags (entity id, channel name, ...). Two streams with
different tags are statistically independent; the same tags always give the
same stream, regardless of evaluation order or thread count.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_word(tag: int | str) -> int:
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    if tag < 0:
        raise ValueError("integer stream tags must be non-negative")
    return int(tag)


def stream(seed: int, *tags: int | str) -> np.random.Generator:
    """Return the generator for ``(seed, *tags)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_word(t) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
