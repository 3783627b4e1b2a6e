"""Named random substreams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def _word(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"substream keys must be non-negative, got {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed: int, *names) -> np.random.Generator:
    """Generator keyed by ``(seed, *names)``.

    Streams for different name paths are independent, so e.g. toggling data
    augmentation cannot perturb parameter initialisation.
    """
    return np.random.default_rng(np.random.SeedSequence([_word(seed)] + [_word(n) for n in names]))
