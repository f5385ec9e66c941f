"""Named random substreams derived from one seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for stage ``name``; toggling one stage never shifts another's draws."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])
