"""Counter-based random streams keyed by (seed, path index, substream).

Every draw in the package comes from a Philox4x64 generator whose 128-bit key
is ``seed | stream_id << 64`` and whose counter starts at ``substream << 192``.
Two keys that differ anywhere select disjoint streams, so a path's randomness
depends only on its own key and never on scheduling order or batch layout.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

_U64 = 1 << 64


class Substream(enum.IntEnum):
    BROWNIAN = 0
    JUMP_TIMES = 1
    JUMP_MARKS = 2
    THINNING = 3
    INITIAL_CONDITION = 4


@dataclass(frozen=True)
class RngStreamKey:
    seed: int
    stream_id: int
    substream: Substream

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            value = getattr(self, name)
            if not (0 <= int(value) < _U64):
                raise ConfigurationError(f"{name} must be a 64-bit unsigned integer, got {value}")
        object.__setattr__(self, "substream", Substream(self.substream))

    def generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(
            key=int(self.seed) | (int(self.stream_id) << 64),
            counter=int(self.substream) << 192,
        )
        return np.random.Generator(bitgen)

    def with_substream(self, substream: Substream) -> "RngStreamKey":
        return RngStreamKey(self.seed, self.stream_id, substream)


def stream_key(seed: int, stream_id: int, substream: Substream) -> RngStreamKey:
    return RngStreamKey(int(seed), int(stream_id), substream)
