"""Named random substreams fanned out from one root seed"""
import zlib
from typing import Dict

import numpy as np

STREAMS = ("env", "policy-noise", "replay-sampling", "eval", "init", "diagnostics")


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for (seed, name); independent of which other streams exist"""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


class RngStreams:
    """Lazily created generators keyed by stream name"""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: Dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = substream(self.seed, name)
        return self._streams[name]

    def fresh(self, name: str) -> np.random.Generator:
        """A new generator at the start of the named stream"""
        return substream(self.seed, name)
