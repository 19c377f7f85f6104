"""Counter-based random number streams.

Every stochastic operation in the toolkit draws from an :class:`RngStream`
addressed by a root seed plus an integer path (island, grid step, purpose,
...).  Streams with the same address always produce the same draws, and
distinct addresses are statistically independent, so results are bit-for-bit
reproducible no matter how work is scheduled across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["RngStream"]


@dataclass(frozen=True)
class RngStream:
    """Address of an independent random stream: a root seed and a path.

    The generator is a Philox counter-based bit generator keyed by
    ``SeedSequence([root_seed, *path])``; deriving children never consumes
    randomness from the parent.
    """

    root_seed: int
    path: tuple = ()

    def child(self, *indices: int) -> "RngStream":
        """Return the sub-stream addressed by appending ``indices``."""
        return RngStream(self.root_seed, self.path + tuple(int(i) for i in indices))

    def generator(self) -> np.random.Generator:
        """Instantiate the numpy Generator for this address."""
        seq = np.random.SeedSequence([int(self.root_seed) & 0xFFFFFFFFFFFFFFFF, *self.path])
        return np.random.Generator(np.random.Philox(seq))
