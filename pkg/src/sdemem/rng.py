"""Per-subject reproducible random-number blocks.

Block pseudo-marginal updates need the auxiliary random numbers split into
per-subject blocks that can be refreshed one at a time while the others
replay bit-exactly. Each block owns a 64-bit seed derived from the master
seed; a block's current stream is keyed by (block seed, epoch, lane), where
the epoch counts refreshes and the lane separates consumers (particle
filter, random-effect draws, conditional-filter refreshes). Regenerating a
generator with the same key reproduces identical draws, so replaying a
store state is always bit-exact and refreshing one block leaves every other
block's draws untouched.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = ["RngBlockStore", "LANES"]

LANES = {"pf": 0, "re": 1, "cpf": 2}


@dataclass
class RngBlockStore:
    master_seed: int
    block_seeds: np.ndarray  # (M,) uint64
    epochs: np.ndarray = field(default=None)  # (M,) int64 refresh counters

    def __post_init__(self):
        self.block_seeds = np.asarray(self.block_seeds, dtype=np.uint64)
        if self.epochs is None:
            self.epochs = np.zeros(self.block_seeds.size, dtype=np.int64)
        else:
            self.epochs = np.asarray(self.epochs, dtype=np.int64).copy()

    @classmethod
    def create(cls, master_seed, n_blocks):
        ss = np.random.SeedSequence(master_seed)
        seeds = ss.generate_state(n_blocks, dtype=np.uint64)
        return cls(master_seed=int(master_seed), block_seeds=seeds)

    @property
    def n_blocks(self):
        return int(self.block_seeds.size)

    def generator(self, block, lane="pf", *extra):
        """Fresh generator for one block/lane, positioned at the stream start."""
        key = [int(self.block_seeds[block]), int(self.epochs[block]), LANES[lane]]
        key.extend(int(e) for e in extra)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))

    def copy(self):
        return RngBlockStore(self.master_seed, self.block_seeds, self.epochs)

    def refreshed(self, *blocks):
        """Copy of the store with the given blocks advanced to fresh streams."""
        out = self.copy()
        for b in blocks:
            out.epochs[b] += 1
        return out

    def refreshed_all(self):
        out = self.copy()
        out.epochs += 1
        return out

    def adopt_epochs(self, other, blocks):
        """Copy with the epochs of `blocks` taken from another store.

        Used to commit a per-subject accept: the accepted subjects adopt the
        proposal store's streams while everyone else keeps theirs.
        """
        out = self.copy()
        for b in blocks:
            out.epochs[b] = other.epochs[b]
        return out
