"""Named, functionally-derived random substreams.

Every random decision in the lab is drawn from a generator derived as

    Generator(PCG64(SeedSequence(master_seed, spawn_key=(STREAM_ID, *key))))

where *key identifies the use site (e.g. (step, sequence_slot)).  Nothing is
consumed sequentially across steps, so resuming a run at step k reproduces
the exact draw sequence of an uninterrupted run: the checkpointable state is
just (master_seed, stream table).
"""
from __future__ import annotations

import json

import numpy as np

# Stream ids are part of the on-disk format; never renumber.
STREAMS = {
    "masking": 0,   # MLM position selection + 80/10/10 categories
    "gua": 1,       # gradual-unmasking permutations
    "mix": 2,       # decoder/encoder output selection
    "init": 3,      # parameter initialisation
    "data": 4,      # per-epoch corpus shuffles
    "dropout": 5,   # dropout masks (inert at the 0.0 default)
}


class RngHub:
    """Root of all named substreams for one run."""

    def __init__(self, master_seed: int):
        if master_seed < 0:
            raise ValueError(f"master_seed must be >= 0, got {master_seed}")
        self.master_seed = int(master_seed)

    def generator(self, stream: str, *key: int) -> np.random.Generator:
        sid = STREAMS[stream]
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(sid, *key))
        return np.random.Generator(np.random.PCG64(seq))

    # -- checkpoint (de)serialisation ------------------------------------

    def state_json(self) -> str:
        return json.dumps(
            {"master_seed": self.master_seed, "streams": STREAMS},
            sort_keys=True,
        )

    @classmethod
    def from_state_json(cls, text: str) -> "RngHub":
        obj = json.loads(text)
        if obj.get("streams") != STREAMS:
            raise ValueError("rng stream table mismatch; incompatible checkpoint")
        return cls(obj["master_seed"])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RngHub) and other.master_seed == self.master_seed
