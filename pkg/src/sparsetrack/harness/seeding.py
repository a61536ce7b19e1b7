"""Named random streams derived from one root seed."""

import zlib

import numpy as np

STREAM_NAMES = ("data", "init", "dropout", "noise", "eval", "rollout")


class RunStreams:
    """``get(name)`` returns a fresh generator for that stream.

    Streams are keyed by ``(root_seed, crc32(name))``, so changing how one
    stream is consumed never shifts another.
    """

    def __init__(self, seed, overrides=None):
        self.seed = int(seed)
        self.overrides = dict(overrides or {})

    def seed_for(self, name):
        return int(self.overrides.get(name, self.seed))

    def get(self, name):
        key = zlib.crc32(name.encode())
        return np.random.default_rng(np.random.SeedSequence([self.seed_for(name), key]))
