"""Named, reproducible random substreams derived from one master seed.

Every source of randomness in a run (model init, dropout, data order, noise
injection, fold assignment) draws from its own named stream. Streams are
derived by hashing the stream name into the seed material, so adding or
removing one consumer never shifts the draws of another, and the derivation
is stable across platforms and Python processes.
"""

import hashlib

import numpy as np


def _name_words(name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def _sequence(master_seed: int, name: str) -> np.random.SeedSequence:
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF, *_name_words(name)]
    return np.random.SeedSequence(entropy)


def substream(master_seed: int, name: str) -> np.random.Generator:
    """Generator for the named stream under the given master seed."""
    return np.random.default_rng(_sequence(master_seed, name))


def substream_seed(master_seed: int, name: str) -> int:
    """Stable integer seed for the named stream, for APIs that take an int."""
    return int(_sequence(master_seed, name).generate_state(1, np.uint64)[0])
