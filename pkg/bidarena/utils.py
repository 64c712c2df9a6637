from __future__ import annotations
from typing import Any, Tuple

import hashlib
import pickle

import numpy as np


def _make_key(*parts: Any) -> str:
    """Create a stable key from *parts* (hex digest for external storage).

    Mirrors the way ``functools._make_key`` flattens call arguments, but the
    result survives process restarts so it can address rows in a database.
    """
    key_parts: Tuple[Any, ...] = tuple(parts)
    pickled = pickle.dumps(key_parts, protocol=pickle.HIGHEST_PROTOCOL)
    return hashlib.sha256(pickled).hexdigest()


def _name_word(name: str) -> int:
    # first 4 bytes of sha256(name), unsigned
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "big")


def seed_sequence(master_seed: int, *names: str) -> np.random.SeedSequence:
    """Child seed sequence for the stream addressed by *names*.

    The spawn key depends only on the names, so adding a new stream (another
    agent, another kind) never shifts the streams that already exist.
    """
    return np.random.SeedSequence(
        entropy=int(master_seed), spawn_key=tuple(_name_word(n) for n in names)
    )


def spawn_rng(master_seed: int, *names: str) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master_seed, *names))


def torch_seed(master_seed: int, *names: str) -> int:
    """63-bit seed for ``torch.manual_seed`` drawn from the named stream."""
    state = seed_sequence(master_seed, "torch", *names).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])
