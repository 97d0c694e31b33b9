"""Named, counter-based random streams.

One master seed fans out to independent named streams (``init``,
``shuffle``, ``img_weak``, ``img_strong``, ``feat``, ``split``).  Streams
are backed by the Philox counter-based generator, so a draw is a pure
function of (master seed, stream name, step): reproducible bit-for-bit
across runs and platforms, and independent of the order in which other
streams are consumed.
"""

import hashlib

import numpy as np

STREAM_NAMES = ("init", "shuffle", "img_weak", "img_strong", "feat", "split")


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def named_stream(master_seed: int, name: str, step: int = 0) -> np.random.Generator:
    """Generator for one (stream, step) cell.

    The same triple always yields the same sequence; distinct names or
    steps yield statistically independent sequences.
    """
    if master_seed < 0:
        raise ValueError("master seed must be non-negative")
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    key = [master_seed & 0xFFFFFFFFFFFFFFFF, _name_key(name)]
    bitgen = np.random.Philox(counter=[0, 0, 0, step], key=key)
    return np.random.Generator(bitgen)
