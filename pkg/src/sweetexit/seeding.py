"""Named random streams.

Every random draw in the package comes from :func:`stream`, which returns a
numpy ``Generator`` over the Philox-4x64 counter-based bit generator. The
128-bit Philox key is derived from the integer seed and a tuple of stream
labels via SHA-256, so streams are independent of call order and can be
split by adding labels::

    stream(seed, "init", "layer.3.ffn.out.weight")
    stream(seed, "shuffle", epoch)
"""

import hashlib

import numpy as np


def stream_key(seed: int, *labels) -> np.ndarray:
    text = "\x1f".join([str(int(seed))] + [str(l) for l in labels]).encode()
    digest = hashlib.sha256(text).digest()
    return np.frombuffer(digest[:16], dtype="<u8").copy()


def stream(seed: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *labels)))


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within ``bound`` std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std
