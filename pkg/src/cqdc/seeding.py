"""Deterministic random streams derived from one master seed.

Streams are keyed by labels (strings or integers), so a component's draws
do not depend on how many draws other components made, or in which order
samples were evaluated.
"""
import zlib

import numpy as np

CHUNK = 4096


def _key(label):
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def stream(seed, *labels):
    """Generator for the sub-stream ``labels`` of master ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(l) for l in labels))
    return np.random.default_rng(ss)


def chunked(seed, n, draw, *labels):
    """Concatenate ``draw(rng, k)`` over fixed-size chunks of sample indices.

    Sample i always comes from chunk i // CHUNK of the labelled stream, so
    its value depends only on (seed, labels, i).
    """
    parts = []
    for c in range((n + CHUNK - 1) // CHUNK):
        k = min(CHUNK, n - c * CHUNK)
        rng = stream(seed, *labels, "chunk", c)
        parts.append(draw(rng, CHUNK)[:k])
    if not parts:
        return draw(stream(seed, *labels), 0)
    return np.concatenate(parts, axis=0)
