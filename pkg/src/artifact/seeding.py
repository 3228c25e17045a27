"""Deterministic random-stream derivation.

A single master seed fans out into independent named streams (dataset
batches, subsampling, solver initialization, ...) so that adding draws to
one consumer never perturbs another, and reruns with the same seed are
byte-identical.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["child_sequence", "stream"]


def _scope_word(part: int | str) -> int:
    """Map one scope component to a stable 32-bit word.

    Integers pass through (masked to 32 bits); strings hash via CRC-32,
    which is platform- and run-independent, unlike the built-in ``hash``.
    """
    if isinstance(part, (int, np.integer)) and not isinstance(part, bool):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf8"))


def child_sequence(master_seed: int, *scope: int | str) -> np.random.SeedSequence:
    """Derive a named child seed sequence from a master seed.

    Parameters
    ----------
    master_seed : int
        The run-level seed.
    *scope : int or str
        Names and indices identifying the stream, e.g.
        ``("dataset", 3)`` or ``("subsample", "x")``.

    Returns
    -------
    numpy.random.SeedSequence
    """
    words = [int(master_seed) & 0xFFFFFFFFFFFFFFFF]
    words.extend(_scope_word(p) for p in scope)
    return np.random.SeedSequence(words)


def stream(master_seed: int, *scope: int | str) -> np.random.Generator:
    """Return a generator for the named child stream of ``master_seed``."""
    return np.random.default_rng(child_sequence(master_seed, *scope))
