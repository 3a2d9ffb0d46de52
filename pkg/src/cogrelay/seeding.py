"""Deterministic derivation of independent random streams.

Every stochastic routine in the package takes an explicit generator, and
parallel or repeated work derives its generator from a root seed plus a
content path.  The derivation rule is:

    stream(root, *path) = PCG64(SeedSequence(root, spawn_key=encode(path)))

where ``encode`` maps each path element to a 64-bit word: integers are used
as-is (offset into the non-negative range), strings are hashed with SHA-256
and truncated.  Two streams with different paths are statistically
independent, and the mapping is stable across processes and platforms, so
parallel and serial executions of the same experiment consume identical
random numbers.
"""

from __future__ import annotations

import hashlib

import numpy as np

_WORD = 1 << 63


def _encode(part: int | str) -> int:
    if isinstance(part, bool):
        raise TypeError("boolean seed-path elements are ambiguous")
    if isinstance(part, int):
        if part < -_WORD or part >= _WORD:
            raise ValueError(f"seed-path integer out of range: {part}")
        return part + _WORD if part < 0 else part
    digest = hashlib.sha256(part.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def seed_sequence(root: int, *path: int | str) -> np.random.SeedSequence:
    """SeedSequence for the stream addressed by ``path`` under ``root``."""
    key = tuple(_encode(p) for p in path)
    return np.random.SeedSequence(entropy=root, spawn_key=key)


def stream(root: int, *path: int | str) -> np.random.Generator:
    """Generator for the stream addressed by ``path`` under ``root``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(root, *path)))


def path_fingerprint(*path: int | str) -> str:
    """Short printable tag for a seed path, used in artifacts and manifests."""
    return "/".join(str(p) for p in path)
