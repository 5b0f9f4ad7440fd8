"""Deterministic RNG fan-out.

Every run owns a single root seed. Components derive independent
generators from (root_seed, label) so that adding or reordering one
consumer never shifts the streams of the others. The label is folded
through CRC-32, which is stable across platforms and Python versions.
"""

import zlib

import numpy as np


def derive_rng(root_seed: int, label: str) -> np.random.Generator:
    """Generator for a named component under the given root seed."""
    tag = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([root_seed, tag]))


def derive_seed(root_seed: int, label: str) -> int:
    """Integer sub-seed, for APIs that want a seed rather than a Generator."""
    tag = zlib.crc32(label.encode("utf-8"))
    return int(np.random.SeedSequence([root_seed, tag]).generate_state(1)[0])
