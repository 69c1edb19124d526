"""Seed plumbing: one root seed, named substreams everywhere else."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *names) -> int:
    """Stable 63-bit seed for the substream named by `names`."""
    tag = f"{int(root)}/" + "/".join(str(n) for n in names)
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def substream(root: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))
