"""Named, independent random streams derived from one root seed.

Every stochastic stage (corpus sampling, cipher construction, parameter
init, batch shuffling, ...) pulls its own generator keyed by a stable stage
name. Streams are independent of one another and of call order, so adding a
consumer never perturbs existing ones, which is what makes reruns and
partial reuse (e.g. sharing one pretrained backbone across a sweep)
bit-reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(root_seed: int, name: str) -> np.random.Generator:
    """Generator for stage ``name`` under ``root_seed``."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([root_seed, key]))
