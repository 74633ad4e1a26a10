"""Deterministic RNG derivation from a single root seed.

Every random draw in the package flows through `derive_rng` or
`derive_seed`, keyed by (task, epoch, purpose, extra). Purposes are a
closed table so that adding a new consumer never shifts the streams of
existing ones, and adding an epoch never perturbs earlier epochs.
"""
from __future__ import annotations

import numpy as np

_PURPOSES = {
    "model-init": 0,
    "head-init": 1,
    "shuffle": 2,
    "attack": 3,
    "attack-buffer": 4,
    "buffer-draw": 5,
    "augment": 6,
    "eval-attack": 7,
    "subsample": 8,
    "landscape": 9,
    "data": 10,
    "log-subsample": 11,
    "reservoir": 12,
    "fisher-attack": 13,
}


def _sequence(root: int, task: int, epoch: int, purpose: str, extra: int) -> np.random.SeedSequence:
    code = _PURPOSES[purpose]
    return np.random.SeedSequence(entropy=root, spawn_key=(task, epoch, code, extra))


def derive_rng(root: int, task: int = 0, epoch: int = 0, purpose: str = "model-init",
               extra: int = 0) -> np.random.Generator:
    """Generator for one (task, epoch, purpose, extra) slot."""
    return np.random.default_rng(_sequence(root, task, epoch, purpose, extra))


def derive_seed(root: int, task: int = 0, epoch: int = 0, purpose: str = "model-init",
                extra: int = 0) -> int:
    """Plain integer seed for consumers that hold their own generator."""
    return int(_sequence(root, task, epoch, purpose, extra).generate_state(1, dtype=np.uint64)[0])
