"""Deterministic RNG sub-streams.

Every random draw in the package flows from one user-facing seed through a
named sub-stream, so changing e.g. the shuffle order never perturbs the
synthetic data or the parameter init.
"""
from __future__ import annotations

import numpy as np

_STREAMS = {"data": 0, "init": 1, "shuffle": 2}


def substream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for one named stream of ``seed``."""
    if name not in _STREAMS:
        raise KeyError(f"unknown RNG stream {name!r}; expected one of {sorted(_STREAMS)}")
    return np.random.default_rng([_STREAMS[name], int(seed)])
