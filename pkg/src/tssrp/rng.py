"""Seed derivation.

All randomness of replication ``i`` under master seed ``m`` comes from
``SeedSequence(m, spawn_key=(i,))``, split into one child per purpose:

    layout    initial sensor layout
    tiebreak  uniform keys that order tied scores
    prior     uniforms mapped through the prior's inverse CDF
    data      observations
    scenario  per-replication scenario choices (e.g. which streams change)

A replication's draws therefore never depend on how replications are
batched or spread over workers, and each purpose can be replayed alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PURPOSES = ("layout", "tiebreak", "prior", "data", "scenario")


@dataclass
class Streams:
    layout: np.random.Generator
    tiebreak: np.random.Generator
    prior: np.random.Generator
    data: np.random.Generator
    scenario: np.random.Generator


def replication_streams(master_seed: int, rep: int) -> Streams:
    root = np.random.SeedSequence(int(master_seed), spawn_key=(int(rep),))
    children = root.spawn(len(PURPOSES))
    return Streams(*(np.random.Generator(np.random.PCG64(c)) for c in children))
