"""Batch composition at a controlled synthetic:real ratio.

``ratio`` is the synthetic fraction of a batch: 0.75 means six synthetic
and two real patches in a batch of eight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .localizer import PatchPair

# (source patch, seed) -> synthetic patch
SyntheticGenerator = Callable[[PatchPair, int], PatchPair]


@dataclass(frozen=True)
class MixPlan:
    batch_size: int
    ratio: float
    n_synth: int
    n_real: int


def plan_batch(batch_size: int, ratio: float) -> MixPlan:
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio {ratio} outside [0, 1]")
    n_synth = int(math.floor(ratio * batch_size + 0.5))
    return MixPlan(batch_size, ratio, n_synth, batch_size - n_synth)


def _sub_seeds(seed: int) -> tuple:
    real, source, noise, order = np.random.SeedSequence(seed).spawn(4)
    return real, source, noise, order


def mix_batch(real_pool: Sequence[PatchPair], generator: Optional[SyntheticGenerator],
              plan: MixPlan, seed: int) -> list[PatchPair]:
    """Draw ``plan.n_real`` pool patches without replacement and
    ``plan.n_synth`` synthetic ones, then shuffle.

    Real members come from a permutation under their own sub-seed, so a
    different ratio only changes how many of them are taken. ``generator``
    is not called when the plan has no synthetic slots.
    """
    if plan.n_real > len(real_pool):
        raise ValueError(f"pool of {len(real_pool)} cannot supply {plan.n_real} real patches")
    if plan.n_synth and not real_pool:
        raise ValueError("synthetic patches need at least one source patch")
    if plan.n_synth and generator is None:
        raise ValueError("plan requests synthetic patches but no generator was given")
    real_ss, source_ss, noise_ss, order_ss = _sub_seeds(seed)

    perm = np.random.default_rng(real_ss).permutation(len(real_pool))
    batch = [real_pool[i] for i in perm[: plan.n_real]]

    if plan.n_synth:
        sources = np.random.default_rng(source_ss).integers(0, len(real_pool), size=plan.n_synth)
        noise_seeds = np.random.default_rng(noise_ss).integers(0, 2**63 - 1, size=plan.n_synth)
        for src, ns in zip(sources, noise_seeds):
            batch.append(generator(real_pool[int(src)], int(ns)))

    order = np.random.default_rng(order_ss).permutation(len(batch))
    return [batch[i] for i in order]
