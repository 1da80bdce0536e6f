import dataclasses

import numpy as np
import pytest

from conftest import random_patches
from pgvae.injection import mix_batch, plan_batch

RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)


def fake_generator(calls=None):
    def gen(src, seed):
        if calls is not None:
            calls.append((src, seed))
        return dataclasses.replace(src, image=np.clip(src.image * 0.5, -1, 1), provenance="synthetic")
    return gen


def test_plan_examples():
    p = plan_batch(8, 0.75)
    assert (p.n_synth, p.n_real) == (6, 2)
    assert plan_batch(10, 0.25).n_synth == 3  # 2.5 rounds half up
    assert plan_batch(8, 0.0).n_synth == 0 and plan_batch(8, 1.0).n_real == 0
    with pytest.raises(ValueError):
        plan_batch(0, 0.5)
    with pytest.raises(ValueError):
        plan_batch(8, 1.5)


@pytest.mark.parametrize("r", RATIOS)
def test_provenance_counts_fuzz(r):
    pool = random_patches(64, seed=1)
    for b in range(1, 65):
        plan = plan_batch(b, r)
        batch = mix_batch(pool, fake_generator(), plan, seed=b)
        assert len(batch) == b
        n_synth = sum(p.provenance == "synthetic" for p in batch)
        assert n_synth == int(np.floor(r * b + 0.5)) == plan.n_synth
        real = [id(p) for p in batch if p.provenance == "real"]
        assert len(set(real)) == len(real)


def test_real_members_invariant_across_ratio():
    pool = random_patches(32, seed=2)
    full = [id(p) for p in mix_batch(pool, None, plan_batch(8, 0.0), seed=9)]
    for r in RATIOS[1:]:
        batch = mix_batch(pool, fake_generator(), plan_batch(8, r), seed=9)
        real = {id(p) for p in batch if p.provenance == "real"}
        assert real <= set(full)


def test_deterministic_for_seed():
    pool = random_patches(20, seed=3)
    a = mix_batch(pool, fake_generator(), plan_batch(8, 0.5), seed=4)
    b = mix_batch(pool, fake_generator(), plan_batch(8, 0.5), seed=4)
    assert [p.image.tobytes() for p in a] == [p.image.tobytes() for p in b]


def test_generator_not_called_at_zero_ratio():
    calls = []
    pool = random_patches(10)
    mix_batch(pool, fake_generator(calls), plan_batch(8, 0.0), seed=0)
    assert calls == []
    mix_batch(pool, fake_generator(calls), plan_batch(8, 0.5), seed=0)
    assert len(calls) == 4


def test_errors():
    pool = random_patches(3)
    with pytest.raises(ValueError):
        mix_batch(pool, None, plan_batch(8, 0.0), seed=0)
    with pytest.raises(ValueError):
        mix_batch(pool, None, plan_batch(2, 0.5), seed=0)
    with pytest.raises(ValueError):
        mix_batch([], fake_generator(), plan_batch(2, 1.0), seed=0)
