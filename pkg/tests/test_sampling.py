from collections import Counter

import numpy as np
import pytest
from helpers import fake_index

from posegait.sampling import (
    SamplerError,
    SamplerSpec,
    random_triplet_batch,
    select,
    stream,
    triplet_batch,
)

@pytest.fixture(scope="module")
def thousand():
    return fake_index(50, 20)


@pytest.fixture(scope="module")
def casiab_shaped():
    return fake_index(74, 110)


def subjects_of(index, sel):
    return [index.entries[i].subject for i in sel]


def test_random_sampler(thousand):
    spec = SamplerSpec("random", batch_size=128)
    sel = select(thousand, spec, np.random.default_rng(0))
    assert len(sel) == 128 and len(set(sel)) == 128
    assert len(select(thousand, SamplerSpec("random", batch_size=1), np.random.default_rng(0))) == 1
    a = select(thousand, spec, np.random.default_rng(7))
    b = select(thousand, spec, np.random.default_rng(7))
    assert a == b


def test_random_sampler_too_large(thousand):
    with pytest.raises(SamplerError, match="exceeds training set size"):
        select(thousand, SamplerSpec("random", batch_size=1001), np.random.default_rng(0))


@pytest.mark.parametrize("P,K", [(4, 64), (2, 2)])
def test_triplet_sampler_composition(casiab_shaped, P, K):
    sel = select(casiab_shaped, SamplerSpec("triplet", P=P, K=K), np.random.default_rng(1))
    assert len(sel) == P * K
    counts = Counter(subjects_of(casiab_shaped, sel))
    assert len(counts) == P and set(counts.values()) == {K}
    # subjects with at least K sequences are drawn without replacement
    assert len(set(sel)) == P * K


def test_triplet_sampler_256_by_2():
    index = fake_index(300, 3)
    spec = SamplerSpec("triplet", P=256, K=2)
    assert spec.batch_size == 512
    sel = select(index, spec, np.random.default_rng(2))
    assert len(sel) == 512 and len(set(subjects_of(index, sel))) == 256


def test_triplet_sampler_small_subjects_use_replacement():
    index = fake_index(3, 2)
    sel = select(index, SamplerSpec("triplet", P=2, K=5), np.random.default_rng(0))
    counts = Counter(subjects_of(index, sel))
    assert sorted(counts.values()) == [5, 5]


def test_triplet_sampler_needs_enough_subjects():
    with pytest.raises(SamplerError, match="exceeds the 3 training subjects"):
        select(fake_index(3, 4), SamplerSpec("triplet", P=4, K=2), np.random.default_rng(0))


def test_random_triplet_arithmetic():
    spec = SamplerSpec("random_triplet", batch_size=128, P=6)
    assert (spec.K, spec.c, spec.P * spec.K + spec.c) == (21, 2, 128)
    spec = SamplerSpec("random_triplet", batch_size=768, P=74)
    assert (spec.K, spec.c) == (10, 28)
    with pytest.raises(SamplerError, match="K >= 2"):
        SamplerSpec("random_triplet", batch_size=4, P=4)


def test_random_triplet_batch(casiab_shaped):
    spec = SamplerSpec("random_triplet", batch_size=768, P=74)
    sel = select(casiab_shaped, spec, np.random.default_rng(3))
    assert len(sel) == 768 and len(set(sel)) == 768
    counts = Counter(subjects_of(casiab_shaped, sel[: spec.P * spec.K]))
    assert len(counts) == 74 and set(counts.values()) == {10}


def test_constraint_messages():
    with pytest.raises(SamplerError, match=r"P >= 2 \(positive/negative pair constraint\)"):
        SamplerSpec("triplet", P=1, K=4)
    with pytest.raises(SamplerError, match="K >= 2"):
        SamplerSpec("triplet", P=4, K=1)
    with pytest.raises(SamplerError, match="!= P\\*K"):
        SamplerSpec("triplet", batch_size=10, P=2, K=4)
    with pytest.raises(SamplerError, match="sampler.kind"):
        SamplerSpec("balanced", batch_size=4)


def test_stream_is_deterministic(thousand):
    spec = SamplerSpec("triplet", P=4, K=3, seed=11)
    a, b = stream(thousand, spec), stream(thousand, spec)
    for _ in range(5):
        assert next(a) == next(b)


def test_batch_builders(small_dataset):
    rng = np.random.default_rng(0)
    batch = triplet_batch(small_dataset, SamplerSpec("triplet", P=2, K=2), rng)
    assert len(batch) == 4 and batch.stacked().shape == (4, 24, 17, 2)
    assert len(set(batch.labels.tolist())) == 2
    with pytest.raises(SamplerError, match="expected a 'random_triplet'"):
        random_triplet_batch(small_dataset, SamplerSpec("triplet", P=2, K=2), rng)
    loaded = []
    batch = random_triplet_batch(
        small_dataset,
        SamplerSpec("random_triplet", batch_size=5, P=2),
        rng,
        loader=lambda i: loaded.append(i) or small_dataset.load(i),
    )
    assert len(batch) == 5 and loaded == batch.indices
