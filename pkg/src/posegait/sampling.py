"""Batch samplers: uniform random, (P, K) triplet, and random-triplet.

The random-triplet sampler takes ``batch_size`` and ``P`` and derives
``K = batch_size // P`` and ``c = batch_size % P``: P subjects contribute K
sequences each and c further sequences are drawn from the rest of the
training set. Requiring ``P >= 2`` and ``K >= 2`` guarantees that every batch
holds both positive and negative pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .core import SampleBatch, SkeletonSequence
from .ingest import DatasetIndex

KINDS = ("random", "triplet", "random_triplet")


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "triplet"
    batch_size: int | None = None
    P: int | None = None
    K: int | None = None
    seed: int = 0
    c: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        problems = self.problems()
        if problems:
            raise SamplerError("; ".join(problems))
        if self.kind == "triplet":
            object.__setattr__(self, "batch_size", self.P * self.K)
        elif self.kind == "random_triplet":
            object.__setattr__(self, "K", self.batch_size // self.P)
            object.__setattr__(self, "c", self.batch_size % self.P)

    def problems(self) -> list[str]:
        """All constraint violations, worded for config error messages."""
        out = []
        if self.kind not in KINDS:
            return [f"sampler.kind must be one of {KINDS}, got {self.kind!r}"]
        if self.kind == "random":
            if self.batch_size is None or self.batch_size < 1:
                out.append("sampler.batch_size must be >= 1 for the random sampler")
        elif self.kind == "triplet":
            if self.P is None or self.P < 2:
                out.append(f"sampler.P must satisfy P >= 2 (positive/negative pair constraint), got {self.P}")
            if self.K is None or self.K < 2:
                out.append(f"sampler.K must satisfy K >= 2 (positive/negative pair constraint), got {self.K}")
            if (
                self.batch_size is not None
                and self.P is not None
                and self.K is not None
                and self.batch_size != self.P * self.K
            ):
                out.append(f"sampler.batch_size {self.batch_size} != P*K = {self.P * self.K}")
        else:
            if self.batch_size is None or self.batch_size < 1:
                out.append("sampler.batch_size must be >= 1")
            if self.P is None or self.P < 2:
                out.append(f"sampler.P must satisfy P >= 2 (positive/negative pair constraint), got {self.P}")
            elif self.batch_size is not None:
                k = self.batch_size // self.P
                if k < 2:
                    out.append(
                        f"derived K = batch_size // P = {k} violates K >= 2 "
                        "(positive/negative pair constraint; P*K + c = batch_size)"
                    )
                if self.K is not None and self.K != k:
                    out.append(f"sampler.K {self.K} inconsistent with batch_size // P = {k}")
        return out


Loader = Callable[[int], SkeletonSequence]


def _select_random(index: DatasetIndex, spec: SamplerSpec, rng: np.random.Generator) -> list[int]:
    pool = index.train
    if spec.batch_size > len(pool):
        raise SamplerError(f"batch_size {spec.batch_size} exceeds training set size {len(pool)}")
    pick = rng.choice(len(pool), size=spec.batch_size, replace=False)
    return [pool[i] for i in pick]


def _by_subject(index: DatasetIndex) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i in index.train:
        groups.setdefault(index.entries[i].subject, []).append(i)
    return groups


def _select_pk(groups: dict[str, list[int]], P: int, K: int, rng: np.random.Generator) -> list[int]:
    subjects = sorted(groups)
    if len(subjects) < P:
        raise SamplerError(f"P = {P} exceeds the {len(subjects)} training subjects")
    chosen = rng.choice(len(subjects), size=P, replace=False)
    out = []
    for s in chosen:
        items = groups[subjects[s]]
        # with replacement only when the subject is too small for K draws
        pick = rng.choice(len(items), size=K, replace=len(items) < K)
        out.extend(items[j] for j in pick)
    return out


def _select_triplet(index: DatasetIndex, spec: SamplerSpec, rng: np.random.Generator) -> list[int]:
    return _select_pk(_by_subject(index), spec.P, spec.K, rng)


def _select_random_triplet(index: DatasetIndex, spec: SamplerSpec, rng: np.random.Generator) -> list[int]:
    chosen = _select_pk(_by_subject(index), spec.P, spec.K, rng)
    if spec.c:
        taken = set(chosen)
        rest = [i for i in index.train if i not in taken]
        if len(rest) < spec.c:
            raise SamplerError(f"only {len(rest)} unselected sequences left for c = {spec.c} extras")
        pick = rng.choice(len(rest), size=spec.c, replace=False)
        chosen.extend(rest[j] for j in pick)
    return chosen


_SELECTORS = {
    "random": _select_random,
    "triplet": _select_triplet,
    "random_triplet": _select_random_triplet,
}


def select(index: DatasetIndex, spec: SamplerSpec, rng: np.random.Generator) -> list[int]:
    """Entry indices of one batch, in batch order."""
    return _SELECTORS[spec.kind](index, spec, rng)


def make_batch(
    index: DatasetIndex,
    selection: list[int],
    spec: SamplerSpec | None = None,
    loader: Loader | None = None,
) -> SampleBatch:
    loader = loader or index.load
    labels = index.label_map("train")
    seqs = [loader(i) for i in selection]
    return SampleBatch(
        sequences=[s.data for s in seqs],
        labels=np.array([labels[index.entries[i].subject] for i in selection], dtype=np.int64),
        views=[index.entries[i].view for i in selection],
        conditions=[index.entries[i].condition for i in selection],
        indices=list(selection),
        spec=spec,
    )


def _checked(spec: SamplerSpec, kind: str) -> None:
    if spec.kind != kind:
        raise SamplerError(f"expected a {kind!r} sampler spec, got {spec.kind!r}")


def random_batch(index, spec, rng, loader=None) -> SampleBatch:
    _checked(spec, "random")
    return make_batch(index, _select_random(index, spec, rng), spec, loader)


def triplet_batch(index, spec, rng, loader=None) -> SampleBatch:
    _checked(spec, "triplet")
    return make_batch(index, _select_triplet(index, spec, rng), spec, loader)


def random_triplet_batch(index, spec, rng, loader=None) -> SampleBatch:
    _checked(spec, "random_triplet")
    return make_batch(index, _select_random_triplet(index, spec, rng), spec, loader)


def stream(index: DatasetIndex, spec: SamplerSpec, rng: np.random.Generator | None = None) -> Iterator[list[int]]:
    """Endless stream of batch selections; batch ``n`` depends only on (index, spec, seed, n)."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    while True:
        yield select(index, spec, rng)
