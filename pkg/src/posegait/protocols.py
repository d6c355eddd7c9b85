"""Train/gallery/probe protocols for each benchmark.

Gallery and probe sets are chosen by condition patterns (``fnmatch`` style).
The CASIA-B and OUMVLP splits below follow community convention; they are
defaults, and any protocol can be replaced from a config file.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fnmatch import fnmatch
from typing import Any, Mapping, Sequence


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolSpec:
    dataset_id: str
    # number of (sorted) subjects used for training; None uses all subjects
    train_subjects: int | None = None
    # evaluate on the remaining subjects ("rest") or on all of them
    test_subjects: str = "rest"
    train_conditions: tuple[str, ...] = ("*",)
    gallery_conditions: tuple[str, ...] = ("*",)
    probe_conditions: tuple[str, ...] = ("*",)
    exclude_identical_view: bool = True
    ranks: tuple[int, ...] = (1, 5, 10)
    # condition groups reported separately (CASIA-B NM/BG/CL)
    condition_groups: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.test_subjects not in ("rest", "all"):
            raise ProtocolError(f"test_subjects must be 'rest' or 'all', got {self.test_subjects!r}")
        if self.train_subjects is not None and self.train_subjects < 0:
            raise ProtocolError("train_subjects must be non-negative")
        if not self.ranks or any(k < 1 for k in self.ranks):
            raise ProtocolError("ranks must be positive integers")

    def split_subjects(self, subjects: Sequence[str]) -> tuple[list[str], list[str]]:
        ordered = sorted(set(subjects))
        n = len(ordered) if self.train_subjects is None else self.train_subjects
        train = ordered[:n]
        test = ordered if self.test_subjects == "all" else ordered[n:]
        return train, test

    def is_train(self, condition: str) -> bool:
        return _matches(condition, self.train_conditions)

    def is_gallery(self, condition: str) -> bool:
        return _matches(condition, self.gallery_conditions)

    def is_probe(self, condition: str) -> bool:
        return _matches(condition, self.probe_conditions)

    def group_of(self, condition: str) -> str | None:
        for name, patterns in self.condition_groups.items():
            if _matches(condition, patterns):
                return name
        return None


def _matches(value: str, patterns: Sequence[str]) -> bool:
    return any(fnmatch(value, p) for p in patterns)


PROTOCOLS: dict[str, ProtocolSpec] = {
    "casiab": ProtocolSpec(
        dataset_id="casiab",
        train_subjects=74,
        gallery_conditions=("nm-01", "nm-02", "nm-03", "nm-04"),
        probe_conditions=("nm-05", "nm-06", "bg-*", "cl-*"),
        condition_groups={"NM": ("nm-*",), "BG": ("bg-*",), "CL": ("cl-*",)},
    ),
    "oumvlp": ProtocolSpec(
        dataset_id="oumvlp",
        train_subjects=5153,
        gallery_conditions=("00",),
        probe_conditions=("01",),
    ),
    # probe and gallery sequence ids as distributed with the benchmark
    "grew": ProtocolSpec(
        dataset_id="grew",
        train_subjects=20000,
        gallery_conditions=("01", "02"),
        probe_conditions=("03", "04"),
        exclude_identical_view=False,
    ),
    "gait3d": ProtocolSpec(
        dataset_id="gait3d",
        train_subjects=3000,
        gallery_conditions=("gallery*",),
        probe_conditions=("probe*",),
        exclude_identical_view=False,
    ),
    # closed-set sanity protocol for generated data: every subject is
    # trained on; later sequences are held out as probes
    "synthetic": ProtocolSpec(
        dataset_id="synthetic",
        train_subjects=None,
        test_subjects="all",
        train_conditions=("nm-01", "nm-02", "nm-03", "nm-04"),
        gallery_conditions=("nm-01", "nm-02", "nm-03", "nm-04"),
        probe_conditions=("nm-05", "nm-06"),
        condition_groups={"NM": ("nm-*",), "BG": ("bg-*",), "CL": ("cl-*",)},
    ),
    # open-set protocol for generated data: first half of subjects trains
    "synthetic_open": ProtocolSpec(
        dataset_id="synthetic_open",
        train_subjects=4,
        gallery_conditions=("nm-01", "nm-02", "nm-03", "nm-04"),
        probe_conditions=("nm-05", "nm-06"),
    ),
}


def get_protocol(protocol_id: str) -> ProtocolSpec:
    try:
        return PROTOCOLS[protocol_id]
    except KeyError:
        raise ProtocolError(f"unknown protocol {protocol_id!r}; known: {sorted(PROTOCOLS)}") from None


def protocol_from_mapping(raw: Mapping[str, Any]) -> ProtocolSpec:
    """Build a protocol from config; ``base`` names a registered protocol to override."""
    raw = dict(raw)
    base = raw.pop("base", None)
    tuples = ("train_conditions", "gallery_conditions", "probe_conditions", "ranks")
    for key in tuples:
        if key in raw:
            raw[key] = tuple(raw[key])
    if "condition_groups" in raw:
        raw["condition_groups"] = {k: tuple(v) for k, v in raw["condition_groups"].items()}
    try:
        if base is not None:
            return replace(get_protocol(base), **raw)
        return ProtocolSpec(**raw)
    except TypeError as exc:
        raise ProtocolError(str(exc)) from exc
