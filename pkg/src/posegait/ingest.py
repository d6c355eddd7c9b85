"""On-disk sequence format, dataset indexing and keypoint reordering.

PSG1 layout (all little-endian)::

    bytes 0..3    b"PSG1"
    bytes 4..15   uint32 T, V, C
    bytes 16..    T*V*C float32 values, t-major, then v, then c

Sequence metadata (subject, condition, view) lives in the index file, not in
the PSG1 file itself.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .core import SkeletonSequence, build_graph, registered_layouts
from .protocols import ProtocolSpec, get_protocol, protocol_from_mapping

log = logging.getLogger(__name__)

MAGIC = b"PSG1"
_HEADER = struct.Struct("<4sIII")
INDEX_NAME = "index.tsv"
INDEX_VERSION = "posegait-index v1"
SUFFIX = ".psg1"


class FormatError(ValueError):
    pass


def write_sequence(seq: SkeletonSequence | np.ndarray, path: str | Path) -> None:
    data = seq.data if isinstance(seq, SkeletonSequence) else np.asarray(seq)
    if data.ndim != 3:
        raise FormatError(f"expected T x V x C data, got shape {data.shape}")
    t, v, c = data.shape
    payload = np.ascontiguousarray(data, dtype="<f4")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, t, v, c))
        fh.write(payload.tobytes())


def read_header(path: str | Path) -> tuple[int, int, int]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    return _parse_header(head, path)


def _parse_header(head: bytes, path) -> tuple[int, int, int]:
    if len(head) < 4 or head[:4] != MAGIC:
        raise FormatError(f"{path}: not a PSG1 file")
    if len(head) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, t, v, c = _HEADER.unpack(head[: _HEADER.size])
    return t, v, c


def read_array(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    t, v, c = _parse_header(raw[: _HEADER.size], path)
    n = t * v * c
    body = raw[_HEADER.size :]
    if len(body) < 4 * n:
        raise FormatError(f"{path}: short read, expected {n} values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4", count=n).reshape(t, v, c).astype(np.float32)


def read_sequence(
    path: str | Path,
    subject_id: str = "",
    condition: str = "",
    view: str = "",
    layout_id: str | None = None,
) -> SkeletonSequence:
    data = read_array(path)
    if layout_id is None:
        layout_id = layout_for_keypoints(data.shape[1])
    return SkeletonSequence(data, subject_id, condition, view, layout_id)


def layout_for_keypoints(v: int) -> str:
    matches = [lid for lid in registered_layouts() if build_graph(lid).num_keypoints == v]
    if len(matches) != 1:
        raise FormatError(f"cannot infer layout for {v} keypoints (candidates: {matches})")
    return matches[0]


def reorder_keypoints(seq: SkeletonSequence, mapping: Sequence[int]) -> SkeletonSequence:
    """Output keypoint ``v`` is input keypoint ``mapping[v]``."""
    perm = np.asarray(mapping)
    v = seq.data.shape[1]
    if perm.shape != (v,) or not np.array_equal(np.sort(perm), np.arange(v)):
        raise ValueError(f"mapping is not a permutation of range({v})")
    return seq.with_data(seq.data[:, perm, :])


@dataclass(frozen=True)
class IndexEntry:
    subject: str
    condition: str
    view: str
    path: str  # relative to the index root
    frames: int


@dataclass
class DatasetIndex:
    root: Path
    entries: list[IndexEntry]
    layout_id: str
    protocol: ProtocolSpec
    train: list[int] = field(default_factory=list)
    gallery: list[int] = field(default_factory=list)
    probe: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("duplicate file paths in index")
        if not (self.train or self.gallery or self.probe):
            self.assign_split()

    def assign_split(self) -> None:
        p = self.protocol
        train_subj, test_subj = p.split_subjects([e.subject for e in self.entries])
        train_subj, test_subj = set(train_subj), set(test_subj)
        self.train, self.gallery, self.probe = [], [], []
        for i, e in enumerate(self.entries):
            if e.subject in train_subj and p.is_train(e.condition):
                self.train.append(i)
            if e.subject in test_subj:
                if p.is_gallery(e.condition):
                    self.gallery.append(i)
                elif p.is_probe(e.condition):
                    self.probe.append(i)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[IndexEntry]:
        return iter(self.entries)

    def subjects(self, split: str | None = None) -> list[str]:
        idx = range(len(self.entries)) if split is None else getattr(self, split)
        return sorted({self.entries[i].subject for i in idx})

    def label_map(self, split: str = "train") -> dict[str, int]:
        return {s: i for i, s in enumerate(self.subjects(split))}

    def abspath(self, i: int) -> Path:
        return self.root / self.entries[i].path

    def load(self, i: int) -> SkeletonSequence:
        e = self.entries[i]
        return read_sequence(self.abspath(i), e.subject, e.condition, e.view, self.layout_id)


def build_index(
    root_dir: str | Path,
    protocol: str | ProtocolSpec = "synthetic",
    layout_id: str | None = None,
) -> DatasetIndex:
    """Index a ``root/subject/condition/view/*.psg1`` tree, sorted lexicographically."""
    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    spec = get_protocol(protocol) if isinstance(protocol, str) else protocol
    files = sorted(p for p in root.glob(f"*/*/*/*{SUFFIX}") if p.is_file())
    if not files:
        raise FileNotFoundError(f"no sequences found under {root}")
    entries = []
    num_keypoints = set()
    for p in files:
        rel = p.relative_to(root)
        subject, condition, view = rel.parts[:3]
        t, v, _ = read_header(p)
        num_keypoints.add(v)
        entries.append(IndexEntry(subject, condition, view, rel.as_posix(), t))
    if len(num_keypoints) != 1:
        raise FormatError(f"mixed keypoint counts in dataset: {sorted(num_keypoints)}")
    if layout_id is None:
        layout_id = layout_for_keypoints(num_keypoints.pop())
    elif build_graph(layout_id).num_keypoints not in num_keypoints:
        raise FormatError(f"layout {layout_id} does not match keypoint count {num_keypoints}")
    return DatasetIndex(root, entries, layout_id, spec)


def write_index(index: DatasetIndex, path: str | Path | None = None) -> Path:
    path = Path(path) if path is not None else index.root / INDEX_NAME
    lines = [
        f"# {INDEX_VERSION}",
        f"# layout={index.layout_id}",
        f"# protocol={index.protocol.dataset_id}",
        "subject\tcondition\tview\tpath\tframes",
    ]
    lines += [f"{e.subject}\t{e.condition}\t{e.view}\t{e.path}\t{e.frames}" for e in index.entries]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_index(path: str | Path, protocol: str | ProtocolSpec | dict | None = None) -> DatasetIndex:
    """Load an index file; ``protocol`` overrides the one recorded in the file."""
    path = Path(path)
    if path.is_dir():
        path = path / INDEX_NAME
    meta: dict[str, str] = {}
    entries = []
    lines = path.read_text().splitlines()
    if not lines or lines[0] != f"# {INDEX_VERSION}":
        raise FormatError(f"{path}: not a {INDEX_VERSION} file")
    for line in lines[1:]:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
        elif line.startswith("subject\t") or not line.strip():
            continue
        else:
            subject, condition, view, rel, frames = line.split("\t")
            entries.append(IndexEntry(subject, condition, view, rel, int(frames)))
    if protocol is None:
        protocol = meta.get("protocol", "synthetic")
    if isinstance(protocol, dict):
        protocol = protocol_from_mapping(protocol)
    elif isinstance(protocol, str):
        protocol = get_protocol(protocol)
    index = DatasetIndex(path.parent, entries, meta["layout"], protocol)
    missing = [e.path for e in entries if not (index.root / e.path).is_file()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} indexed files missing, e.g. {missing[0]}")
    return index


class SequenceCache:
    """Loads sequences from an index once and keeps them in memory."""

    def __init__(self, index: DatasetIndex):
        self.index = index
        self._cache: dict[int, SkeletonSequence] = {}

    def __call__(self, i: int) -> SkeletonSequence:
        seq = self._cache.get(i)
        if seq is None:
            seq = self._cache[i] = self.index.load(i)
        return seq
