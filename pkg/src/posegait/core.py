"""Domain types shared across the package: skeleton graphs, sequences,
batches and embedding sets."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml


class LayoutError(ValueError):
    """Raised for unknown or malformed keypoint layouts."""


@dataclass(frozen=True)
class SkeletonGraph:
    """Keypoint topology of one layout.

    ``bone_parent`` maps every non-root keypoint to its parent; the root is
    stored separately and is its own parent for bone computations.
    """

    layout_id: str
    num_keypoints: int
    edges: frozenset[tuple[int, int]]
    symmetric_pairs: tuple[tuple[int, int], ...]
    bone_parent: Mapping[int, int]
    root: int

    def __post_init__(self) -> None:
        problems = _graph_problems(self)
        if problems:
            raise LayoutError(f"invalid layout {self.layout_id!r}: " + "; ".join(problems))

    def adjacency(self) -> np.ndarray:
        """0/1 symmetric adjacency without self-loops."""
        a = np.zeros((self.num_keypoints, self.num_keypoints))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def flip_permutation(self) -> np.ndarray:
        """Index permutation exchanging every symmetric pair."""
        perm = np.arange(self.num_keypoints)
        for left, right in self.symmetric_pairs:
            perm[left], perm[right] = right, left
        return perm

    def parents(self) -> np.ndarray:
        """Parent index per keypoint, with the root mapped to itself."""
        out = np.arange(self.num_keypoints)
        for child, parent in self.bone_parent.items():
            out[child] = parent
        return out


def _graph_problems(g: SkeletonGraph) -> list[str]:
    problems = []
    n = g.num_keypoints
    if n < 1:
        problems.append("num_keypoints must be positive")
    for i, j in g.edges:
        if not (0 <= i < n and 0 <= j < n):
            problems.append(f"edge ({i}, {j}) out of range")
        elif i == j:
            problems.append(f"self-loop at {i}")
    seen: set[int] = set()
    for left, right in g.symmetric_pairs:
        for idx in (left, right):
            if not 0 <= idx < n:
                problems.append(f"symmetric index {idx} out of range")
            if idx in seen:
                problems.append(f"keypoint {idx} in more than one symmetric pair")
            seen.add(idx)
        if left == right:
            problems.append(f"keypoint {left} paired with itself")
    if not 0 <= g.root < n:
        problems.append(f"root {g.root} out of range")
    if g.root in g.bone_parent:
        problems.append("root must not have a parent")
    missing = set(range(n)) - set(g.bone_parent) - {g.root}
    if missing:
        problems.append(f"keypoints without parent: {sorted(missing)}")
    for child in g.bone_parent:
        node, steps = child, 0
        while node != g.root:
            node = g.bone_parent.get(node, g.root)
            steps += 1
            if steps > n:
                problems.append(f"bone cycle through {child}")
                break
    return problems


def _graph_from_mapping(layout_id: str, raw: Mapping[str, Any]) -> SkeletonGraph:
    try:
        edges = frozenset(tuple(sorted((int(i), int(j)))) for i, j in raw["edges"])
        pairs = tuple((int(l), int(r)) for l, r in raw.get("symmetric_pairs", []))
        parent = {int(k): int(v) for k, v in raw["bone_parent"].items()}
        return SkeletonGraph(
            layout_id=layout_id,
            num_keypoints=int(raw["num_keypoints"]),
            edges=edges,
            symmetric_pairs=pairs,
            bone_parent=parent,
            root=int(raw["root"]),
        )
    except (KeyError, TypeError) as exc:
        raise LayoutError(f"malformed layout {layout_id!r}: {exc}") from exc


_LAYOUTS: dict[str, dict[str, Any]] = {}


def load_layouts(path: str | Path) -> list[str]:
    """Register every layout in a YAML file; returns the registered ids.

    Existing ids are overridden, which is how a custom keypoint numbering
    replaces a built-in one.
    """
    raw = yaml.safe_load(Path(path).read_text())
    return _register(raw)


def _register(raw: Mapping[str, Any]) -> list[str]:
    for layout_id, entry in raw.items():
        _graph_from_mapping(layout_id, entry)  # validate before registering
        _LAYOUTS[layout_id] = copy.deepcopy(dict(entry))
    return list(raw)


def _load_builtin() -> None:
    text = resources.files("posegait").joinpath("data/layouts.yaml").read_text()
    _register(yaml.safe_load(text))


_load_builtin()


def registered_layouts() -> list[str]:
    return sorted(_LAYOUTS)


def build_graph(layout_id: str) -> SkeletonGraph:
    if layout_id not in _LAYOUTS:
        raise LayoutError(f"unknown layout {layout_id!r}; known: {registered_layouts()}")
    return _graph_from_mapping(layout_id, _LAYOUTS[layout_id])


def normalized_adjacency(graph: SkeletonGraph) -> np.ndarray:
    """Symmetric normalization with self-loops: D^-1/2 (A + I) D^-1/2."""
    a = graph.adjacency() + np.eye(graph.num_keypoints)
    d = a.sum(axis=1)
    return a / np.sqrt(d[:, None] * d[None, :])


@dataclass(frozen=True, eq=False)
class SkeletonSequence:
    """One gait sample: ``data`` has shape (T, V, C)."""

    data: np.ndarray
    subject_id: str = ""
    condition: str = ""
    view: str = ""
    layout_id: str = "coco17"

    def __post_init__(self) -> None:
        arr = np.array(self.data, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    def with_data(self, data: np.ndarray) -> "SkeletonSequence":
        return SkeletonSequence(data, self.subject_id, self.condition, self.view, self.layout_id)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SkeletonSequence):
            return NotImplemented
        return (
            self.meta() == other.meta()
            and self.data.shape == other.data.shape
            and self.data.dtype == other.data.dtype
            and bool(np.array_equal(self.data, other.data))
        )

    def meta(self) -> tuple[str, str, str, str]:
        return (self.subject_id, self.condition, self.view, self.layout_id)


def validate_sequence(seq: SkeletonSequence, graph: SkeletonGraph) -> list[str]:
    """Return every violated sequence invariant; an empty list means valid."""
    report = []
    data = seq.data
    if data.ndim != 3:
        return [f"expected a T x V x C array, got {data.ndim} dimensions"]
    t, v, c = data.shape
    if t < 1:
        report.append("sequence has no frames")
    if v != graph.num_keypoints:
        report.append(
            f"keypoint count mismatch: {v} in data, {graph.num_keypoints} in layout {graph.layout_id}"
        )
    if c not in (2, 3):
        report.append(f"channel count {c} not in (2, 3)")
    if seq.layout_id != graph.layout_id:
        report.append(f"layout mismatch: sequence {seq.layout_id}, graph {graph.layout_id}")
    if not np.issubdtype(data.dtype, np.number):
        report.append(f"non-numeric dtype {data.dtype}")
        return report
    bad = np.argwhere(~np.isfinite(data))
    for idx in bad[:10]:
        report.append("non-finite value at ({}, {}, {})".format(*idx))
    if len(bad) > 10:
        report.append(f"... {len(bad) - 10} more non-finite values")
    return report


@dataclass(frozen=True)
class SampleBatch:
    """Sequences selected by a sampler, in batch order.

    ``indices`` point into the dataset index the batch was drawn from.
    """

    sequences: list[np.ndarray]
    labels: np.ndarray
    views: list[str]
    conditions: list[str] = field(default_factory=list)
    indices: list[int] = field(default_factory=list)
    spec: Any = None

    def __post_init__(self) -> None:
        n = len(self.sequences)
        if len(self.labels) != n or len(self.views) != n:
            raise ValueError("sequences, labels and views must have equal length")
        if self.conditions and len(self.conditions) != n:
            raise ValueError("conditions must match the number of sequences")

    def __len__(self) -> int:
        return len(self.sequences)

    def stacked(self) -> np.ndarray:
        """(N, T, V, C) array; requires a uniform sequence shape."""
        shapes = {s.shape for s in self.sequences}
        if len(shapes) != 1:
            raise ValueError(f"sequences have differing shapes: {sorted(shapes)}")
        return np.stack(self.sequences)


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    vectors: np.ndarray
    labels: np.ndarray
    views: Sequence[str]
    conditions: Sequence[str]

    def __post_init__(self) -> None:
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2 or vec.shape[0] < 1 or vec.shape[1] < 1:
            raise ValueError(f"embeddings must be N x d with N, d >= 1, got {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("embeddings contain non-finite values")
        n = vec.shape[0]
        if not (len(self.labels) == len(self.views) == len(self.conditions) == n):
            raise ValueError("labels, views and conditions must have one entry per vector")
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "labels", np.asarray(self.labels))
        object.__setattr__(self, "views", list(self.views))
        object.__setattr__(self, "conditions", list(self.conditions))

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, mask: np.ndarray | Sequence[bool]) -> "EmbeddingSet":
        idx = np.flatnonzero(np.asarray(mask, dtype=bool))
        return EmbeddingSet(
            self.vectors[idx],
            self.labels[idx],
            [self.views[i] for i in idx],
            [self.conditions[i] for i in idx],
        )
