"""Spatial and sequence augmentations on (T, V, C) keypoint arrays, plus
multi-input feature construction.

Every transform is a pure function of its input array and an explicit
``numpy.random.Generator``. Outputs are float64 unless the transform only
permutes values (flips and keypoint exchange keep the input dtype).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .core import SkeletonGraph

BRANCHES = ("joint", "bone", "angle", "velocity")
ANGLE_EPS = 1e-6
# Mirroring snaps each frame's centroid to a 2^-32 grid. Coordinates that are
# integer multiples of 2^-33 (every float32 value of magnitude >= 2^-10, and 0)
# take an integer path: the centroid is rounded exactly and 2*c - x is formed
# without error, so mirroring twice restores the input bit for bit. The
# guarantee covers magnitudes below 2^18; other data takes a float path.
_CENTROID_GRID = 2.0**-32
_UNIT_EXP = 33
_EXACT_INPUT_LIMIT = 2.0**20  # keeps the mirror of in-range data on the integer path


def inverse_poses_pre(x: np.ndarray, graph: SkeletonGraph) -> np.ndarray:
    """Exchange the coordinates of every left/right keypoint pair in every frame."""
    return x[:, graph.flip_permutation(), :]


def _snap(c: np.ndarray) -> np.ndarray:
    return np.round(c / _CENTROID_GRID) * _CENTROID_GRID


def _div_round_half_even(n: np.ndarray, d: int) -> np.ndarray:
    q, r = np.divmod(n, d)
    up = (2 * r > d) | ((2 * r == d) & (q % 2 == 1))
    return q + up


def _mirror_exact(xs: np.ndarray) -> np.ndarray | None:
    """Integer-path reflection of a (T, V) array, or None when out of range."""
    v = xs.shape[1]
    if v >= 1024 or not np.all(np.abs(xs) < _EXACT_INPUT_LIMIT):
        return None
    q = np.ldexp(xs, _UNIT_EXP)
    if not np.array_equal(q, np.round(q)):
        return None
    qi = q.astype(np.int64)
    c = _div_round_half_even(qi.sum(axis=1), 2 * v)  # centroid in 2^-32 units
    yi = 4 * c[:, None] - qi
    if not np.all(np.abs(yi) < 2**53):
        return None
    return np.ldexp(yi.astype(np.float64), -_UNIT_EXP)


def mirror_poses(x: np.ndarray) -> np.ndarray:
    """Reflect x-coordinates through each frame's keypoint centroid; y is kept."""
    out = np.array(x, dtype=np.float64)
    xs = out[:, :, 0]
    exact = _mirror_exact(xs)
    if exact is None:
        exact = 2.0 * _snap(xs.mean(axis=1, keepdims=True)) - xs
    out[:, :, 0] = exact
    return out


def point_noise(x: np.ndarray, rng: np.random.Generator, std: float) -> np.ndarray:
    """Independent Gaussian noise on every (frame, keypoint, channel)."""
    if std < 0:
        raise ValueError("noise std must be >= 0")
    out = np.array(x, dtype=np.float64)
    if std == 0:
        return out
    return out + rng.normal(0.0, std, out.shape)


def joint_noise(x: np.ndarray, rng: np.random.Generator, std: float) -> np.ndarray:
    """One Gaussian offset per keypoint, shared by all frames."""
    if std < 0:
        raise ValueError("noise std must be >= 0")
    out = np.array(x, dtype=np.float64)
    if std == 0:
        return out
    return out + rng.normal(0.0, std, (1,) + out.shape[1:])


def random_move(x: np.ndarray, rng: np.random.Generator, amp: float, knots: int = 3) -> np.ndarray:
    """Smooth whole-sequence drift.

    Translation and scale are drawn at ``knots`` evenly spaced frames and
    linearly interpolated; scaling is about the sequence centroid.
    """
    if amp < 0:
        raise ValueError("move amplitude must be >= 0")
    out = np.array(x, dtype=np.float64)
    if amp == 0:
        return out
    t = out.shape[0]
    at = np.linspace(0, max(t - 1, 0), knots)
    shift = rng.uniform(-amp, amp, (knots, 2))
    scale = 1.0 + rng.uniform(-amp, amp, knots)
    frames = np.arange(t)
    shift_t = np.stack([np.interp(frames, at, shift[:, k]) for k in range(2)], axis=-1)
    scale_t = np.interp(frames, at, scale)
    xy = out[..., :2]
    center = xy.reshape(-1, 2).mean(axis=0)
    out[..., :2] = (xy - center) * scale_t[:, None, None] + center + shift_t[:, None, :]
    return out


def flip_sequence(x: np.ndarray) -> np.ndarray:
    """Reverse the frame order."""
    return x[::-1].copy()


def select_indices(t: int, length: int, rng: np.random.Generator, contiguous: bool = True) -> np.ndarray:
    if length < 1:
        raise ValueError("selection length must be >= 1")
    if t < length:
        return np.arange(length) % t
    if contiguous:
        start = int(rng.integers(0, t - length + 1))
        return np.arange(start, start + length)
    return np.sort(rng.choice(t, size=length, replace=False))


def random_select(x: np.ndarray, rng: np.random.Generator, length: int, contiguous: bool = True) -> np.ndarray:
    """``length`` frames in their original order; short sequences repeat cyclically."""
    return x[select_indices(x.shape[0], length, rng, contiguous)]


def multi_input(
    x: np.ndarray,
    graph: SkeletonGraph,
    branches: Sequence[str] = ("joint",),
    center: bool = False,
    keep_confidence: bool = False,
) -> np.ndarray:
    """Channel-concatenate joint, bone, angle and velocity features.

    ``center`` subtracts the layout's root keypoint from the joint branch.
    The confidence channel of C=3 input is dropped unless ``keep_confidence``.
    """
    if not branches:
        raise ValueError("at least one input branch is required")
    unknown = [b for b in branches if b not in BRANCHES]
    if unknown:
        raise ValueError(f"unknown input branch(es) {unknown}; expected a subset of {BRANCHES}")
    x = np.asarray(x, dtype=np.float64)
    coords = x if keep_confidence else x[..., :2]
    joint = coords - coords[:, graph.root : graph.root + 1] if center else coords
    bone = coords - coords[:, graph.parents()]
    feats = {"joint": lambda: joint, "bone": lambda: bone}
    feats["angle"] = lambda: bone / np.maximum(np.linalg.norm(bone, axis=-1, keepdims=True), ANGLE_EPS)

    def velocity():
        v = np.zeros_like(coords)
        v[:-1] = coords[1:] - coords[:-1]
        return v

    feats["velocity"] = velocity
    return np.concatenate([feats[b]() for b in branches], axis=-1)


# --- pipelines -------------------------------------------------------------

TRANSFORM_NAMES = (
    "inverse_poses_pre",
    "mirror_poses",
    "point_noise",
    "joint_noise",
    "random_move",
    "random_select",
    "flip_sequence",
)

_DEFAULTS: dict[str, dict[str, Any]] = {
    "inverse_poses_pre": {"p": 0.5},
    "mirror_poses": {"p": 0.5},
    "point_noise": {"p": 1.0, "std": 0.01},
    "joint_noise": {"p": 1.0, "std": 0.01},
    "random_move": {"p": 1.0, "amp": 0.1},
    "random_select": {"p": 1.0, "length": 30, "contiguous": True},
    "flip_sequence": {"p": 0.5},
}


@dataclass(frozen=True)
class TransformStep:
    name: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.name not in TRANSFORM_NAMES:
            raise ValueError(f"unknown transform {self.name!r}; known: {TRANSFORM_NAMES}")
        allowed = set(_DEFAULTS[self.name])
        extra = set(self.params) - allowed
        if extra:
            raise ValueError(f"{self.name}: unknown parameter(s) {sorted(extra)}; allowed {sorted(allowed)}")
        merged = {**_DEFAULTS[self.name], **self.params}
        if not 0.0 <= merged["p"] <= 1.0:
            raise ValueError(f"{self.name}: probability p must lie in [0, 1]")
        for key in ("std", "amp"):
            if key in merged and merged[key] < 0:
                raise ValueError(f"{self.name}: {key} must be >= 0")
        if self.name == "random_select" and merged["length"] < 1:
            raise ValueError("random_select: length must be >= 1")
        object.__setattr__(self, "params", merged)


@dataclass(frozen=True)
class TransformSpec:
    steps: tuple[TransformStep, ...] = ()
    branches: tuple[str, ...] = ("joint",)
    center: bool = False

    def __post_init__(self) -> None:
        multi_input_check = [b for b in self.branches if b not in BRANCHES]
        if not self.branches or multi_input_check:
            raise ValueError(f"branches must be a non-empty subset of {BRANCHES}")

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any]) -> "TransformSpec":
        steps = []
        for item in raw.get("steps", []):
            if isinstance(item, str):
                steps.append(TransformStep(item))
            else:
                (name, params), = item.items()
                steps.append(TransformStep(name, dict(params or {})))
        return cls(tuple(steps), tuple(raw.get("branches", ("joint",))), bool(raw.get("center", False)))

    def to_mapping(self) -> dict[str, Any]:
        return {
            "steps": [{s.name: dict(s.params)} for s in self.steps],
            "branches": list(self.branches),
            "center": self.center,
        }

    def without_augmentation(self) -> "TransformSpec":
        """Evaluation variant: no random steps, full-length sequences."""
        return TransformSpec((), self.branches, self.center)

    @property
    def channels_per_coordinate(self) -> int:
        return len(self.branches)


def _apply_step(step: TransformStep, x: np.ndarray, graph: SkeletonGraph, rng: np.random.Generator) -> np.ndarray:
    p = step.params
    if p["p"] < 1.0 and rng.random() >= p["p"]:
        return x
    name = step.name
    if name == "inverse_poses_pre":
        return inverse_poses_pre(x, graph)
    if name == "mirror_poses":
        return mirror_poses(x)
    if name == "point_noise":
        return point_noise(x, rng, p["std"])
    if name == "joint_noise":
        return joint_noise(x, rng, p["std"])
    if name == "random_move":
        return random_move(x, rng, p["amp"])
    if name == "random_select":
        return random_select(x, rng, p["length"], p["contiguous"])
    return flip_sequence(x)


class Pipeline:
    """Applies a TransformSpec's steps in order, then builds the model input."""

    def __init__(self, spec: TransformSpec, graph: SkeletonGraph):
        self.spec = spec
        self.graph = graph

    def augment(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        for step in self.spec.steps:
            x = _apply_step(step, x, self.graph, rng)
        return x

    def __call__(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = self.augment(x, rng)
        return multi_input(x, self.graph, self.spec.branches, center=self.spec.center)


def _preset_dir():
    return resources.files("posegait").joinpath("presets/transforms")


def preset_names() -> list[str]:
    return sorted(p.name[: -len(".yaml")] for p in _preset_dir().iterdir() if p.name.endswith(".yaml"))


def load_preset(name_or_path: str | Path) -> TransformSpec:
    path = Path(name_or_path)
    if path.suffix in (".yaml", ".yml") and path.is_file():
        text = path.read_text()
    else:
        res = _preset_dir().joinpath(f"{name_or_path}.yaml")
        if not res.is_file():
            raise ValueError(f"unknown transform preset {name_or_path!r}; known: {preset_names()}")
        text = res.read_text()
    raw = yaml.safe_load(text) or {}
    raw.pop("provenance", None)
    return TransformSpec.from_mapping(raw)
