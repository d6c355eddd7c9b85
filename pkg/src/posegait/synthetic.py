"""Synthetic walking skeletons for desk-scale experiments.

Each subject gets its own body proportions, cadence and swing amplitudes.
A 3-D stick figure is animated with sinusoidal joint angles and projected
orthographically for each camera view, so identity cues survive the change
of viewpoint only partially (vertical proportions, cadence), much like real
cross-view gait data.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import SkeletonSequence, build_graph
from .ingest import SUFFIX, DatasetIndex, build_index, write_index, write_sequence

DEFAULT_CONDITIONS = ("nm-01", "nm-02", "nm-03", "nm-04", "nm-05", "nm-06")

# pose18 keypoint -> coco17 keypoint (index 1, the neck, is synthesized)
_POSE18_FROM_COCO = [0, -1, 6, 8, 10, 5, 7, 9, 12, 14, 16, 11, 13, 15, 2, 1, 4, 3]


@dataclass(frozen=True)
class Gait:
    height: float
    thigh: float
    shin: float
    upper_arm: float
    forearm: float
    shoulder_half: float
    hip_half: float
    torso: float
    cadence: float  # cycles per frame
    leg_swing: float
    knee_flex: float
    arm_swing: float
    lean: float

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "Gait":
        h = rng.uniform(0.8, 1.2)
        u = rng.uniform
        return cls(
            height=h,
            thigh=0.25 * h * u(0.85, 1.15),
            shin=0.24 * h * u(0.85, 1.15),
            upper_arm=0.17 * h * u(0.85, 1.15),
            forearm=0.15 * h * u(0.85, 1.15),
            shoulder_half=0.11 * h * u(0.8, 1.25),
            hip_half=0.07 * h * u(0.8, 1.3),
            torso=0.30 * h * u(0.85, 1.15),
            cadence=u(1 / 32, 1 / 18),
            leg_swing=u(0.25, 0.5),
            knee_flex=u(0.3, 0.9),
            arm_swing=u(0.1, 0.6),
            lean=u(-0.1, 0.15),
        )


def _sagittal(angle: np.ndarray) -> np.ndarray:
    # unit vector hanging downward, rotated forward by angle; (x, y, z)
    return np.stack([np.sin(angle), -np.cos(angle), np.zeros_like(angle)], axis=-1)


def walk_coco17(g: Gait, frames: int, phase: float, condition: str = "nm") -> np.ndarray:
    """Animate one walk; returns (frames, 17, 3) world coordinates (x fwd, y up, z lateral)."""
    arm_swing, shoulder_half = g.arm_swing, g.shoulder_half
    if condition.startswith("bg"):
        arm_swing *= 0.3
    elif condition.startswith("cl"):
        shoulder_half *= 1.2
    t = np.arange(frames)
    p = 2 * np.pi * g.cadence * t + phase
    out = np.zeros((frames, 17, 3))
    lateral = np.array([0.0, 0.0, 1.0])

    pelvis = np.zeros((frames, 3))
    pelvis[:, 1] = g.thigh + g.shin + 0.02 * g.height * np.cos(2 * p)
    neck = pelvis + g.torso * np.stack([np.full(frames, np.sin(g.lean)), np.full(frames, np.cos(g.lean)), np.zeros(frames)], -1)

    for side, sign, offset in (("l", 1.0, 0.0), ("r", -1.0, np.pi)):
        hip = pelvis + sign * g.hip_half * lateral
        thigh_angle = g.leg_swing * np.sin(p + offset)
        knee_bend = g.knee_flex * 0.5 * (1 + np.sin(p + offset - np.pi / 2))
        knee = hip + g.thigh * _sagittal(thigh_angle)
        ankle = knee + g.shin * _sagittal(thigh_angle - knee_bend)
        shoulder = neck + sign * shoulder_half * lateral
        arm_angle = arm_swing * np.sin(p + offset + np.pi)
        elbow = shoulder + g.upper_arm * _sagittal(arm_angle)
        wrist = elbow + g.forearm * _sagittal(arm_angle + 0.3)
        i = 0 if side == "l" else 1
        out[:, 5 + i] = shoulder
        out[:, 7 + i] = elbow
        out[:, 9 + i] = wrist
        out[:, 11 + i] = hip
        out[:, 13 + i] = knee
        out[:, 15 + i] = ankle

    h = g.height
    nose = neck + np.array([0.05 * h, 0.12 * h, 0.0])
    out[:, 0] = nose
    out[:, 1] = nose + np.array([-0.01 * h, 0.02 * h, 0.03 * h])
    out[:, 2] = nose + np.array([-0.01 * h, 0.02 * h, -0.03 * h])
    out[:, 3] = nose + np.array([-0.06 * h, 0.01 * h, 0.06 * h])
    out[:, 4] = nose + np.array([-0.06 * h, 0.01 * h, -0.06 * h])
    return out


def project(world: np.ndarray, view_deg: float) -> np.ndarray:
    """Orthographic camera at ``view_deg`` from the walking direction (90 = side view).

    Returns image-style (u, v) coordinates with v pointing down.
    """
    th = np.deg2rad(view_deg)
    u = world[..., 0] * np.sin(th) + world[..., 2] * np.cos(th)
    v = -world[..., 1]
    return np.stack([u, v], axis=-1)


def to_pose18(coco: np.ndarray) -> np.ndarray:
    out = coco[:, [max(i, 0) for i in _POSE18_FROM_COCO]].copy()
    out[:, 1] = 0.5 * (coco[:, 5] + coco[:, 6])
    return out


def view_angles(num_views: int) -> list[float]:
    return [180.0 * k / num_views for k in range(num_views)]


def view_label(angle: float) -> str:
    return f"{int(round(angle)):03d}"


def subject_id(i: int) -> str:
    return f"{i + 1:03d}"


def make_sequence(
    subject: int,
    condition: str,
    view_deg: float,
    frames: int,
    seed: int,
    layout_id: str = "coco17",
    noise: float = 0.005,
) -> SkeletonSequence:
    gait = Gait.sample(np.random.default_rng([seed, subject]))
    cond_code = zlib.crc32(condition.encode())
    rng = np.random.default_rng([seed, subject, cond_code, int(round(view_deg * 10))])
    coords = project(walk_coco17(gait, frames, rng.uniform(0, 2 * np.pi), condition), view_deg)
    coords = coords + rng.normal(0.0, noise, coords.shape)
    if layout_id == "pose18":
        coords = to_pose18(coords)
    elif layout_id != "coco17":
        raise ValueError(f"synthetic data supports coco17 and pose18, not {layout_id!r}")
    assert coords.shape[1] == build_graph(layout_id).num_keypoints
    return SkeletonSequence(
        coords.astype(np.float32), subject_id(subject), condition, view_label(view_deg), layout_id
    )


def generate_dataset(
    out_dir: str | Path,
    subjects: int,
    views: int,
    frames: int,
    seed: int = 0,
    conditions: Sequence[str] = DEFAULT_CONDITIONS,
    layout_id: str = "coco17",
    protocol: str = "synthetic",
) -> DatasetIndex:
    """Write a ``root/subject/condition/view/seq.psg1`` tree plus its index file."""
    root = Path(out_dir)
    for s in range(subjects):
        for cond in conditions:
            for angle in view_angles(views):
                seq = make_sequence(s, cond, angle, frames, seed, layout_id)
                d = root / seq.subject_id / cond / seq.view
                d.mkdir(parents=True, exist_ok=True)
                write_sequence(seq, d / f"seq{SUFFIX}")
    index = build_index(root, protocol, layout_id)
    write_index(index)
    return index
