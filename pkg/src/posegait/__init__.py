"""Pose-based gait recognition: skeleton data, graph backbones, metric losses
and cross-view retrieval evaluation."""
from __future__ import annotations

__version__ = "0.1.0"

from .core import EmbeddingSet, SampleBatch, SkeletonGraph, SkeletonSequence, build_graph, normalized_adjacency

__all__ = [
    "EmbeddingSet",
    "SampleBatch",
    "SkeletonGraph",
    "SkeletonSequence",
    "build_graph",
    "normalized_adjacency",
    "__version__",
]
