"""Batch-all / batch-hard triplet losses and the supervised contrastive loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .core import EmbeddingSet


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class TripletLossSpec:
    margin: float = 0.2
    variant: str = "batch_hard"
    distance: str = "euclidean"

    def __post_init__(self) -> None:
        if not math.isfinite(self.margin) or self.margin < 0:
            raise LossError(f"margin must be finite and >= 0, got {self.margin}")
        if self.variant not in ("batch_all", "batch_hard"):
            raise LossError(f"unknown triplet variant {self.variant!r}")
        if self.distance != "euclidean":
            raise LossError(f"unsupported distance {self.distance!r}")


@dataclass(frozen=True)
class SupConSpec:
    temperature: float = 0.07
    views: str = "one"
    normalize: bool = True

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise LossError(f"temperature must be > 0, got {self.temperature}")
        if self.views not in ("one", "two"):
            raise LossError(f"views must be 'one' or 'two', got {self.views!r}")


class TripletOutput(NamedTuple):
    loss: torch.Tensor
    n_active: int
    n_triplets: int


def _as_tensors(emb, labels=None):
    if isinstance(emb, EmbeddingSet):
        labels = emb.labels if labels is None else labels
        emb = torch.as_tensor(emb.vectors)
    if labels is None:
        raise LossError("labels are required")
    labels = torch.as_tensor(np.asarray(labels)) if not torch.is_tensor(labels) else labels
    return emb, labels


def pairwise_distances(f: torch.Tensor) -> torch.Tensor:
    """Euclidean distance matrix; exact zeros carry zero gradient instead of NaN."""
    diff = f[:, None, :] - f[None, :, :]
    sq = (diff * diff).sum(-1).clamp_min(0.0)
    zero = sq == 0
    return torch.sqrt(torch.where(zero, torch.ones_like(sq), sq)) * (~zero)


def _label_masks(labels: torch.Tensor):
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    if not (~same).any():
        raise LossError("no negative pairs: the batch holds fewer than 2 labels")
    return same & ~eye, ~same


def triplet_batch_all(emb, spec: TripletLossSpec = TripletLossSpec(variant="batch_all"), labels=None) -> TripletOutput:
    """Mean hinge over all (anchor, positive, negative) triplets with a non-zero term."""
    f, labels = _as_tensors(emb, labels)
    pos, neg = _label_masks(labels)
    d = pairwise_distances(f)
    terms = (d[:, :, None] - d[:, None, :]) + spec.margin  # [a, p, n]
    valid = pos[:, :, None] & neg[:, None, :]
    hinge = torch.where(valid, F.relu(terms), torch.zeros_like(terms))
    n_active = int((hinge > 0).sum())
    loss = hinge.sum() / n_active if n_active else hinge.sum() * 0.0
    return TripletOutput(loss, n_active, int(valid.sum()))


def triplet_batch_hard(emb, spec: TripletLossSpec = TripletLossSpec(), labels=None) -> TripletOutput:
    """Per anchor: hinge(margin + hardest positive distance - hardest negative distance)."""
    f, labels = _as_tensors(emb, labels)
    _, neg = _label_masks(labels)
    d = pairwise_distances(f)
    same = ~neg  # includes the anchor itself, whose distance is 0
    hardest_pos = torch.where(same, d, torch.zeros_like(d)).max(dim=1).values
    inf = torch.full_like(d, float("inf"))
    hardest_neg = torch.where(neg, d, inf).min(dim=1).values
    terms = F.relu(spec.margin + hardest_pos - hardest_neg)
    n_active = int((terms > 0).sum())
    loss = terms.sum() / n_active if n_active else terms.sum() * 0.0
    return TripletOutput(loss, n_active, len(labels))


def triplet_loss(emb, spec: TripletLossSpec, labels=None) -> TripletOutput:
    fn = triplet_batch_all if spec.variant == "batch_all" else triplet_batch_hard
    return fn(emb, spec, labels)


def supcon_masks(labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Contrast mask A(i) (all but i) and positive mask S(i) (same label, not i)."""
    n = len(labels)
    eye = torch.eye(n, dtype=torch.bool, device=labels.device)
    contrast = ~eye
    positive = (labels[:, None] == labels[None, :]) & contrast
    return contrast, positive


def supcon_loss(emb, spec: SupConSpec = SupConSpec(), labels=None) -> torch.Tensor:
    """Supervised contrastive loss averaged over anchors.

    In two-view mode the batch holds 2N entries and entry ``i + N`` is a second
    augmentation of entry ``i``.
    """
    f, labels = _as_tensors(emb, labels)
    if spec.views == "two":
        n2 = len(labels)
        if n2 % 2 or not torch.equal(labels[: n2 // 2], labels[n2 // 2 :]):
            raise LossError("two-view batches must hold 2N entries with entry i+N matching entry i")
    if spec.normalize:
        f = F.normalize(f, dim=1)
    contrast, positive = supcon_masks(labels)
    n_pos = positive.sum(1)
    if (n_pos == 0).any():
        i = int(torch.nonzero(n_pos == 0)[0])
        raise LossError(f"sample without positives at batch position {i}")
    logits = f @ f.T / spec.temperature
    neg_inf = torch.full_like(logits, float("-inf"))
    log_denominator = torch.logsumexp(torch.where(contrast, logits, neg_inf), dim=1)
    log_numerator = torch.logsumexp(torch.where(positive, logits, neg_inf), dim=1) - torch.log(n_pos.to(logits.dtype))
    return (log_denominator - log_numerator).mean()
