"""Training objectives: continuation NLL, identity cross-entropy, batch-hard
triplet, and their lambda-weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.3
    distance: str = "euclidean"
    reduction: str = "mean"

    def __post_init__(self):
        if not np.isfinite(self.margin) or self.margin < 0:
            raise ValueError("margin must be finite and >= 0")
        if self.distance not in ("euclidean", "cosine"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


@dataclass
class LossBreakdown:
    lm_nll: float
    id_loss: float | None
    triplet_loss: float | None
    overall: float
    lam: float


def lm_nll(logits: Tensor, ids: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean NLL of the masked tokens under next-token prediction.

    Token ``i`` (where ``loss_mask[i] == 1``) is scored by the logits at
    position ``i - 1``.  Works on [L, V] or batched [B, L, V] logits.
    """
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=np.float64)
    if ids.ndim == 1:
        ids, mask = ids[None], mask[None]
    if not mask[:, 1:].any():
        raise ValueError("loss mask selects no predictable tokens")
    # position i predicts token i+1; the last position predicts nothing
    targets = np.zeros_like(ids)
    targets[:, :-1] = ids[:, 1:]
    weights = np.zeros_like(mask)
    weights[:, :-1] = mask[:, 1:]
    return ad.softmax_cross_entropy(logits, targets, weights)


def id_loss(logits: Tensor, labels) -> Tensor:
    """Softmax cross-entropy averaged over the P*K batch."""
    labels = np.asarray(labels, dtype=np.int64)
    C = logits.shape[-1]
    if (labels < 0).any() or (labels >= C).any():
        raise IndexError(f"label outside [0, {C})")
    return ad.softmax_cross_entropy(logits, labels)


def pairwise_distance(x: Tensor, distance: str = "euclidean") -> Tensor:
    """[n, d] -> [n, n] pairwise distances, differentiable."""
    if distance == "euclidean":
        diff = ad.reshape(x, (x.shape[0], 1, x.shape[1])) - ad.reshape(x, (1,) + x.shape)
        return ad.sqrt(ad.tsum(diff * diff, axis=-1))
    if distance == "cosine":
        norm = ad.sqrt(ad.tsum(x * x, axis=-1, keepdims=True)) + 1e-12
        u = x / norm
        return 1.0 - ad.matmul(u, ad.transpose(u))
    raise ValueError(f"unknown distance {distance!r}")


def triplet_loss(embeddings: Tensor, labels, config: TripletConfig = TripletConfig()) -> Tensor:
    """Batch-hard triplet loss: per anchor, hinge on margin + hardest positive
    distance - hardest negative distance."""
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise ValueError("triplet loss needs at least 2 identities (P >= 2)")
    if counts.min() < 2:
        raise ValueError("triplet loss needs at least 2 samples per identity (K >= 2)")
    dist = pairwise_distance(embeddings, config.distance)
    same = labels[:, None] == labels[None, :]
    hardest_pos = ad.masked_max(dist, same, axis=1)
    hardest_neg = ad.masked_min(dist, ~same, axis=1)
    per_anchor = ad.hinge(config.margin + hardest_pos - hardest_neg)
    if config.reduction == "sum":
        return ad.tsum(per_anchor)
    return ad.mean(per_anchor)


def overall_loss(lm: Tensor | float, idl: Tensor | float, tri: Tensor | float, lam: float):
    """``lam * lm + (1 - lam) * (idl + tri)``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda={lam} outside [0, 1]")
    return lam * lm + (1.0 - lam) * (idl + tri)
