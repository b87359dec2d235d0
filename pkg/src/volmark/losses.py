"""Training losses with missing-landmark masking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

BCE_EPS = 1e-7
VARIANTS = ("anchor_free", "anchor_based")


@dataclass(frozen=True)
class LossWeights:
    reg: float = 1.0
    cls: float = 1.0
    heatmap: float = 1.0

    def __post_init__(self):
        w = (self.reg, self.cls, self.heatmap)
        if min(w) < 0 or max(w) <= 0:
            raise ValueError(f"loss weights must be nonnegative with one positive, got {w}")


def _const(a, like: Tensor) -> Tensor:
    return Tensor(np.broadcast_to(np.asarray(a), like.shape), dtype=like.dtype)


def heatmap_loss(pred: Tensor, target, present) -> Tensor:
    """Squared error summed over present channels / (voxels * present channels).

    ``pred`` and ``target`` are ``(..., H, W, D, L)``; ``present`` is ``(..., L)``
    (or ``(L,)``, shared across the leading axes).
    """
    target = np.asarray(target)
    if target.shape != pred.shape:
        raise ShapeError(f"heatmap_loss: prediction {pred.shape} vs target {target.shape}")
    lead, spatial, n = pred.shape[:-4], pred.shape[-4:-1], pred.shape[-1]
    mask = np.broadcast_to(np.asarray(present, dtype=bool), lead + (n,))
    n_present = int(mask.sum())
    if n_present == 0:
        raise ValueError("heatmap_loss: no present landmarks")
    m = mask.reshape(lead + (1, 1, 1, n))
    diff = pred - _const(target, pred)
    sq = diff * diff * _const(m, pred)
    return T.reduce_sum(sq) * (1.0 / (int(np.prod(spatial)) * n_present))


def offset_loss(t_pred: Tensor, t_true, positive) -> Tensor:
    """Mean squared Euclidean offset error over positive anchors.

    ``t_pred``/``t_true`` are ``(..., 3*M)``, ``positive`` is ``(..., M)``.
    """
    t_true = np.asarray(t_true)
    positive = np.asarray(positive, dtype=bool)
    if t_true.shape != t_pred.shape or positive.shape[:-1] != t_pred.shape[:-1] \
            or 3 * positive.shape[-1] != t_pred.shape[-1]:
        raise ShapeError(f"offset_loss: shapes {t_pred.shape}, {t_true.shape}, mask {positive.shape}")
    n_pos = int(positive.sum())
    if n_pos == 0:
        raise ValueError("offset_loss: no positive anchors")
    m3 = np.repeat(positive, 3, axis=-1)
    diff = t_pred - _const(t_true, t_pred)
    return T.reduce_sum(diff * diff * _const(m3, t_pred)) * (1.0 / n_pos)


def cls_loss(p_hat: Tensor, p_true, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy over all anchors; ``p_hat`` clamped to ``[eps, 1-eps]``."""
    p_true = np.asarray(p_true)
    if p_true.shape != p_hat.shape:
        raise ShapeError(f"cls_loss: prediction {p_hat.shape} vs labels {p_true.shape}")
    p = T.clip(p_hat, eps, 1.0 - eps)
    y = _const(p_true, p_hat)
    ll = T.log(p) * y + T.log(1.0 - p) * (1.0 - y)
    return T.reduce_mean(ll) * -1.0


def total_loss(parts: dict, weights: LossWeights = LossWeights(), variant: str = "anchor_free"):
    """Heatmap term alone for anchor-free; weighted reg + cls + heatmap for anchor-based.

    A missing ``heatmap`` part in the anchor-based sum counts as zero.
    """
    if variant == "anchor_free":
        return parts["heatmap"]
    if variant != "anchor_based":
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    total = parts["reg"] * weights.reg + parts["cls"] * weights.cls
    if parts.get("heatmap") is not None:
        total = total + parts["heatmap"] * weights.heatmap
    return total
