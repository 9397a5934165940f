"""Pyramid mask and depth losses.

Every loss accepts an optional leading batch axis and averages over it.
``LossValue.total`` stays a :class:`Tensor` so it can be backpropagated;
per-scale and per-component breakdowns are plain floats for logging.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core.tensor import Tensor, TensorError, clip, log

EPS = 1e-7

# (dy, dx) offsets of the eight neighbours used by the contrastive depth loss
NEIGHBOURS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass
class LossValue:
    total: Tensor
    per_scale: dict[int, float] = field(default_factory=dict)
    components: dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.total.item()

    def to_dict(self) -> dict:
        return {
            "total": self.value,
            "per_scale": {str(k): v for k, v in self.per_scale.items()},
            "components": dict(self.components),
        }


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _check_same(pred: Tensor, target: Tensor, what: str) -> None:
    if pred.shape != target.shape:
        raise TensorError(f"{what}: prediction shape {pred.shape} != target shape {target.shape}")


def _reduce(elem: Tensor, spatial_dims: int, reduction: str) -> Tensor:
    if reduction == "mean":
        return elem.mean()
    if reduction == "sum":
        if elem.ndim <= spatial_dims:
            return elem.sum()
        axes = tuple(range(elem.ndim - spatial_dims, elem.ndim))
        return elem.sum(axis=axes).mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def bce(pred: Tensor, target, reduction: str = "mean", eps: float = EPS) -> Tensor:
    """Binary cross-entropy with predictions clamped to [eps, 1 - eps].

    ``reduction='mean'`` averages over every position; ``'sum'`` sums over
    the two trailing (spatial) axes and averages over any leading ones.
    """
    target = _as_tensor(target, pred.dtype)
    _check_same(pred, target, "bce")
    p = clip(pred, eps, 1.0 - eps)
    elem = -(target * log(p) + (1.0 - target) * log(1.0 - p))
    return _reduce(elem, min(2, pred.ndim), reduction)


def _scale_pairs(pred, label, what: str):
    pred_scales = tuple(pred.keys()) if isinstance(pred, Mapping) else tuple(pred.scales)
    label_scales = tuple(label.keys()) if isinstance(label, Mapping) else tuple(label.scales)
    if pred_scales != label_scales:
        raise TensorError(f"{what}: prediction scales {pred_scales} != label scales {label_scales}")
    return [(s, pred[s], label[s]) for s in pred_scales]


def pyramid_mask_loss(pred, label, reduction: str = "mean") -> LossValue:
    """Sum over scales of the per-scale BCE between predicted and label masks.

    ``pred`` and ``label`` map scale -> map (dict or :class:`Pyramid`).
    """
    total = None
    per_scale = {}
    for s, p, y in _scale_pairs(pred, label, "pyramid_mask_loss"):
        y = _as_tensor(y, p.dtype)
        if p.shape != y.shape and p.size == y.size:
            y = y.reshape(p.shape)
        term = bce(p, y, reduction=reduction)
        per_scale[s] = term.item()
        total = term if total is None else total + term
    return LossValue(total, per_scale, {"pyramid": total.item()})


def overall_mask_loss(pyramid: LossValue, score: Tensor, scalar_label, binary_weight: float = 1.0) -> LossValue:
    """Pyramid loss plus the BCE of the final live/spoof score."""
    y = _as_tensor(scalar_label, score.dtype)
    if y.shape != score.shape and y.size == score.size:
        y = y.reshape(score.shape)
    binary = bce(score, y)
    total = pyramid.total + (binary if binary_weight == 1.0 else binary * binary_weight)
    comps = {"pyramid": pyramid.total.item(), "binary": binary.item()}
    return LossValue(total, dict(pyramid.per_scale), comps)


def mse(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target, pred.dtype)
    _check_same(pred, target, "mse")
    d = pred - target
    return (d * d).mean()


def _contrast(x: Tensor, dy: int, dx: int) -> Tensor:
    h, w = x.shape[-2:]
    neighbour = x[..., 1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
    centre = x[..., 1:h - 1, 1:w - 1]
    return neighbour - centre


def contrastive_depth_loss(pred: Tensor, target) -> Tensor:
    """Sum over the eight neighbour directions of the MSE between contrast fields.

    Each contrast field is the valid-region correlation with a 3x3 kernel
    holding +1 at the neighbour and -1 at the centre.
    """
    target = _as_tensor(target, pred.dtype)
    _check_same(pred, target, "contrastive_depth_loss")
    if pred.ndim < 2 or pred.shape[-1] < 3 or pred.shape[-2] < 3:
        raise TensorError(f"contrastive depth loss needs maps of at least 3x3, got {pred.shape}")
    total = None
    for dy, dx in NEIGHBOURS:
        term = mse(_contrast(pred, dy, dx), _contrast(target, dy, dx))
        total = term if total is None else total + term
    return total


def pyramid_depth_loss(pred, label) -> LossValue:
    """Sum over scales of MSE + contrastive depth loss."""
    total = None
    per_scale = {}
    mse_sum = 0.0
    cdl_sum = 0.0
    for s, p, y in _scale_pairs(pred, label, "pyramid_depth_loss"):
        y = _as_tensor(y, p.dtype)
        if p.shape != y.shape and p.size == y.size:
            y = y.reshape(p.shape)
        m = mse(p, y)
        c = contrastive_depth_loss(p, y)
        term = m + c
        per_scale[s] = term.item()
        mse_sum += m.item()
        cdl_sum += c.item()
        total = term if total is None else total + term
    return LossValue(total, per_scale, {"mse": mse_sum, "cdl": cdl_sum})
