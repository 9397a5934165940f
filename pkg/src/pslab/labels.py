"""Pixel-wise labels and their multi-scale pyramids.

Polarity is fixed everywhere in the package: 1 = live (bonafide), 0 = attack.
Mask pyramids use the any-attack rule: a coarse cell is attack as soon as one
base pixel inside its block is attack.  Depth pyramids use block means.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

LIVE = 1
SPOOF = 0

# class ids for multi-class masks; 0 is live, attack classes follow
DEFAULT_CLASSES = ("live", "print", "replay")


class LabelError(ValueError):
    pass


@dataclass
class Pyramid:
    """Per-scale square maps, ordered by strictly decreasing side length."""

    scales: tuple[int, ...]
    maps: tuple[np.ndarray, ...]

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if len(self.scales) != len(self.maps):
            raise LabelError("one map per scale required")
        _check_scales(self.scales)
        for s, m in zip(self.scales, self.maps):
            if m.shape[-2:] != (s, s):
                raise LabelError(f"map for scale {s} has shape {m.shape}")

    def __getitem__(self, scale: int) -> np.ndarray:
        return self.maps[self.scales.index(scale)]

    def items(self):
        return zip(self.scales, self.maps)


MaskPyramid = Pyramid
DepthPyramid = Pyramid


def _check_scales(scales: Sequence[int]) -> None:
    if not scales:
        raise LabelError("at least one scale required")
    if any(s < 1 for s in scales):
        raise LabelError(f"scales must be positive: {scales}")
    if any(a <= b for a, b in zip(scales, scales[1:])):
        raise LabelError(f"scales must be strictly decreasing: {tuple(scales)}")


def _block_view(base: np.ndarray, scale: int) -> np.ndarray:
    h, w = base.shape[-2:]
    if h != w:
        raise LabelError(f"base map must be square, got {h}x{w}")
    if scale > h or h % scale:
        raise LabelError(f"base side {h} not divisible by scale {scale}")
    b = h // scale
    return base.reshape(base.shape[:-2] + (scale, b, scale, b))


def fill_binary_mask(scalar_label: int | str, resolution: int | tuple[int, int]) -> np.ndarray:
    """Constant mask holding the scalar label at every position."""
    value = parse_label(scalar_label)
    h, w = (resolution, resolution) if isinstance(resolution, int) else resolution
    if h < 1 or w < 1:
        raise LabelError(f"resolution must be positive, got {h}x{w}")
    return np.full((h, w), value, dtype=np.uint8)


def parse_label(label: int | str) -> int:
    if isinstance(label, str):
        key = label.lower()
        if key in ("live", "bonafide", "real"):
            return LIVE
        if key in ("spoof", "attack", "fake"):
            return SPOOF
        raise LabelError(f"unknown label {label!r}")
    if label in (0, 1):
        return int(label)
    raise LabelError(f"unknown label {label!r}")


def decompose_mask_pyramid(base: np.ndarray, scales: Sequence[int]) -> Pyramid:
    """Any-attack downsampling of a binary mask to each scale."""
    base = np.asarray(base)
    if not np.isin(base, (0, 1)).all():
        raise LabelError("mask values must be 0 or 1")
    _check_scales(scales)
    maps = tuple(_block_view(base, s).min(axis=(-3, -1)).astype(np.uint8) for s in scales)
    return Pyramid(tuple(scales), maps)


def decompose_depth_pyramid(base: np.ndarray, scales: Sequence[int]) -> Pyramid:
    """Block-mean downsampling of a depth map (label or prediction) to each scale."""
    base = np.asarray(base, dtype=np.float64)
    _check_scales(scales)
    maps = tuple(_block_view(base, s).mean(axis=(-3, -1)) for s in scales)
    return Pyramid(tuple(scales), maps)


def multiclass_mask(attack_class: int | str, resolution: int, classes: Sequence[str] = DEFAULT_CLASSES) -> np.ndarray:
    """Constant map of a class id (0 = live, attack classes from 1)."""
    if isinstance(attack_class, str):
        if attack_class not in classes:
            raise LabelError(f"unknown class {attack_class!r}, expected one of {tuple(classes)}")
        cid = classes.index(attack_class)
    else:
        cid = int(attack_class)
        if not 0 <= cid < len(classes):
            raise LabelError(f"class id {cid} outside 0..{len(classes) - 1}")
    if resolution < 1:
        raise LabelError("resolution must be positive")
    return np.full((resolution, resolution), cid, dtype=np.uint8)


def decompose_multiclass_pyramid(base: np.ndarray, scales: Sequence[int], num_classes: int = len(DEFAULT_CLASSES)) -> Pyramid:
    """Majority vote per block.

    Ties go to the lowest attack class id among the tied classes; live (0)
    wins a tie only when no attack class is tied with it.
    """
    base = np.asarray(base)
    if base.min() < 0 or base.max() >= num_classes:
        raise LabelError(f"class ids must lie in 0..{num_classes - 1}")
    _check_scales(scales)
    maps = []
    for s in scales:
        blocks = _block_view(base, s)
        counts = np.stack([(blocks == c).sum(axis=(-3, -1)) for c in range(num_classes)], axis=-1)
        best = counts.max(axis=-1, keepdims=True)
        tied = counts == best
        attack_tied = tied[..., 1:]
        first_attack = np.argmax(attack_tied, axis=-1) + 1
        out = np.where(attack_tied.any(axis=-1), first_attack, 0)
        maps.append(out.astype(np.uint8))
    return Pyramid(tuple(scales), tuple(maps))
