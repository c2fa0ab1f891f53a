"""Additive angular margin (ArcFace) loss over cosine logits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .tensor import Tensor

COS_CLAMP = 1e-7
UNIT_TOL = 1e-4


@dataclass
class ArcFaceParams:
    centers: Tensor  # [num_classes, C], unit rows
    scale: float = 30.0
    margin: float = 0.3

    def __post_init__(self):
        if self.scale <= 0:
            raise ValidationError(f"scale must be > 0, got {self.scale}")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValidationError(f"margin must lie in [0, pi/2), got {self.margin}")

    @classmethod
    def init(cls, rng: np.random.Generator, num_classes: int, dim: int, scale: float = 30.0,
             margin: float = 0.3) -> "ArcFaceParams":
        c = rng.standard_normal((num_classes, dim))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        return cls(Tensor(c, requires_grad=True), scale, margin)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    def renormalize(self) -> None:
        c = self.centers.data
        self.centers.assign(c / np.sqrt(T.ordered_sum(c * c, axis=1, keepdims=True)))


def arcface_logits(f: Tensor, params: ArcFaceParams, labels) -> Tensor:
    """``s*cos(theta_j)`` off-target, ``s*cos(theta_y + margin)`` on the target column."""
    labels = np.asarray(labels, dtype=np.int64)
    if f.ndim != 2 or f.shape[1] != params.centers.shape[1]:
        raise DimensionError(f"features {f.shape} do not match centers {params.centers.shape}")
    if labels.shape != (f.shape[0],):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {f.shape[0]} features")
    if labels.size and (labels.min() < 0 or labels.max() >= params.num_classes):
        raise ValidationError(f"labels must lie in [0, {params.num_classes})")
    norms = np.sqrt(T.ordered_sum(f.data * f.data, axis=1))
    if (np.abs(norms - 1.0) > UNIT_TOL).any():
        raise ValidationError("arcface features must be unit-norm rows")

    cos = f @ T.transpose(params.centers)
    target = np.zeros(cos.shape, dtype=bool)
    target[np.arange(len(labels)), labels] = True
    cos_y = cos[np.arange(len(labels)), labels]
    # The clamp only guards the square root; the cosines themselves stay exact.
    bounded = T.clamp(cos_y, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    sin_y = T.sqrt(1.0 - bounded * bounded)
    margined = cos_y * math.cos(params.margin) - sin_y * math.sin(params.margin)
    # Scatter the margined target cosine back into its column.
    spread = T.where(target, T.reshape(margined, (-1, 1)), cos)
    return spread * params.scale


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    picked = logits[np.arange(len(labels)), labels]
    return T.mean(T.logsumexp(logits, axis=-1) - picked)


def arcface_loss(f: Tensor, params: ArcFaceParams, labels) -> Tensor:
    """Mean cross-entropy over the margined logits."""
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValidationError("arcface_loss needs a non-empty [B, C] batch")
    return cross_entropy(arcface_logits(f, params, labels), labels)
