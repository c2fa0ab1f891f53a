"""Small building blocks shared by the encoders and fusion modules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

LN_EPS = 1e-5


def uniform(rng: np.random.Generator, shape: tuple[int, ...], bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, dim: int) -> "LayerNormParams":
        return cls(ones((dim,)), zeros((dim,)))


def layer_norm(x: Tensor, p: LayerNormParams, eps: float = LN_EPS) -> Tensor:
    mu = T.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = T.mean(xc * xc, axis=-1, keepdims=True)
    return xc / T.sqrt(var + eps) * p.gamma + p.beta


@dataclass
class AttentionParams:
    """Per-head query/key/value projections plus the head-merge matrix."""

    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, heads: int, out_scale: float = 1.0) -> "AttentionParams":
        if heads < 1 or dim % heads:
            raise DimensionError(f"heads={heads} must divide dim={dim}")
        d = dim // heads
        bound = 1.0 / math.sqrt(dim)
        wq = [uniform(rng, (dim, d), bound) for _ in range(heads)]
        wk = [uniform(rng, (dim, d), bound) for _ in range(heads)]
        wv = [uniform(rng, (dim, d), bound) for _ in range(heads)]
        return cls(wq, wk, wv, uniform(rng, (dim, dim), bound * out_scale))

    @property
    def heads(self) -> int:
        return len(self.wq)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i in range(self.heads):
            out[f"{prefix}.head{i}.wq"] = self.wq[i]
            out[f"{prefix}.head{i}.wk"] = self.wk[i]
            out[f"{prefix}.head{i}.wv"] = self.wv[i]
        out[f"{prefix}.wo"] = self.wo
        return out


def multi_head_attention(
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    p: AttentionParams,
    key_mask: np.ndarray | None = None,
    weights_out: list | None = None,
) -> Tensor:
    """``(head_1 || ... || head_h) @ wo`` with scaled dot-product heads.

    ``queries`` is ``[..., Nq, C]``, keys/values ``[..., Nk, C]``; ``key_mask``
    (``[..., Nk]``, True = attendable) removes keys from every softmax.
    """
    c = queries.shape[-1]
    if keys.shape[-1] != c or values.shape[-1] != c or p.wo.shape != (c, c):
        raise DimensionError(
            f"attention dims disagree: queries {queries.shape}, keys {keys.shape}, "
            f"values {values.shape}, wo {p.wo.shape}"
        )
    d = p.wq[0].shape[1]
    if d * p.heads != c:
        raise DimensionError(f"{p.heads} heads of width {d} do not cover dim {c}")
    scale = math.sqrt(d)
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[..., None, :]
    heads = []
    for wq, wk, wv in zip(p.wq, p.wk, p.wv):
        q = queries @ wq
        k = keys @ wk
        v = values @ wv
        a = T.softmax((q @ T.transpose(k)) / scale, axis=-1, mask=mask)
        if weights_out is not None:
            weights_out.append(a.data)
        heads.append(a @ v)
    merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=-1)
    return merged @ p.wo
