"""Fusion of visual and textual tokens into one unit-norm feature.

Three interchangeable methods: an MLP over pooled features, self-attention
over the concatenated token sequence, and a stack of cross-attention layers
where visual queries attend to text keys/values.

Cross-attention layers are pre-norm residual blocks::

    out = q_v + (head_1 || ... || head_h) @ W_o
    head_i = softmax((LN(q_v) W_q_i)(LN(t) W_k_i)^T / sqrt(C/h)) (LN(t) W_v_i)

With every value projection at zero the text contribution is exactly zero,
so the layer returns ``q_v`` bit-for-bit and the fused feature coincides with
the text-free visual embedding used at inference.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .encoders import TokenMatrix, pool
from .errors import DimensionError, ValidationError
from .layers import AttentionParams, LayerNormParams, layer_norm, multi_head_attention, uniform, zeros
from .tensor import Tensor

METHODS = ("mlp", "self_attn", "cross_attn")

# Keeps the head-merge projection near zero at initialization.
OUT_INIT_SCALE = 0.01


@dataclass
class FusionConfig:
    method: str = "cross_attn"
    dim: int = 64
    layers: int = 2
    heads: int = 4
    mlp_hidden: int = 128

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValidationError(f"fusion.method must be one of {METHODS}, got {self.method!r}")
        if self.layers < 1:
            raise ValidationError("fusion.layers must be >= 1")
        if self.heads < 1 or self.dim % self.heads:
            raise ValidationError(f"fusion.heads={self.heads} must divide fusion.dim={self.dim}")
        if self.mlp_hidden < 1:
            raise ValidationError("fusion.mlp_hidden must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CrossAttnLayerParams:
    attn: AttentionParams
    ln_q: LayerNormParams
    ln_kv: LayerNormParams

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, heads: int) -> "CrossAttnLayerParams":
        return cls(AttentionParams.init(rng, dim, heads, out_scale=OUT_INIT_SCALE),
                   LayerNormParams.init(dim), LayerNormParams.init(dim))

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.named(prefix)
        out.update({
            f"{prefix}.ln_q.gamma": self.ln_q.gamma, f"{prefix}.ln_q.beta": self.ln_q.beta,
            f"{prefix}.ln_kv.gamma": self.ln_kv.gamma, f"{prefix}.ln_kv.beta": self.ln_kv.beta,
        })
        return out


@dataclass
class SelfAttnLayerParams:
    attn: AttentionParams
    ln: LayerNormParams

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, heads: int) -> "SelfAttnLayerParams":
        return cls(AttentionParams.init(rng, dim, heads, out_scale=OUT_INIT_SCALE), LayerNormParams.init(dim))

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.named(prefix)
        out.update({f"{prefix}.ln.gamma": self.ln.gamma, f"{prefix}.ln.beta": self.ln.beta})
        return out


@dataclass
class MLPParams:
    w1: Tensor  # [2C, hidden]
    b1: Tensor
    w2: Tensor  # [hidden, C]
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, hidden: int) -> "MLPParams":
        return cls(uniform(rng, (2 * dim, hidden), 1.0 / math.sqrt(2 * dim)), zeros((hidden,)),
                   uniform(rng, (hidden, dim), 1.0 / math.sqrt(hidden)), zeros((dim,)))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1, f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def _check_dims(v: Tensor, t: Tensor) -> None:
    if v.shape[-1] != t.shape[-1]:
        raise DimensionError(f"visual dim {v.shape[-1]} != text dim {t.shape[-1]}")


def fuse_mlp(v: Tensor, t: Tensor, p: MLPParams, activation: bool = True) -> Tensor:
    """``phi([v; t])``: two-layer perceptron over concatenated pooled features (raw, not normalized)."""
    _check_dims(v, t)
    if p.w1.shape[0] != 2 * v.shape[-1]:
        raise DimensionError(f"mlp input width {p.w1.shape[0]} != 2 x {v.shape[-1]}")
    h = T.concat([v, t], axis=-1) @ p.w1 + p.b1
    if activation:
        h = T.tanh(h)
    return h @ p.w2 + p.b2


def self_attn_layer(x: Tensor, p: SelfAttnLayerParams, key_mask=None, residual: bool = True,
                    prenorm: bool = True, weights_out: list | None = None) -> Tensor:
    h = layer_norm(x, p.ln) if prenorm else x
    out = multi_head_attention(h, h, h, p.attn, key_mask, weights_out)
    return x + out if residual else out


def fuse_self_attn(v: Tensor, t: Tensor, layers: list[SelfAttnLayerParams], t_mask=None,
                   residual: bool = True, prenorm: bool = True, weights_out: list | None = None) -> Tensor:
    """Self-attention over ``[v; t]`` tokens; returns the normalized mean of the visual positions."""
    _check_dims(v, t)
    n_v = v.shape[-2]
    x = T.concat([v, t], axis=-2)
    mask = None
    if t_mask is not None:
        t_mask = np.asarray(t_mask, dtype=bool)
        mask = np.concatenate([np.ones(t_mask.shape[:-1] + (n_v,), dtype=bool), t_mask], axis=-1)
    for p in layers:
        x = self_attn_layer(x, p, mask, residual, prenorm, weights_out)
    index = (Ellipsis, slice(0, n_v), slice(None))
    return T.l2_normalize(T.mean(x[index], axis=-2), axis=-1)


def cross_attn_layer(q_v: Tensor, k_t: Tensor, v_t: Tensor, p: CrossAttnLayerParams, key_mask=None,
                     residual: bool = True, prenorm: bool = True, weights_out: list | None = None) -> Tensor:
    """One multi-head cross-attention layer: visual queries, text keys/values."""
    _check_dims(q_v, k_t)
    _check_dims(q_v, v_t)
    if k_t.shape[-2] != v_t.shape[-2]:
        raise DimensionError(f"{k_t.shape[-2]} keys but {v_t.shape[-2]} values")
    if prenorm:
        q_in, k_in, v_in = layer_norm(q_v, p.ln_q), layer_norm(k_t, p.ln_kv), layer_norm(v_t, p.ln_kv)
    else:
        q_in, k_in, v_in = q_v, k_t, v_t
    out = multi_head_attention(q_in, k_in, v_in, p.attn, key_mask, weights_out)
    return q_v + out if residual else out


def fuse_cross_attn(v: Tensor, t: Tensor, layers: list[CrossAttnLayerParams], t_mask=None,
                    weights_out: list | None = None) -> Tensor:
    """Stack of cross-attention layers over fixed text tokens, then mean-pool and normalize."""
    q = v
    for p in layers:
        q = cross_attn_layer(q, t, t, p, t_mask, weights_out=weights_out)
    return T.l2_normalize(T.mean(q, axis=-2), axis=-1)


class Fusion:
    """Holds the parameters of one fusion method and dispatches on ``cfg.method``."""

    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        if cfg.method == "mlp":
            self.mlp = MLPParams.init(rng, cfg.dim, cfg.mlp_hidden)
        elif cfg.method == "self_attn":
            self.layers = [SelfAttnLayerParams.init(rng, cfg.dim, cfg.heads) for _ in range(cfg.layers)]
        else:
            self.layers = [CrossAttnLayerParams.init(rng, cfg.dim, cfg.heads) for _ in range(cfg.layers)]

    def named_parameters(self) -> dict[str, Tensor]:
        if self.cfg.method == "mlp":
            return self.mlp.named("fusion.mlp")
        out = {}
        for i, p in enumerate(self.layers):
            out.update(p.named(f"fusion.layer{i}"))
        return out

    def value_projections(self) -> list[str]:
        """Names of the text-value projection matrices (attention methods only)."""
        if self.cfg.method != "cross_attn":
            return []
        return [k for k in self.named_parameters() if k.endswith(".wv")]

    def __call__(self, v_tokens: Tensor, text: TokenMatrix, weights_out: list | None = None) -> Tensor:
        with T.op_scope("fusion"):
            if self.cfg.method == "mlp":
                fused = fuse_mlp(pool(TokenMatrix(v_tokens)), pool(text), self.mlp)
                return T.l2_normalize(fused, axis=-1)
            if self.cfg.method == "self_attn":
                return fuse_self_attn(v_tokens, text.tokens, self.layers, text.mask, weights_out=weights_out)
            return fuse_cross_attn(v_tokens, text.tokens, self.layers, text.mask, weights_out=weights_out)
