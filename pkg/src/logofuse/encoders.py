"""Visual and textual encoders at toy scale.

The visual encoder either runs a tiny pre-norm transformer over image
patches (``trainable``) or applies one learned projection to a precomputed
feature vector (``passthrough``, a single output token). The text encoder is
always a tiny transformer over token ids with padding masked out of attention.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .layers import AttentionParams, LayerNormParams, layer_norm, multi_head_attention, uniform, zeros
from .tensor import Tensor

UNK_ID = 0
PAD_ID = 1
SEP_ID = 2
SEP_TOKEN = "<sep>"
RESERVED = {"<unk>": UNK_ID, "<pad>": PAD_ID, SEP_TOKEN: SEP_ID}

_TOKEN_RE = re.compile(r"<sep>|[^\W_]+")


@dataclass
class EncoderConfig:
    mode: str = "trainable"
    embed_dim: int = 64
    num_tokens: int = 16
    depth: int = 1
    heads: int = 4
    vocab_size: int = 0
    patch_size: int = 4
    input_dim: int = 0
    trainable: bool = True

    def validate(self) -> None:
        if self.mode not in ("trainable", "passthrough"):
            raise ValidationError(f"encoder mode must be trainable|passthrough, got {self.mode!r}")
        if self.embed_dim < 1 or self.heads < 1 or self.embed_dim % self.heads:
            raise ValidationError(f"embed_dim={self.embed_dim} must be divisible by heads={self.heads}")
        if self.mode == "trainable" and self.depth < 1:
            raise ValidationError("depth must be >= 1 in trainable mode")
        if self.num_tokens < 1:
            raise ValidationError("num_tokens must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSequence:
    ids: np.ndarray
    mask: np.ndarray  # True at real (non-pad) positions


@dataclass
class TokenMatrix:
    tokens: Tensor  # [N, C] or batched [B, N, C]
    mask: np.ndarray | None = None  # attendable positions, same leading shape as tokens


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def build_vocab(texts) -> dict[str, int]:
    words = sorted({w for t in texts for w in split_words(t)} - set(RESERVED))
    vocab = dict(RESERVED)
    for i, w in enumerate(words):
        vocab[w] = i + len(RESERVED)
    return vocab


def tokenize(text: str, vocab: dict[str, int], num_tokens: int) -> TokenSequence:
    """Lowercase, split on whitespace/punctuation, map to ids, pad or truncate."""
    ids = [vocab.get(w, UNK_ID) for w in split_words(text)][:num_tokens]
    n = len(ids)
    mask = np.zeros(num_tokens, dtype=bool)
    mask[:n] = True
    return TokenSequence(np.array(ids + [PAD_ID] * (num_tokens - n), dtype=np.int64), mask)


def join_captions(texts: list[str]) -> str:
    return f" {SEP_TOKEN} ".join(texts)


def attend_mask(mask: np.ndarray) -> np.ndarray:
    """Padding mask with position 0 forced attendable (keeps all-pad rows defined)."""
    m = np.array(mask, dtype=bool, copy=True)
    m[..., 0] = True
    return m


@dataclass
class _Block:
    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor

    @classmethod
    def init(cls, rng, dim: int, heads: int) -> "_Block":
        bound = 1.0 / math.sqrt(dim)
        return cls(
            LayerNormParams.init(dim),
            AttentionParams.init(rng, dim, heads),
            LayerNormParams.init(dim),
            uniform(rng, (dim, 2 * dim), bound),
            zeros((2 * dim,)),
            uniform(rng, (2 * dim, dim), 1.0 / math.sqrt(2 * dim)),
            zeros((dim,)),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.ln1.gamma": self.ln1.gamma, f"{prefix}.ln1.beta": self.ln1.beta}
        out.update(self.attn.named(f"{prefix}.attn"))
        out.update({
            f"{prefix}.ln2.gamma": self.ln2.gamma, f"{prefix}.ln2.beta": self.ln2.beta,
            f"{prefix}.ff.w1": self.ff_w1, f"{prefix}.ff.b1": self.ff_b1,
            f"{prefix}.ff.w2": self.ff_w2, f"{prefix}.ff.b2": self.ff_b2,
        })
        return out

    def __call__(self, x: Tensor, key_mask=None) -> Tensor:
        h = layer_norm(x, self.ln1)
        x = x + multi_head_attention(h, h, h, self.attn, key_mask)
        h = layer_norm(x, self.ln2)
        return x + T.tanh(h @ self.ff_w1 + self.ff_b1) @ self.ff_w2 + self.ff_b2


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """``[B, H, W]`` grid to ``[B, (H/p)*(W/p), p*p]`` patches in row-major order."""
    b, h, w = pixels.shape
    if h % patch or w % patch:
        raise DimensionError(f"pixel grid {h}x{w} is not divisible by patch_size={patch}")
    x = pixels.reshape(b, h // patch, patch, w // patch, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch)


class VisualEncoder:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        c = cfg.embed_dim
        if cfg.mode == "passthrough":
            if cfg.input_dim < 1:
                raise ValidationError("passthrough visual encoder needs input_dim >= 1")
            self.proj = uniform(rng, (c, cfg.input_dim), 1.0 / math.sqrt(cfg.input_dim))
        else:
            p2 = cfg.patch_size * cfg.patch_size
            self.patch_w = uniform(rng, (p2, c), 1.0 / math.sqrt(p2))
            self.patch_b = zeros((c,))
            self.pos = uniform(rng, (cfg.num_tokens, c), 0.02)
            self.blocks = [_Block.init(rng, c, cfg.heads) for _ in range(cfg.depth)]

    def named_parameters(self) -> dict[str, Tensor]:
        if self.cfg.mode == "passthrough":
            return {"visual.proj": self.proj}
        out = {"visual.patch_w": self.patch_w, "visual.patch_b": self.patch_b, "visual.pos": self.pos}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"visual.block{i}"))
        return out

    def forward(self, sources: np.ndarray) -> Tensor:
        """Batched encode: features ``[B, D_v]`` or pixels ``[B, H, W]`` to ``[B, N_v, C]``."""
        with T.op_scope("visual"):
            src = np.asarray(sources, dtype=np.float64)
            if self.cfg.mode == "passthrough":
                if src.ndim != 2 or src.shape[1] != self.cfg.input_dim:
                    raise DimensionError(
                        f"passthrough encoder expects features [B, {self.cfg.input_dim}], got {src.shape}"
                    )
                x = Tensor(src[:, None, :]) @ T.transpose(self.proj)
                return x
            if src.ndim != 3:
                raise DimensionError(f"trainable visual encoder expects pixels [B, H, W], got {src.shape}")
            patches = patchify(src, self.cfg.patch_size)
            if patches.shape[1] != self.cfg.num_tokens:
                raise DimensionError(
                    f"image yields {patches.shape[1]} patches but num_tokens={self.cfg.num_tokens}"
                )
            x = Tensor(patches) @ self.patch_w + self.patch_b + self.pos
            for blk in self.blocks:
                x = blk(x)
            return x


class TextEncoder:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        if cfg.mode != "trainable":
            raise ValidationError("the text encoder only supports trainable mode")
        if cfg.vocab_size <= len(RESERVED):
            raise ValidationError(f"vocab_size must exceed {len(RESERVED)} reserved ids")
        self.cfg = cfg
        c = cfg.embed_dim
        self.embed = uniform(rng, (cfg.vocab_size, c), 1.0)
        self.pos = uniform(rng, (cfg.num_tokens, c), 0.02)
        self.blocks = [_Block.init(rng, c, cfg.heads) for _ in range(cfg.depth)]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"text.embed": self.embed, "text.pos": self.pos}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"text.block{i}"))
        return out

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> TokenMatrix:
        """Batched encode: ids ``[B, N_t]`` to ``[B, N_t, C]`` with the attend mask."""
        with T.op_scope("text"):
            ids = np.asarray(ids, dtype=np.int64)
            if ids.ndim != 2 or ids.shape[1] != self.cfg.num_tokens:
                raise DimensionError(f"expected token ids [B, {self.cfg.num_tokens}], got {ids.shape}")
            if ids.size and ids.max() >= self.cfg.vocab_size:
                raise DimensionError(f"token id {int(ids.max())} >= vocab_size {self.cfg.vocab_size}")
            keep = attend_mask(mask)
            x = T.take_rows(self.embed, ids) + self.pos
            for blk in self.blocks:
                x = blk(x, keep)
            return TokenMatrix(x, keep)


def encode_image(record, encoder: VisualEncoder) -> TokenMatrix:
    """One record to its ``[N_v, C]`` visual tokens."""
    src = record.source_array()
    expect_pixels = encoder.cfg.mode == "trainable"
    if record.has_pixels != expect_pixels:
        kind = "pixels" if expect_pixels else "features"
        raise ValidationError(f"record {record.id!r} lacks {kind} required by {encoder.cfg.mode} mode")
    out = encoder.forward(src[None])
    return TokenMatrix(out[0])


def encode_text(seq: TokenSequence, encoder: TextEncoder) -> TokenMatrix:
    if len(seq.ids) != encoder.cfg.num_tokens:
        raise DimensionError(f"sequence length {len(seq.ids)} != num_tokens {encoder.cfg.num_tokens}")
    with T.op_scope("text"):
        out = encoder.forward(seq.ids[None], seq.mask[None])
        return TokenMatrix(out.tokens[0], out.mask[0])


def pool(tm: TokenMatrix) -> Tensor:
    """Mean over (attendable) tokens, then unit-normalize."""
    x = tm.tokens
    if x.shape[-2] < 1:
        raise DimensionError("cannot pool an empty token matrix")
    if tm.mask is None:
        m = T.mean(x, axis=-2)
    else:
        w = np.asarray(tm.mask, dtype=np.float64)
        m = T.sum(x * w[..., None], axis=-2) / w.sum(axis=-1, keepdims=True)
    return T.l2_normalize(m, axis=-1)
