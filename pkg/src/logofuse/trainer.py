"""End-to-end training: batching, optimizer steps, logging and checkpoints."""

from __future__ import annotations

import fnmatch
import json
import struct
import sys
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO

import numpy as np

from . import tensor as T
from .data import Captions, ImageRecord, Manifest
from .encoders import EncoderConfig, build_vocab, join_captions, tokenize
from .errors import FormatError, NonFiniteError, ValidationError
from .fusion import FusionConfig
from .loss import arcface_loss
from .model import TEXT_MODE_PROMPTS, TEXT_MODES, LogoModel

CHECKPOINT_MAGIC = b"LGC1"
CHECKPOINT_VERSION = 1
OPTIMIZERS = ("sgd_momentum", "adaptive_moments")

_STREAM_TRAIN = 7


def _visual_default() -> EncoderConfig:
    return EncoderConfig(mode="passthrough", embed_dim=64, num_tokens=1, depth=1, heads=4)


def _text_default() -> EncoderConfig:
    return EncoderConfig(mode="trainable", embed_dim=64, num_tokens=32, depth=1, heads=4)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    text_mode: str = "brief"
    optimizer: str = "adaptive_moments"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scale: float = 30.0
    margin: float = 0.3
    fusion: FusionConfig = field(default_factory=FusionConfig)
    visual: EncoderConfig = field(default_factory=_visual_default)
    text: EncoderConfig = field(default_factory=_text_default)
    frozen: list[str] = field(default_factory=list)
    checkpoint_path: str | None = None

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if self.text_mode not in TEXT_MODES:
            raise ValidationError(f"text_mode must be one of {TEXT_MODES}, got {self.text_mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not (0 <= self.momentum < 1 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValidationError("momentum/beta1/beta2 must lie in [0, 1) and eps > 0")
        if self.scale <= 0 or not 0 <= self.margin < np.pi / 2:
            raise ValidationError("scale must be > 0 and margin in [0, pi/2)")
        self.fusion.validate()
        self.visual.validate()
        self.text.validate()
        dims = {self.fusion.dim, self.visual.embed_dim, self.text.embed_dim}
        if len(dims) != 1:
            raise ValidationError(
                f"fusion.dim, visual.embed_dim and text.embed_dim must agree, got {sorted(dims)}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    def model_dict(self) -> dict:
        """Config as stored in checkpoints: output paths are not part of a model's identity."""
        d = self.to_dict()
        d.pop("checkpoint_path")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        dim = d.pop("dim", None)
        nested = {"fusion": FusionConfig, "visual": EncoderConfig, "text": EncoderConfig}
        defaults = cls()
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in d.items():
            if key in nested:
                base = asdict(getattr(defaults, key))
                if not isinstance(value, dict):
                    raise ValidationError(f"{key} must be an object")
                bad = set(value) - set(base)
                if bad:
                    raise ValidationError(f"unknown {key} keys: {sorted(bad)}")
                base.update(value)
                kwargs[key] = nested[key](**base)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        if dim is not None:
            cfg.fusion.dim = cfg.visual.embed_dim = cfg.text.embed_dim = int(dim)
        return cfg


class SGDMomentum:
    def __init__(self, lr: float, momentum: float):
        self.lr, self.momentum = lr, momentum
        self.buf: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, T.Tensor]) -> None:
        for name, p in params.items():
            if p.grad is None:
                continue
            b = self.buf.get(name)
            b = p.grad.copy() if b is None else self.momentum * b + p.grad
            self.buf[name] = b
            p.assign(p.data - self.lr * b)


class AdaptiveMoments:
    def __init__(self, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, T.Tensor]) -> None:
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            t = self.t.get(name, 0) + 1
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            self.t[name], self.m[name], self.v[name] = t, m, v
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.assign(p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd_momentum":
        return SGDMomentum(cfg.learning_rate, cfg.momentum)
    return AdaptiveMoments(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)


def make_batches(records: list[ImageRecord], batch_size: int, seed: int, epoch: int) -> list[list[ImageRecord]]:
    """Class-interleaved batches; a pure function of ``(records, seed, epoch)``.

    Samples are shuffled within each class and dealt round-robin over a
    shuffled class order, so any batch of two or more holds at least two
    classes while two classes still have samples left.
    """
    if not records:
        raise ValidationError("cannot batch an empty record list")
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    by_class: dict[int, list[ImageRecord]] = defaultdict(list)
    for r in sorted(records, key=lambda r: r.id):
        by_class[r.label].append(r)
    if len(by_class) < 2:
        raise ValidationError("batching needs at least 2 classes")
    rng = np.random.default_rng([seed, epoch, _STREAM_TRAIN])
    classes = sorted(by_class)
    queues = {c: [by_class[c][i] for i in rng.permutation(len(by_class[c]))] for c in classes}
    order = [classes[i] for i in rng.permutation(len(classes))]
    dealt: list[ImageRecord] = []
    while len(dealt) < len(records):
        for c in order:
            if queues[c]:
                dealt.append(queues[c].pop(0))
    batches = [dealt[i:i + batch_size] for i in range(0, len(dealt), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


@dataclass
class TrainState:
    """Everything a checkpoint carries, plus the live optimizer."""

    config: TrainConfig
    model: LogoModel
    num_classes: int
    epoch: int = 0
    step: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    optimizer: object = None
    extra_frozen: set[str] = field(default_factory=set)
    _token_cache: dict = field(default_factory=dict, repr=False)

    def frozen_names(self) -> set[str]:
        pats = list(self.config.frozen)
        if not self.config.visual.trainable:
            pats.append("visual.*")
        if not self.config.text.trainable:
            pats.append("text.*")
        names = set(self.extra_frozen)
        for name in self.model.named_parameters():
            if any(fnmatch.fnmatchcase(name, p) for p in pats):
                names.add(name)
        return names

    def trainable_parameters(self) -> dict[str, T.Tensor]:
        frozen = self.frozen_names()
        return {k: v for k, v in self.model.named_parameters().items() if k not in frozen}

    def silence_text_values(self) -> list[str]:
        """Zero every cross-attention value projection and hold it at zero."""
        names = self.model.fusion.value_projections()
        params = self.model.named_parameters()
        for n in names:
            params[n].assign(np.zeros(params[n].shape))
        self.extra_frozen.update(names)
        return names


def init_state(cfg: TrainConfig, num_classes: int, captions: Captions | None = None,
               train_records: list[ImageRecord] = ()) -> TrainState:
    """Fresh parameters; the vocabulary comes from the training captions the text mode uses."""
    cfg = TrainConfig.from_dict(cfg.to_dict())
    if cfg.visual.mode == "passthrough" and cfg.visual.input_dim == 0 and train_records:
        cfg.visual.input_dim = int(train_records[0].source_array().size)
    prompts = TEXT_MODE_PROMPTS[cfg.text_mode]
    vocab: dict[str, int] = {}
    if prompts:
        if captions is None:
            raise ValidationError(f"text_mode={cfg.text_mode!r} requires captions")
        vocab = build_vocab(_caption_text(captions, r.id, prompts) for r in train_records)
        cfg.text.vocab_size = len(vocab)
    else:
        cfg.text.vocab_size = 0
    return _build_state(cfg, num_classes, vocab)


def _build_state(cfg: TrainConfig, num_classes: int, vocab: dict[str, int]) -> TrainState:
    model = LogoModel(cfg.visual, cfg.text, cfg.fusion, num_classes, cfg.scale, cfg.margin, cfg.seed, vocab)
    return TrainState(cfg, model, num_classes, rng=np.random.default_rng([cfg.seed, _STREAM_TRAIN]),
                      optimizer=make_optimizer(cfg))


def _caption_text(captions: Captions, image_id: str, prompts) -> str:
    parts = []
    for p in prompts:
        text = captions.get(image_id, p)
        if text is None:
            raise ValidationError(f"missing {p!r} caption for image {image_id!r}")
        parts.append(text)
    return join_captions(parts)


def prepare_batch(batch: list[ImageRecord], state: TrainState, captions: Captions | None):
    """Stack sources and labels; tokenize captions unless the text mode is ``none``."""
    sources = np.stack([r.source_array() for r in batch])
    labels = np.array([r.label for r in batch], dtype=np.int64)
    prompts = TEXT_MODE_PROMPTS[state.config.text_mode]
    if not prompts:
        return sources, labels, None, None
    if captions is None:
        raise ValidationError(f"text_mode={state.config.text_mode!r} requires captions")
    ids, masks = [], []
    for r in batch:
        seq = state._token_cache.get(r.id)
        if seq is None:
            seq = tokenize(_caption_text(captions, r.id, prompts), state.model.vocab, state.config.text.num_tokens)
            state._token_cache[r.id] = seq
        ids.append(seq.ids)
        masks.append(seq.mask)
    return sources, labels, np.stack(ids), np.stack(masks)


def batch_loss(state: TrainState, batch: list[ImageRecord], captions: Captions | None) -> T.Tensor:
    sources, labels, ids, mask = prepare_batch(batch, state, captions)
    if ids is None:
        f = state.model.embed(sources)
    else:
        f = state.model.fused(sources, ids, mask)
    return arcface_loss(f, state.model.arcface, labels)


def train_step(batch: list[ImageRecord], state: TrainState, cfg: TrainConfig | None = None,
               captions: Captions | None = None) -> tuple[float, TrainState]:
    """Forward, backward, optimizer update, center renormalization."""
    if cfg is not None and cfg is not state.config:
        state.config = cfg
        state.optimizer = make_optimizer(cfg) if state.optimizer is None else state.optimizer
    params = state.model.named_parameters()
    for p in params.values():
        p.zero_grad()
    try:
        with T.Graph() as graph:
            loss = batch_loss(state, batch, captions)
        T.backward(loss, graph)
    except NonFiniteError as exc:
        raise NonFiniteError(f"step {state.step}: non-finite value in forward/backward: {exc}") from exc
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteError(f"step {state.step}: non-finite gradient in {name}")
    graph.reset()
    state.optimizer.step(state.trainable_parameters())
    state.model.arcface.renormalize()
    state.step += 1
    return loss.item(), state


def train(manifest: Manifest, captions: Captions | None, cfg: TrainConfig, log: IO[str] | None = None,
          state: TrainState | None = None) -> TrainState:
    """Run ``cfg.epochs`` epochs over the train split, logging one JSON line per epoch."""
    cfg.validate()
    records = manifest.split("train")
    if not records:
        raise ValidationError("manifest has no train records")
    if state is None:
        state = init_state(cfg, manifest.num_classes, captions if cfg.text_mode != "none" else None, records)
    log = sys.stdout if log is None else log
    for epoch in range(state.epoch, cfg.epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for batch in make_batches(records, cfg.batch_size, cfg.seed, epoch):
            loss, state = train_step(batch, state, captions=captions)
            total += loss * len(batch)
            count += len(batch)
        state.epoch = epoch + 1
        wall_ms = int(round((time.perf_counter() - t0) * 1000))
        log.write(json.dumps({"epoch": epoch, "mean_loss": total / count, "wall_ms": wall_ms}) + "\n")
        log.flush()
    if cfg.checkpoint_path:
        save_checkpoint(state, cfg.checkpoint_path)
    return state


# --- Checkpoints ----------------------------------------------------------
# LGC1 | u32 version | u32 len + config JSON | u32 count |
#   count x (u16 len + name, u32 rank, rank x u32 dims, f64 data) | u32 len + rng state JSON


def save_checkpoint(state: TrainState, path) -> None:
    header = {
        "config": state.config.model_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "num_classes": state.num_classes,
        "vocab": state.model.vocab,
        "extra_frozen": sorted(state.extra_frozen),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(blob)), blob]
    params = state.model.named_parameters()
    parts.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = params[name].data
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    rng_blob = json.dumps(state.rng.bit_generator.state, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(rng_blob)) + rng_blob)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.off, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated checkpoint at byte {self.off}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (n,) = r.unpack("<I")
    try:
        header = json.loads(r.take(n).decode("utf-8"))
        cfg = TrainConfig.from_dict(header["config"])
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: corrupt config blob ({exc})") from exc
    state = _build_state(cfg, header["num_classes"], header["vocab"])
    state.epoch, state.step = header["epoch"], header["step"]
    state.extra_frozen = set(header.get("extra_frozen", []))
    params = state.model.named_parameters()
    (count,) = r.unpack("<I")
    loaded, unknown = set(), []
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(dims)
        if name not in params:
            unknown.append(name)
            continue
        if params[name].shape != tuple(dims):
            raise FormatError(f"{path}: tensor {name} has shape {dims}, expected {params[name].shape}")
        params[name].assign(arr.astype(np.float64))
        loaded.add(name)
    if unknown:
        raise FormatError(f"{path}: unknown parameter names {unknown}")
    missing = sorted(set(params) - loaded)
    if missing:
        raise FormatError(f"{path}: missing parameters {missing}")
    (ln,) = r.unpack("<I")
    try:
        state.rng.bit_generator.state = json.loads(r.take(ln).decode("utf-8"))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt rng state ({exc})") from exc
    if r.off != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.off} trailing bytes after checkpoint")
    return state
