"""Text-free inference: embeddings from the visual encoder alone, exact cosine top-k."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import ImageRecord
from .errors import ValidationError
from .tensor import Tensor

UNIT_TOL = 1e-6


@dataclass
class Gallery:
    ids: list[str]
    labels: list[int]
    matrix: np.ndarray  # [N, C], unit rows, ordered by id

    def __post_init__(self):
        if len(self.ids) != self.matrix.shape[0] or len(self.labels) != len(self.ids):
            raise ValidationError("gallery ids, labels and rows must have equal length")
        if len(self.ids) and (np.abs(np.linalg.norm(self.matrix, axis=1) - 1.0) > UNIT_TOL).any():
            raise ValidationError("gallery rows must be unit-norm")
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("gallery ids must be unique")
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        if order != list(range(len(self.ids))):
            self.ids = [self.ids[i] for i in order]
            self.labels = [self.labels[i] for i in order]
            self.matrix = self.matrix[order]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class RankedList:
    query_id: str
    entries: list[tuple[str, float]]

    def to_json(self) -> dict:
        return {"query_id": self.query_id, "ranking": [{"id": i, "score": s} for i, s in self.entries]}


def _check_source(rec: ImageRecord, state) -> None:
    expect_pixels = state.config.visual.mode == "trainable"
    if rec.has_pixels != expect_pixels:
        kind = "pixels" if expect_pixels else "features"
        raise ValidationError(
            f"record {rec.id!r} lacks {kind} required by the checkpoint's {state.config.visual.mode} visual encoder"
        )


def embed_batch(records: list[ImageRecord], state) -> np.ndarray:
    """``pool(E_v(x))`` for each record; no text or fusion operation runs."""
    for r in records:
        _check_source(r, state)
    if not records:
        return np.zeros((0, state.config.visual.embed_dim))
    with T.no_grad():
        return state.model.embed(np.stack([r.source_array() for r in records])).data


def embed_inference(rec: ImageRecord, state) -> Tensor:
    return Tensor(embed_batch([rec], state)[0])


def build_gallery(records: list[ImageRecord], state, chunk: int = 256) -> Gallery:
    if not records:
        raise ValidationError("cannot build a gallery from no records")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate gallery ids: {dup[:5]}")
    recs = sorted(records, key=lambda r: r.id)
    rows = [embed_batch(recs[i:i + chunk], state) for i in range(0, len(recs), chunk)]
    return Gallery([r.id for r in recs], [r.label for r in recs], np.concatenate(rows, axis=0))


def scores(q: np.ndarray, gallery: Gallery) -> np.ndarray:
    q = np.asarray(getattr(q, "data", q), dtype=np.float64).reshape(-1, 1)
    return np.clip(T.ordered_matmul(gallery.matrix, q)[:, 0], -1.0, 1.0)


def rank_indices(q, gallery: Gallery, k: int | None = None, exclude: str | None = None) -> np.ndarray:
    """Gallery row indices by descending score; ties in ascending id (rows are id-sorted)."""
    s = scores(q, gallery)
    order = np.argsort(-s, kind="stable")
    if exclude is not None:
        order = order[[gallery.ids[i] != exclude for i in order]]
    return order if k is None else order[:k]


def query_topk(q, gallery: Gallery, k: int, query_id: str = "", exclude: str | None = None) -> RankedList:
    if k < 1:
        raise ValidationError("k must be >= 1")
    if len(gallery) == 0:
        raise ValidationError("cannot query an empty gallery")
    qn = np.linalg.norm(np.asarray(getattr(q, "data", q)))
    if abs(qn - 1.0) > UNIT_TOL:
        raise ValidationError("query embedding must be unit-norm")
    s = scores(q, gallery)
    idx = rank_indices(q, gallery, k, exclude)
    return RankedList(query_id, [(gallery.ids[i], float(s[i])) for i in idx])


def write_rankings(path, rankings: list[RankedList]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rankings:
            fh.write(json.dumps(r.to_json()) + "\n")
