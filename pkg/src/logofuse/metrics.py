"""Recall@k, NDCG@k and MAP@N with binary label-match relevance."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

from .data import ImageRecord
from .errors import ValidationError
from .retrieval import build_gallery, embed_batch, rank_indices


@dataclass
class JudgedRanking:
    query_label: int
    ranked_labels: list[int]
    num_relevant: int | None = None  # relevant items in the full ranking; counted from ranked_labels if None

    def __post_init__(self):
        if not self.ranked_labels:
            raise ValidationError("a judged ranking needs at least one entry")

    def relevance(self) -> list[bool]:
        return [lab == self.query_label for lab in self.ranked_labels]

    def total_relevant(self) -> int:
        if self.num_relevant is not None:
            return self.num_relevant
        return sum(self.relevance())


@dataclass
class MetricsReport:
    recall_at: dict[int, float] = field(default_factory=dict)
    ndcg_at: dict[int, float] = field(default_factory=dict)
    map_at: dict[int, float] = field(default_factory=dict)
    num_queries: int = 0

    def to_json(self) -> dict:
        return {
            "recall": {str(k): v for k, v in sorted(self.recall_at.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg_at.items())},
            "map": {str(k): v for k, v in sorted(self.map_at.items())},
            "num_queries": self.num_queries,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def recall_at_k(jr: JudgedRanking, k: int) -> float:
    if k < 1:
        raise ValidationError("k must be >= 1")
    return 1.0 if any(jr.relevance()[:k]) else 0.0


def dcg(rel: list[bool], k: int) -> float:
    total = 0.0
    for i, r in enumerate(rel[:k]):
        if r:
            total += 1.0 / math.log2(i + 2)
    return total


def ndcg_at_k(jr: JudgedRanking, k: int) -> float:
    if k < 1:
        raise ValidationError("k must be >= 1")
    ideal = min(k, jr.total_relevant())
    if ideal == 0:
        return 0.0
    return dcg(jr.relevance(), k) / dcg([True] * ideal, ideal)


def average_precision(jr: JudgedRanking, n: int) -> float:
    if n < 1:
        raise ValidationError("N must be >= 1")
    denom = min(n, jr.total_relevant())
    if denom == 0:
        return 0.0
    hits, total = 0, 0.0
    for i, r in enumerate(jr.relevance()[:n]):
        if r:
            hits += 1
            total += hits / (i + 1)
    return total / denom


map_at_n = average_precision


def corpus_mean(values: list[float]) -> float:
    total = 0.0
    for v in values:
        total += v
    return total / len(values) if values else 0.0


def aggregate(rankings: list[JudgedRanking], ks=(1, 5), ndcg_ks=(5,), map_ns=(100,)) -> MetricsReport:
    return MetricsReport(
        recall_at={k: corpus_mean([recall_at_k(jr, k) for jr in rankings]) for k in ks},
        ndcg_at={k: corpus_mean([ndcg_at_k(jr, k) for jr in rankings]) for k in ndcg_ks},
        map_at={n: corpus_mean([average_precision(jr, n) for jr in rankings]) for n in map_ns},
        num_queries=len(rankings),
    )


def judge(query_records: list[ImageRecord], query_emb, gallery, cutoff: int) -> list[JudgedRanking]:
    """Rank every query against the gallery, excluding the query's own id."""
    out = []
    gallery_labels = set(gallery.labels)
    missing = sorted({r.label for r in query_records} - gallery_labels)
    if missing:
        warnings.warn(f"query labels absent from the gallery: {missing[:10]}", stacklevel=3)
    for rec, q in zip(query_records, query_emb):
        idx = rank_indices(q, gallery, exclude=rec.id)
        if len(idx) == 0:
            continue
        labels = [gallery.labels[i] for i in idx]
        relevant = sum(1 for lab in labels if lab == rec.label)
        out.append(JudgedRanking(rec.label, labels[:cutoff], relevant))
    return out


def evaluate(queries: list[ImageRecord], gallery_records: list[ImageRecord], state,
             ks=(1, 5), ndcg_ks=(5,), map_ns=(100,)) -> MetricsReport:
    """Embed queries and gallery text-free, rank by cosine, aggregate the metrics."""
    if not queries or not gallery_records:
        raise ValidationError("evaluation needs non-empty query and gallery splits")
    gallery = build_gallery(gallery_records, state)
    emb = embed_batch(queries, state)
    cutoff = max([*ks, *ndcg_ks, *map_ns])
    return aggregate(judge(queries, emb, gallery, cutoff), ks, ndcg_ks, map_ns)
