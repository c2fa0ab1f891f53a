import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from logofuse.data import ImageRecord
from logofuse.metrics import JudgedRanking, aggregate, average_precision, dcg, judge, ndcg_at_k, recall_at_k
from logofuse.retrieval import Gallery


# Brute-force references, written straight from the definitions.

def ref_recall(labels, q, k):
    for lab in labels[:k]:
        if lab == q:
            return 1.0
    return 0.0


def ref_ndcg(labels, q, k, total):
    dcg = 0.0
    for i in range(min(k, len(labels))):
        if labels[i] == q:
            dcg += 1.0 / math.log2(i + 2)
    ideal = 0.0
    for i in range(min(k, total)):
        ideal += 1.0 / math.log2(i + 2)
    return dcg / ideal if ideal > 0 else 0.0


def ref_ap(labels, q, n, total):
    hits = 0
    acc = 0.0
    for i in range(min(n, len(labels))):
        if labels[i] == q:
            hits += 1
            acc += hits / (i + 1)
    denom = min(n, total)
    return acc / denom if denom else 0.0


def random_ranking(r):
    n = int(r.integers(1, 40))
    labels = [int(x) for x in r.integers(0, 4, size=n)]
    q = int(r.integers(0, 4))
    return labels, q


def test_hand_values():
    assert recall_at_k(JudgedRanking(1, [1, 0, 0]), 1) == 1.0
    assert recall_at_k(JudgedRanking(1, [0] * 5 + [1]), 5) == 0.0
    assert ndcg_at_k(JudgedRanking(1, [1, 0, 0, 0, 0]), 5) == 1.0
    assert abs(ndcg_at_k(JudgedRanking(1, [0, 1, 0, 0, 0]), 5) - 0.63093) < 1e-5
    assert ndcg_at_k(JudgedRanking(1, [0, 0, 0]), 5) == 0.0
    assert abs(average_precision(JudgedRanking(1, [1, 0, 1, 0]), 100) - 0.83333) < 1e-5
    assert average_precision(JudgedRanking(1, [1, 1, 1, 0, 0]), 100) == 1.0


def test_oracle_equivalence_bit_equal():
    r = np.random.default_rng(0)
    for _ in range(1000):
        labels, q = random_ranking(r)
        total = sum(1 for x in labels if x == q)
        jr = JudgedRanking(q, labels)
        for k in (1, 3, 5, 10):
            assert recall_at_k(jr, k) == ref_recall(labels, q, k)
            assert ndcg_at_k(jr, k) == ref_ndcg(labels, q, k, total)
        for n in (5, 100):
            assert average_precision(jr, n) == ref_ap(labels, q, n, total)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=30), st.integers(0, 3))
def test_bounds_and_monotonicity(labels, q):
    jr = JudgedRanking(q, labels)
    rel = jr.relevance()
    prev_r = prev_d = 0.0
    for k in range(1, len(labels) + 2):
        rk, nk, dk = recall_at_k(jr, k), ndcg_at_k(jr, k), dcg(rel, k)
        assert 0.0 <= rk <= 1.0 and 0.0 <= nk <= 1.0 + 1e-12
        assert rk >= prev_r and dk >= prev_d
        prev_r, prev_d = rk, dk
    assert 0.0 <= average_precision(jr, 100) <= 1.0


def test_ndcg_is_not_monotone_in_k():
    # The ideal DCG grows with k too, so a hit at rank 1 followed by a miss
    # scores 1.0 at k=1 and less at k=2 when a second relevant item exists.
    jr = JudgedRanking(1, [1, 0, 1])
    assert ndcg_at_k(jr, 1) == 1.0
    assert ndcg_at_k(jr, 2) < 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=30), st.integers(0, 5), st.permutations(range(6)))
def test_label_permutation_invariance(labels, q, perm):
    a = JudgedRanking(q, labels)
    b = JudgedRanking(perm[q], [perm[x] for x in labels])
    for k in (1, 5):
        assert recall_at_k(a, k) == recall_at_k(b, k)
        assert ndcg_at_k(a, k) == ndcg_at_k(b, k)
    assert average_precision(a, 100) == average_precision(b, 100)


def test_single_query_perfect():
    rep = aggregate([JudgedRanking(3, [3])])
    assert rep.recall_at == {1: 1.0, 5: 1.0} and rep.ndcg_at == {5: 1.0} and rep.map_at == {100: 1.0}
    assert set(rep.to_json()) == {"recall", "ndcg", "map", "num_queries"}
    assert rep.to_json()["recall"] == {"1": 1.0, "5": 1.0}


def test_judge_excludes_self_and_warns_for_missing_class():
    mat = np.eye(3)
    gallery = Gallery(["a", "b", "c"], [0, 1, 1], mat)
    queries = [ImageRecord("a", 0, "query", features=(1.0, 0.0, 0.0)),
               ImageRecord("z", 7, "query", features=(0.0, 1.0, 0.0))]
    with pytest.warns(UserWarning, match="7"):
        jrs = judge(queries, mat[[0, 1]], gallery, 5)
    assert jrs[0].ranked_labels.count(0) == 0  # 'a' itself excluded
    assert recall_at_k(jrs[1], 5) == 0.0


def test_random_embeddings_recall_at_one_near_chance():
    vals = []
    for seed in range(5):
        r = np.random.default_rng(seed)
        n = 200
        labels = [i % 10 for i in range(n)]
        x = r.standard_normal((n, 16))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        gallery = Gallery([f"i{j:04d}" for j in range(n)], labels, x)
        recs = [ImageRecord(f"i{j:04d}", labels[j], "query", features=tuple(x[j])) for j in range(n)]
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            rep = aggregate(judge(recs, x, gallery, 5))
        vals.append(rep.recall_at[1])
    assert abs(np.mean(vals) - 0.1) < 0.05
