"""Metric tests against independent brute-force reference implementations.

The oracles here deliberately use different machinery than the library:
naive list-based n-gram scans, a memoized recursive LCS, and hand-built
bags, so agreement is meaningful.
"""

from __future__ import annotations

import math
from collections import Counter
from functools import lru_cache

import numpy as np
import pytest

from groundedgen.metrics import (MetricReport, bleu, evaluate_corpus,
                                 normalize_tokens, report_kv, report_table,
                                 rouge_l, unigram_f1)

# ---------------------------------------------------------------------------
# oracles


def oracle_bleu(cands, refs, max_n):
    log_precisions = []
    for n in range(1, max_n + 1):
        match = 0
        total = 0
        for cand, ref in zip(cands, refs):
            cgrams = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
            rgrams = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
            for g in set(cgrams):
                match += min(cgrams.count(g), rgrams.count(g))
            total += len(cgrams)
        if match == 0 or total == 0:
            return 0.0
        log_precisions.append(math.log(match / total))
    c = sum(len(x) for x in cands)
    r = sum(len(x) for x in refs)
    if c == 0:
        return 0.0
    bp = math.exp(1 - r / c) if c < r else 1.0
    return bp * math.exp(sum(log_precisions) / max_n)


def oracle_lcs(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == 0 or j == 0:
            return 0
        if a[i - 1] == b[j - 1]:
            return go(i - 1, j - 1) + 1
        return max(go(i - 1, j), go(i, j - 1))

    return go(len(a), len(b))


def oracle_rouge_l(cand, ref, beta=1.2):
    lcs = oracle_lcs(cand, ref)
    if lcs == 0 or not cand:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta * beta) * p * r / (r + beta * beta * p)


def oracle_f1(cand, ref):
    if not cand:
        return 0.0
    bag_c, bag_r = {}, {}
    for t in cand:
        bag_c[t] = bag_c.get(t, 0) + 1
    for t in ref:
        bag_r[t] = bag_r.get(t, 0) + 1
    overlap = sum(min(n, bag_r.get(t, 0)) for t, n in bag_c.items())
    if overlap == 0:
        return 0.0
    p, r = overlap / len(cand), overlap / len(ref)
    return 2 * p * r / (p + r)


def random_pair(rng, vocab=8):
    n1, n2 = int(rng.integers(1, 12)), int(rng.integers(1, 12))
    toks = [f"w{i}" for i in range(vocab)]
    return ([toks[int(i)] for i in rng.integers(0, vocab, n1)],
            [toks[int(i)] for i in rng.integers(0, vocab, n2)])


# ---------------------------------------------------------------------------
# identities and hand-worked cases


def test_identity_scores_one_everywhere():
    seqs = [["a", "b", "c", "d"], ["x", "y"]]
    for n in range(1, 5):
        assert bleu(seqs, seqs, max_n=n) == pytest.approx(1.0)
    for s in seqs:
        assert rouge_l(s, s) == pytest.approx(1.0)
        assert unigram_f1(s, s) == pytest.approx(1.0)


def test_disjoint_scores_zero():
    cands = [["a", "b"], ["c"]]
    refs = [["x", "y"], ["z"]]
    assert bleu(cands, refs) == 0.0
    assert rouge_l(cands[0], refs[0]) == 0.0
    assert unigram_f1(cands[0], refs[0]) == 0.0


def test_bleu_clipped_precision_hand_case():
    # candidate "the the the the" vs reference "the cat": clipped unigram
    # matches = min(4, 1) = 1 over 4, and no brevity penalty since c > r
    cand = ["the", "the", "the", "the"]
    ref = ["the", "cat"]
    expected = (1 / 4) * 1.0
    assert bleu([cand], [ref], max_n=1) == pytest.approx(expected, abs=1e-12)
    assert oracle_bleu([cand], [ref], 1) == pytest.approx(expected, abs=1e-12)


def test_bleu_brevity_penalty_applies_to_short_candidates():
    cand = [["the", "cat"]]
    ref = [["the", "cat", "sat", "down"]]
    expected = 1.0 * math.exp(1 - 4 / 2)
    assert bleu(cand, ref, max_n=1) == pytest.approx(expected, abs=1e-12)


def test_rouge_l_hand_case():
    # "a c d" vs "a b c d": LCS 3, P=1, R=0.75, beta=1.2
    got = rouge_l(["a", "c", "d"], ["a", "b", "c", "d"])
    expected = (1 + 1.44) * 1.0 * 0.75 / (0.75 + 1.44 * 1.0)
    assert got == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.8356164383561644)


def test_unigram_f1_hand_case():
    assert unigram_f1(["a", "b", "c"], ["a", "b", "d"]) == pytest.approx(2 / 3)


def test_unigram_f1_multiplicity():
    # "a a" vs "a": one clipped match, P=0.5, R=1
    assert unigram_f1(["a", "a"], ["a"]) == pytest.approx(2 / 3)


def test_empty_candidate_scores_zero_not_error():
    assert rouge_l([], ["a"]) == 0.0
    assert unigram_f1([], ["a"]) == 0.0


def test_empty_reference_rejected():
    with pytest.raises(ValueError):
        rouge_l(["a"], [])
    with pytest.raises(ValueError):
        unigram_f1(["a"], [])


def test_empty_corpus_rejected():
    with pytest.raises(ValueError, match="empty"):
        bleu([], [])


def test_mismatched_corpus_rejected():
    with pytest.raises(ValueError, match="mismatch"):
        bleu([["a"]], [])


# ---------------------------------------------------------------------------
# brute-force agreement


def test_metrics_match_oracles_on_100_random_pairs():
    rng = np.random.default_rng(100)
    pairs = [random_pair(rng) for _ in range(100)]
    cands = [p[0] for p in pairs]
    refs = [p[1] for p in pairs]
    for n in range(1, 5):
        assert abs(bleu(cands, refs, max_n=n) - oracle_bleu(cands, refs, n)) < 1e-9
    for cand, ref in pairs:
        assert abs(rouge_l(cand, ref) - oracle_rouge_l(cand, ref)) < 1e-9
        assert abs(unigram_f1(cand, ref) - oracle_f1(cand, ref)) < 1e-9


def test_bleu_order_k_uses_exactly_orders_up_to_k():
    rng = np.random.default_rng(101)
    pairs = [random_pair(rng, vocab=4) for _ in range(20)]
    cands = [p[0] for p in pairs]
    refs = [p[1] for p in pairs]
    for k in range(1, 5):
        assert bleu(cands, refs, max_n=k) == pytest.approx(oracle_bleu(cands, refs, k), abs=1e-12)


def test_corpus_scores_permutation_invariant():
    rng = np.random.default_rng(102)
    pairs = [random_pair(rng) for _ in range(30)]
    cands = [" ".join(p[0]) for p in pairs]
    refs = [" ".join(p[1]) for p in pairs]
    base = evaluate_corpus(cands, refs)
    perm = list(rng.permutation(len(pairs)))
    mixed = evaluate_corpus([cands[i] for i in perm], [refs[i] for i in perm])
    assert base.as_dict() == pytest.approx(mixed.as_dict())


def test_scores_stay_in_unit_interval():
    rng = np.random.default_rng(103)
    for _ in range(50):
        cand, ref = random_pair(rng, vocab=3)
        for value in (bleu([cand], [ref], smooth=True), rouge_l(cand, ref),
                      unigram_f1(cand, ref)):
            assert 0.0 <= value <= 1.0


# ---------------------------------------------------------------------------
# normalization and reporting


def test_normalize_strips_punctuation_and_lowercases():
    assert normalize_tokens("The cat, sat!") == ["the", "cat", "sat"]


def test_evaluate_corpus_identity_is_all_ones():
    texts = ["the attr of thing is value .", "hello there"]
    rep = evaluate_corpus(texts, texts)
    assert rep.as_dict() == pytest.approx(
        {k: 1.0 for k in ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "unigram_f1")})
    assert rep.size == 2


def test_report_table_column_order_and_absent_meteor():
    rep = MetricReport(0.5, 0.4, 0.3, 0.2, 0.45, 0.6, size=3)
    table = report_table([("concat", rep)])
    header = table.splitlines()[0]
    assert header.split() == ["Model", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4",
                              "Rouge-L", "Meteor", "F1"]
    row = table.splitlines()[2].split()
    assert row == ["concat", "50.00", "40.00", "30.00", "20.00", "45.00", "-", "60.00"]


def test_report_kv_marks_meteor_absent():
    rep = MetricReport(0.5, 0.4, 0.3, 0.2, 0.45, 0.6, size=3)
    kv = report_kv(rep, prefix="test.")
    assert kv["test.meteor"] == "absent"
    assert float(kv["test.bleu4"]) == 0.2
