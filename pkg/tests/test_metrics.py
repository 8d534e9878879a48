import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitcap.metrics import bleu, build_ref_corpus, cider_d, corpus_cider

from oracles import oracle_bleu, oracle_cider_d

# three-sample corpus with two references each, used across the suite
REFS_A = ["a red dog chases the cat".split(), "the red dog chases a cat".split()]
REFS_B = ["a blue bird sits on a tree".split(), "the blue bird rests on the tree".split()]
REFS_C = ["a small boat floats on water".split(), "the small boat drifts on water".split()]
HAND_CORPUS = {"A": REFS_A, "B": REFS_B, "C": REFS_C}


def test_doc_freq_single_sample_corpus():
    corpus = build_ref_corpus({"x": ["a red dog chases the cat".split()]})
    assert corpus.size == 1
    assert corpus.doc_freq[("red",)] == 1
    assert corpus.doc_freq[("a", "red", "dog", "chases")] == 1
    assert ("green",) not in corpus.doc_freq


def test_doc_freq_unions_within_sample():
    # both refs of A contain "red": counted once for the sample
    corpus = build_ref_corpus(HAND_CORPUS)
    assert corpus.doc_freq[("red",)] == 1
    assert corpus.doc_freq[("the",)] == 3
    assert corpus.doc_freq[("on",)] == 2


def test_doc_freq_hand_counted_table():
    corpus = build_ref_corpus(
        {1: ["a red dog".split()], 2: ["a red cat".split()], 3: ["a blue bird".split()]},
        n_max=2,
    )
    assert corpus.doc_freq[("a",)] == 3
    assert corpus.doc_freq[("red",)] == 2
    assert corpus.doc_freq[("dog",)] == 1
    assert corpus.doc_freq[("a", "red")] == 2
    assert corpus.doc_freq[("red", "dog")] == 1


def test_build_rejects_empty():
    with pytest.raises(ValueError):
        build_ref_corpus({})
    with pytest.raises(ValueError):
        build_ref_corpus({"x": []})


def test_identical_single_reference_scores_ten():
    refs = {
        1: ["a red dog chases the cat".split()],
        2: ["a blue bird sits on a tree".split()],
        3: ["a small boat floats on water".split()],
    }
    corpus = build_ref_corpus(refs)
    score = cider_d("a red dog chases the cat".split(), 1, corpus)
    assert abs(score - 10.0) <= 1e-9


def test_disjoint_candidate_scores_zero():
    corpus = build_ref_corpus(HAND_CORPUS)
    assert cider_d("purple elephants fly backwards quietly".split(), "A", corpus) == 0.0


def test_cider_hand_formula_two_order_case():
    # closed form: only "dog" overlaps in unigrams, no bigram overlap, so the
    # score is 10/2 * L / (sqrt(2) * sqrt(R^2 + L^2)) with L=ln 3, R=ln 1.5
    corpus = build_ref_corpus(
        {1: ["a red dog".split()], 2: ["a red cat".split()], 3: ["a blue bird".split()]},
        n_max=2,
    )
    L, R = math.log(3), math.log(1.5)
    hand = 10.0 * (L / (math.sqrt(2.0) * math.sqrt(R * R + L * L))) / 2.0
    assert abs(cider_d("a blue dog".split(), 1, corpus) - hand) <= 1e-12


def test_cider_short_sentence_order_cap():
    # 2-token sentences have no 3/4-grams; identical candidate caps at 10*2/4
    corpus = build_ref_corpus({1: ["red dog".split()], 2: ["blue cat".split()]})
    assert cider_d("red dog".split(), 1, corpus) == 5.0


def test_cider_hand_corpus_frozen_value():
    corpus = build_ref_corpus(HAND_CORPUS)
    cand = "a red dog chases a cat".split()
    got = cider_d(cand, "A", corpus)
    assert abs(got - 7.0625) <= 1e-6  # frozen from the manual TF-IDF oracle
    assert abs(got - oracle_cider_d(cand, REFS_A, list(HAND_CORPUS.values()))) <= 1e-12


def test_cider_matches_oracle_on_random_candidates():
    corpus = build_ref_corpus(HAND_CORPUS)
    vocab = sorted({w for refs in HAND_CORPUS.values() for r in refs for w in r})
    rng = np.random.default_rng(11)
    for sid, refs in HAND_CORPUS.items():
        for _ in range(5):
            cand = list(rng.choice(vocab, size=rng.integers(1, 9)))
            got = cider_d(cand, sid, corpus)
            want = oracle_cider_d(cand, refs, list(HAND_CORPUS.values()))
            assert abs(got - want) <= 1e-9
            assert got >= 0.0


def test_cider_unknown_sample_id():
    corpus = build_ref_corpus(HAND_CORPUS)
    with pytest.raises(KeyError):
        cider_d(["a"], "missing", corpus)


def test_cider_d_equals_plain_variant_when_no_clip_no_penalty():
    # candidate is itself a reference: equal length and equal counts, so
    # clipping and the length penalty are both inert
    corpus = build_ref_corpus(HAND_CORPUS)
    cand = REFS_A[1]
    assert abs(cider_d(cand, "A", corpus) - cider_d(cand, "A", corpus, variant="cider")) <= 1e-12


def test_corpus_cider_is_mean():
    corpus = build_ref_corpus(HAND_CORPUS)
    cands = {"A": REFS_A[0], "B": REFS_B[0], "C": "a small boat".split()}
    per = [cider_d(c, sid, corpus) for sid, c in cands.items()]
    assert abs(corpus_cider(cands, corpus) - sum(per) / 3) <= 1e-12


# BLEU ----------------------------------------------------------------------


def test_bleu_identical_is_one():
    cands = [r[0] for r in HAND_CORPUS.values()]
    refs = [[r[0]] for r in HAND_CORPUS.values()]
    assert np.allclose(bleu(cands, refs), 1.0)


def test_bleu_disjoint_is_zero():
    scores = bleu(["x y z".split()], [["a b c".split()]])
    assert scores == [0.0, 0.0, 0.0, 0.0]


def test_bleu_clipping_classic_the_case():
    # "the the the the the the the" vs two refs: clipped unigram count is 2/7
    cand = "the the the the the the the".split()
    refs = [["the cat is on the mat".split(), "there is a cat on the mat".split()]]
    scores = bleu([cand], refs)
    assert abs(scores[0] - 2.0 / 7.0) <= 1e-12
    assert scores[1] == 0.0


def test_bleu_hand_computed_two_candidate_corpus():
    # clipped counts by hand: unigrams 5/6 + 3/3, bigrams 3/5 + 2/2,
    # candidate length 9 vs effective reference length 10
    cands = ["the cat sat on the mat".split(), "a dog runs".split()]
    refs = [["the cat is on the mat".split()], ["a dog runs fast".split()]]
    bp = math.exp(1.0 - 10.0 / 9.0)
    hand1 = bp * (8.0 / 9.0)
    hand2 = bp * math.sqrt((8.0 / 9.0) * (5.0 / 7.0))
    scores = bleu(cands, refs)
    assert abs(scores[0] - hand1) <= 1e-12
    assert abs(scores[1] - hand2) <= 1e-12
    assert scores == oracle_bleu(cands, refs)


def test_bleu_monotone_toward_reference_when_short():
    ref = [["the cat is on the mat".split()]]
    short = bleu(["the cat".split()], ref)[0]
    longer = bleu(["the cat is".split()], ref)[0]
    assert 0.0 <= short < longer <= 1.0


def test_bleu_rejects_mismatched_inputs():
    with pytest.raises(ValueError):
        bleu([], [])
    with pytest.raises(ValueError):
        bleu([["a"]], [])


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_metrics_bounded_and_deterministic(seed):
    rng = np.random.default_rng(seed)
    vocab = ["a", "b", "c", "d", "e"]
    refs = {
        i: [list(rng.choice(vocab, size=rng.integers(4, 9))) for _ in range(2)]
        for i in range(3)
    }
    corpus = build_ref_corpus(refs)
    cand = list(rng.choice(vocab, size=rng.integers(1, 9)))
    s1 = cider_d(cand, 0, corpus)
    s2 = cider_d(cand, 0, corpus)
    assert s1 == s2
    assert s1 >= 0.0
    b = bleu([cand], [refs[0]])
    assert all(0.0 <= x <= 1.0 for x in b)
