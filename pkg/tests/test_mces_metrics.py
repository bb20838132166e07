import json
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import brute_mces, chain, small_random_graph
from fpdecode.decoding import make_candidate
from fpdecode.mces import MCESResult, mces_distance, mces_lower_bound
from fpdecode.metrics import EvalReport, evaluate, evaluate_record, formula_distance, rerank
from fpdecode.molgraph import Formula
from fpdecode.selfies import encode
from fpdecode.synth import random_corpus


def _cand(vocab, g, log_prob):
    return make_candidate(vocab, vocab.ids(encode(g)), log_prob)


# -- formula distance


def test_formula_distance_examples():
    assert formula_distance("C10H12N2O", "C10H12N2O") == 0
    assert formula_distance("C6H12O6", "C6H6") == 12
    assert formula_distance("", "C2H6") == 8
    assert formula_distance(Formula(), Formula.parse("C2H6")) == 8


formulas = st.dictionaries(st.sampled_from(["C", "H", "N", "O", "S", "Cl"]), st.integers(1, 30), max_size=5).map(Formula)


@given(formulas, formulas, formulas)
def test_formula_distance_is_a_metric(a, b, c):
    assert formula_distance(a, b) >= 0
    assert formula_distance(a, b) == formula_distance(b, a)
    assert (formula_distance(a, b) == 0) == (a == b)
    assert formula_distance(a, c) <= formula_distance(a, b) + formula_distance(b, c)


# -- rerank


def test_distance_dominates_log_prob(vocab):
    near = _cand(vocab, chain(["C", "C", "O"]), -5.0)
    far = _cand(vocab, chain(["C", "C", "C"]), -0.1)
    out = rerank([far, near], "C2H6O")
    assert [c.formula_distance for c in out] == [0, 4]
    assert out[0].hash == near.hash


def test_log_prob_breaks_ties(vocab):
    a = _cand(vocab, chain(["C", "C", "O"]), -2.5)
    b = _cand(vocab, chain(["C", "O", "C"]), -1.0)
    out = rerank([a, b], "C2H6O")
    assert [c.log_prob for c in out] == [-1.0, -2.5]


def test_hash_is_the_final_key(vocab):
    a = _cand(vocab, chain(["C", "C", "O"]), -1.0)
    b = _cand(vocab, chain(["C", "O", "C"]), -1.0)
    out = rerank([a, b], "C2H6O")
    assert [c.hash for c in out] == sorted([a.hash, b.hash])


def test_single_candidate_unchanged(vocab):
    a = _cand(vocab, chain(["C"]), -0.3)
    out = rerank([a], "CH4")
    assert len(out) == 1 and out[0].hash == a.hash and out[0].formula_distance == 0


def test_rerank_ignores_input_order(vocab):
    graphs = random_corpus(25, 4, vocab, max_atoms=8)
    rng = np.random.default_rng(0)
    cands = [_cand(vocab, g, float(-rng.integers(1, 5))) for g in graphs]
    ref = [c.hash for c in rerank(cands, "C5H10O")]
    shuffler = random.Random(1)
    for _ in range(10):
        shuffler.shuffle(cands)
        assert [c.hash for c in rerank(cands, "C5H10O")] == ref


# -- MCES


def test_mces_ethane_propane(ethane, propane):
    assert mces_distance(ethane, propane) == MCESResult(1, True)


def test_mces_identical(benzene, rng):
    assert mces_distance(benzene, benzene.permute(rng.permutation(6))) == MCESResult(0, True)


def test_mces_requires_matching_elements_and_orders():
    assert mces_distance(chain(["C", "C"]), chain(["C", "N"])).value == 2
    assert mces_distance(chain(["C", "C"]), chain(["C", "C"], [2])).value == 2


def test_mces_matches_brute_force(rng):
    for _ in range(120):
        g1, g2 = small_random_graph(rng), small_random_graph(rng)
        res = mces_distance(g1, g2, time_budget=None)
        assert res.exact
        assert res.value == brute_mces(g1, g2)


def test_mces_symmetric_and_bounded(rng):
    for _ in range(60):
        g1, g2 = small_random_graph(rng), small_random_graph(rng)
        a, b = mces_distance(g1, g2, time_budget=None), mces_distance(g2, g1, time_budget=None)
        assert a == b
        assert mces_lower_bound(g1, g2) <= a.value <= g1.num_bonds + g2.num_bonds


def test_mces_threshold_early_exit():
    g1 = chain(["C"] * 6)
    g2 = chain(["O", "N", "O"])
    res = mces_distance(g1, g2, threshold=1)
    assert not res.exact and res.value == mces_lower_bound(g1, g2) > 1


def test_mces_large_graphs_flagged(rng):
    big = chain(["C"] * 32)
    res = mces_distance(big, chain(["C"] * 33))
    assert not res.exact and res.value == mces_lower_bound(big, chain(["C"] * 33))


def test_mces_node_budget_flags_incumbent(rng):
    g1 = random_corpus(1, 8, max_atoms=20, min_atoms=18)[0]
    g2 = random_corpus(1, 9, max_atoms=20, min_atoms=18)[0]
    res = mces_distance(g1, g2, time_budget=None, node_budget=5)
    full = mces_distance(g1, g2, time_budget=None)
    assert res.value >= full.value
    assert full.exact
    if res.exact:
        assert res.value == full.value


# -- evaluation


def _toy_records(vocab):
    graphs = random_corpus(12, 13, vocab, max_atoms=9, min_atoms=3)
    targets, decoys = graphs[:3], graphs[3:]
    hit1 = [targets[0]] + decoys[:9]
    hit7 = decoys[:6] + [targets[1]] + decoys[6:9]
    miss = decoys[:9]
    cands = [[_cand(vocab, g, -float(i)) for i, g in enumerate(lst)] for lst in (hit1, hit7, miss)]
    return list(zip(targets, cands))


def test_toy_corpus_accuracy(vocab):
    report = evaluate(_toy_records(vocab), ks=(1, 10))
    assert report.accuracy[1] == pytest.approx(100 / 3)
    assert report.accuracy[10] == pytest.approx(200 / 3)
    assert [r.rank for r in report.records] == [1, 7, None]
    first = report.records[0]
    assert first.tanimoto[1] == 1.0 and first.mces[1] == 0


def test_topk_monotone(vocab):
    report = evaluate(_toy_records(vocab), ks=(1, 3, 10))
    for r in report.records:
        assert r.tanimoto[1] <= r.tanimoto[3] <= r.tanimoto[10]
        assert r.mces[1] >= r.mces[3] >= r.mces[10]
    assert report.accuracy[1] <= report.accuracy[3] <= report.accuracy[10]


def test_mces_thresholding_keeps_the_minimum(vocab, rng):
    """The running-best threshold never changes the reported Top-k minimum."""
    for target, cands in _toy_records(vocab):
        r = evaluate_record(target, cands, ks=(10,), time_budget=None)
        direct = min(mces_distance(target, c.graph, time_budget=None).value for c in cands[:10])
        assert r.mces[10] == direct


def test_no_candidates_penalty(ethane):
    r = evaluate_record(ethane, [], ks=(1, 10), mces_penalty=3)
    assert r.rank is None and r.tanimoto == {1: 0.0, 10: 0.0} and r.mces == {1: 4, 10: 4}


def test_report_serialises_and_prints(vocab):
    report = evaluate(_toy_records(vocab))
    doc = json.loads(json.dumps(report.to_json()))
    assert doc["accuracy"]["1"] == pytest.approx(100 / 3) and doc["n_records"] == 3
    table = report.table()
    assert "Acc@1 (%)" in table and "MCES@10" in table and "Tanimoto@10" in table and "33.33" in table


def test_empty_report():
    assert EvalReport.aggregate([], (1, 10)).accuracy == {1: 0.0, 10: 0.0}


def test_plain_graph_candidates(ethane, propane):
    r = evaluate_record(ethane, [propane, ethane], ks=(1, 2))
    assert r.rank == 2 and r.mces == {1: 1, 2: 0}
