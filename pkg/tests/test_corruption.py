import math

import numpy as np
import pytest

from fpdecode.corruption import (
    BucketStats,
    CorruptionConfig,
    build_buckets,
    clipped_poisson_mean,
    corrupt,
    corrupt_detailed,
    derive_weights,
    draw_budget,
    estimate_bucket_stats,
    load_stats,
    packaged_stats_path,
    record_rng,
    save_stats,
    stats_from_json,
    validate_boundaries,
    weighted_sample,
)
from fpdecode.molgraph import Fingerprint

TWO = ((0.0, 0.5), (0.5, 1.0))


def _stats(eta_minus, eta_plus, nbits=64, eps=0.05, alpha=1.0):
    k = len(eta_minus)
    bounds = tuple((r / k, (r + 1) / k) for r in range(k))
    assignment = np.arange(nbits) % k
    s = BucketStats(bounds, assignment, (None,) * k, (None,) * k, tuple(eta_minus), tuple(eta_plus))
    return derive_weights(s, eps, alpha)


# -- buckets


def test_bucket_examples():
    b = build_buckets([0.03, 0.0, 0.2, 1.0, 0.0099, 0.05])
    assert b.tolist() == [1, 0, 3, 3, 0, 2]


def test_bucket_sizes_from_implied_histogram():
    freq = np.concatenate([np.full(3422, 0.001), np.full(527, 0.02), np.full(122, 0.1), np.full(25, 0.5)])
    assert np.bincount(build_buckets(freq)).tolist() == [3422, 527, 122, 25]


@pytest.mark.parametrize("bad", [((0.0, 0.5), (0.4, 1.0)), ((0.0, 0.5), (0.6, 1.0)), ((0.1, 1.0),), ((0.0, 0.9),), ()])
def test_bad_boundaries(bad):
    with pytest.raises(ValueError):
        validate_boundaries(bad)


def test_bucket_rejects_bad_frequencies():
    with pytest.raises(ValueError):
        build_buckets([0.5, 1.2])


# -- error tendencies


def test_hand_tally():
    assignment = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    pairs = [
        (Fingerprint.from_indices([0, 1, 4], 8), Fingerprint.from_indices([0, 2, 4, 5], 8)),
        (Fingerprint.from_indices([2], 8), Fingerprint.from_indices([2], 8)),
    ]
    s = estimate_bucket_stats(pairs, assignment, TWO)
    # bucket 0: TP 2, FP 1, FN 1; bucket 1: TP 1, FP 0, FN 1
    assert s.precision == pytest.approx((2 / 3, 1.0))
    assert s.recall == pytest.approx((2 / 3, 0.5))
    assert s.eta_plus == pytest.approx((1 / 3, 0.0))
    assert s.eta_minus == pytest.approx((1 / 3, 0.5))
    assert s.flags == ()


def test_perfect_predictor(rng):
    assignment = build_buckets(rng.random(256) * 0.3)
    fps = [Fingerprint.from_array(rng.random(256) < 0.3) for _ in range(50)]
    s = estimate_bucket_stats([(f, f) for f in fps], assignment)
    assert s.eta_plus == (0.0,) * 4 and s.eta_minus == (0.0,) * 4


def test_undefined_precision_and_recall_flagged():
    assignment = np.array([0, 0, 1, 1])
    pairs = [(Fingerprint.from_indices([0], 4), Fingerprint.from_indices([0], 4))]
    s = estimate_bucket_stats(pairs, assignment, TWO)
    assert s.eta_plus[1] == 1.0 and s.eta_minus[1] == 1.0
    assert set(s.flags) == {"precision_undefined:bucket1", "recall_undefined:bucket1"}


# -- weights


def test_weights_hand_case():
    s = _stats((0.8, 0.6, 0.4, 0.2), (0.5,) * 4)
    assert s.w_minus == pytest.approx((1.05, 0.71667, 0.38333, 0.05), abs=1e-4)
    assert s.w_plus == (0.05,) * 4


def test_alpha_zero_gives_floor():
    s = _stats((0.8, 0.6, 0.4, 0.2), (0.1, 0.9, 0.3, 0.2), alpha=0.0)
    assert s.w_minus == (0.05,) * 4 and s.w_plus == (0.05,) * 4


def test_weights_bounded():
    s = _stats((0.3, 0.9, 0.1, 0.5), (0.2, 0.2, 0.7, 0.1), eps=0.1, alpha=2.0)
    for w in s.w_minus + s.w_plus:
        assert 0.1 <= w <= 2.1 + 1e-12
    with pytest.raises(ValueError):
        derive_weights(s, eps=0.0)


def test_table3_ingestion_exact():
    s = load_stats(packaged_stats_path(), frequencies=np.zeros(4096))
    assert s.eta_plus == (0.802, 0.686, 0.572, 0.308)
    # recall is not published; eta_minus falls back to eta_plus and is flagged
    assert s.eta_minus == s.eta_plus
    assert any(f.startswith("recall_missing") for f in s.flags)


def test_stats_file_round_trip(tmp_path):
    s = _stats((0.8, 0.6, 0.4, 0.2), (0.1, 0.2, 0.3, 0.4))
    save_stats(s, tmp_path / "s.json")
    again = load_stats(tmp_path / "s.json")
    assert np.array_equal(again.assignment, s.assignment)
    assert again.w_minus == pytest.approx(s.w_minus) and again.eta_plus == pytest.approx(s.eta_plus)


def test_stats_needs_membership():
    with pytest.raises(ValueError):
        stats_from_json({"buckets": [{"precision": 0.5}] * 4})


# -- sampler


def test_clipped_poisson_mean_matches_direct_sum():
    lam, lo, hi = 4.0, 1, 8
    direct = sum(min(max(k, lo), hi) * math.exp(-lam) * lam**k / math.factorial(k) for k in range(100))
    assert clipped_poisson_mean(lam, lo, hi) == pytest.approx(direct, rel=1e-12)


def test_budget_mean(rng):
    cfg = CorruptionConfig(k_max=8)
    assert cfg.rate == 4
    draws = [draw_budget(cfg, rng) for _ in range(20000)]
    assert min(draws) >= 1 and max(draws) <= 8
    assert np.mean(draws) == pytest.approx(clipped_poisson_mean(4, 1, 8), rel=0.02)


def test_p_corr_zero_is_identity(rng):
    s = _stats((0.8, 0.6, 0.4, 0.2), (0.1, 0.2, 0.3, 0.4))
    cfg = CorruptionConfig(p_corr=0.0)
    for _ in range(200):
        f = Fingerprint.from_array(rng.random(64) < 0.3)
        assert corrupt(f, s, cfg, rng) == f


def test_all_zero_unchanged(rng):
    s = _stats((0.8, 0.6, 0.4, 0.2), (0.1, 0.2, 0.3, 0.4))
    out = corrupt_detailed(Fingerprint(0, 64), s, CorruptionConfig(p_corr=1.0), rng)
    assert out.gate and out.k_eff == 0 and out.fingerprint == Fingerprint(0, 64)


def test_popcount_preserved_and_swap_disjoint(rng):
    s = _stats((0.8, 0.6, 0.4, 0.2), (0.1, 0.2, 0.3, 0.4))
    cfg = CorruptionConfig(p_corr=1.0)
    for _ in range(500):
        f = Fingerprint.from_array(rng.random(64) < rng.random())
        o = corrupt_detailed(f, s, cfg, rng)
        assert o.fingerprint.popcount() == f.popcount()
        assert len(o.dropped) == len(o.added) == o.k_eff
        assert set(o.dropped) <= set(f.indices()) and not set(o.added) & set(f.indices())


def test_same_seed_same_output():
    s = _stats((0.8, 0.6, 0.4, 0.2), (0.1, 0.2, 0.3, 0.4))
    f = Fingerprint.from_indices(range(0, 64, 3), 64)
    a = [corrupt(f, s, CorruptionConfig(p_corr=0.7), record_rng(5, i)) for i in range(50)]
    b = [corrupt(f, s, CorruptionConfig(p_corr=0.7), record_rng(5, i)) for i in range(50)]
    assert a == b
    assert len(set(a)) > 1


def test_weighted_sample_distinct_and_sorted(rng):
    items = np.arange(10, 30)
    picks = weighted_sample(items, np.linspace(0.1, 2, 20), 7, rng)
    assert len(set(picks.tolist())) == 7 and list(picks) == sorted(picks)
    assert weighted_sample(items, np.ones(20), 30, rng).tolist() == items.tolist()


def test_config_validation():
    for kw in ({"p_corr": 1.5}, {"k_min": 0}, {"k_min": 5, "k_max": 4}, {"lam": 0}, {"eps": 0}, {"alpha": -1}):
        with pytest.raises(ValueError):
            CorruptionConfig(**kw)
