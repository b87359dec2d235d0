"""Attention cost model and benchmark records."""

from fractions import Fraction

import pytest

from volmark.bench import attention_cost, format_records, format_table, run_bench


def _brute_score_macs(tokens, keys_per_query, channels):
    # q.k and the value-weighted sum each cost one multiply-add per (query, key, channel)
    return sum(2 * channels for _ in range(tokens) for _ in range(keys_per_query))


@pytest.mark.parametrize("dims,region,k", [((8, 8, 8), (2, 2, 2), 1), ((8, 8, 4), (4, 4, 2), 2),
                                           ((4, 4, 4), (2, 2, 2), 8)])
def test_score_counts_match_brute_force(dims, region, k):
    c = attention_cost(dims, region, k, channels=8, heads=2)
    assert c.dense_score == _brute_score_macs(c.tokens, c.tokens, 8)
    assert c.fine_score == _brute_score_macs(c.tokens, k * c.region_tokens, 8)


def test_score_ratio_is_ks_over_t():
    for dims in [(8, 8, 8), (16, 16, 8)]:
        for region in [(2, 2, 2), (4, 4, 4)]:
            for k in (1, 2, 4):
                c = attention_cost(dims, region, k, 16, 2)
                assert c.score_ratio == Fraction(k * c.region_tokens, c.tokens)


def test_full_region_single_k_equals_dense_fine_part():
    c = attention_cost((4, 4, 4), (4, 4, 4), 1, 8, 2)
    assert c.fine_total == c.dense_total and c.score_ratio == 1


def test_untiled_region_rejected():
    with pytest.raises(ValueError, match="tile"):
        attention_cost((6, 6, 6), (4, 4, 4), 1, 8, 2)


def test_sweep_skips_invalid_combinations():
    recs = run_bench([(8, 8, 8)], [(4, 4, 4), (3, 3, 3)], [1, 8, 9], timing=False)
    assert [(r.region, r.k) for r in recs] == [((4, 4, 4), 1), ((4, 4, 4), 8)]


def test_analytic_records_are_deterministic():
    a = format_records(run_bench([(8, 8, 8)], [(2, 2, 2)], [1, 2], timing=False), timing=False)
    b = format_records(run_bench([(8, 8, 8)], [(2, 2, 2)], [1, 2], timing=False), timing=False)
    assert a == b and "dense_ms" not in a


def test_timed_record_and_table():
    recs = run_bench([(4, 4, 4)], [(2, 2, 2)], [2], channels=8, repeats=1)
    assert recs[0].dense_ms > 0 and recs[0].routed_ms > 0
    assert "speedup" in format_table(recs)
    assert "dense_ms" in format_records(recs)
