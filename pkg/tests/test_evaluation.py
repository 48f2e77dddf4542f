import numpy as np
import pytest
import util
from hypothesis import given, settings
from hypothesis import strategies as st

from hiphop.data import Session
from hiphop.evaluation import (
    ABLATION_VARIANTS,
    apply_variant,
    baseline_item_knn,
    baseline_pop,
    baseline_s_pop,
    compute_metrics,
    metrics_table,
    rank_target,
    ranks_from_scores,
    run_ablation,
)
from hiphop.model import ModelConfig
from hiphop.training import TrainConfig


def ex(items, target, key="s"):
    return Session(items=list(items), target=target, session_key=key)


class TestRankTarget:
    def test_unique_max_ranks_first(self):
        assert rank_target([0.1, 0.9, 0.3], target=1) == 1

    def test_tie_counts_against_target(self):
        assert rank_target([0.5, 0.5, 0.1], target=1) == 2

    def test_matches_sort_oracle_on_random_vectors(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            scores = rng.standard_normal(10)
            target = int(rng.integers(10))
            assert rank_target(scores, target) == util.brute_force_rank(scores.tolist(), target)

    @given(st.lists(st.integers(0, 5), min_size=2, max_size=8), st.data())
    @settings(max_examples=200, deadline=None)
    def test_matches_sort_oracle_with_ties(self, scores, data):
        target = data.draw(st.integers(0, len(scores) - 1))
        assert rank_target(scores, target) == util.brute_force_rank(scores, target)

    def test_vectorized_ranks_agree(self):
        rng = np.random.default_rng(1)
        scores = rng.standard_normal((50, 12))
        targets = rng.integers(0, 12, size=50)
        rows = ranks_from_scores(scores, targets)
        assert rows.tolist() == [rank_target(scores[i], targets[i]) for i in range(50)]


class TestComputeMetrics:
    def test_single_hit_at_rank_three(self):
        m = compute_metrics([3], k=20)
        assert m.hr_at_k == 100.0
        assert m.mrr_at_k == pytest.approx(100.0 / 3)

    def test_beyond_cutoff(self):
        m = compute_metrics([21], k=20)
        assert m.hr_at_k == 0.0 and m.mrr_at_k == 0.0

    def test_mixed_ranks(self):
        m = compute_metrics([1, 2, 40], k=20)
        assert m.hr_at_k == pytest.approx(200.0 / 3)
        assert m.mrr_at_k == pytest.approx(50.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compute_metrics([])

    def test_mrr_never_exceeds_hr(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            ranks = rng.integers(1, 40, size=30)
            m = compute_metrics(ranks, k=20)
            assert 0.0 <= m.mrr_at_k <= m.hr_at_k <= 100.0


class TestBaselines:
    def test_pop_ranks_frequent_item_first(self):
        train = [ex([0, 0], 0, "s1"), ex([1], 0, "s2")]  # sequences [0,0,0] and [1,0]
        test = [ex([1], 0)]
        m = baseline_pop(train, test, n_items=2, k=20)
        assert m.hr_at_k == 100.0 and m.mrr_at_k == 100.0

    def test_spop_prefers_session_counts(self):
        train = [ex([0, 1], 2, "s1")]
        test_x = [ex([0, 0, 1], 0)]
        test_y = [ex([0, 0, 1], 1)]
        rank_x = baseline_s_pop(train, test_x, n_items=3).mrr_at_k
        rank_y = baseline_s_pop(train, test_y, n_items=3).mrr_at_k
        assert rank_x == 100.0          # twice in the session -> rank 1
        assert rank_y == pytest.approx(50.0)  # once -> rank 2

    def test_item_knn_scores_cooccurring_items(self):
        # items 3 and 4 appear together in every session containing either
        train = [ex([3, 4, i], i + 5, f"s{i}") for i in range(3)]
        test = [ex([0, 3], 4)]
        m = baseline_item_knn(train, test, n_items=10)
        assert m.mrr_at_k == 100.0  # 4 is the most similar item to 3

    def test_baselines_deterministic(self):
        train, test, n_items = util.successor_benchmark(n_items=30, n_train=40, n_test=10, seed=4)
        for fn in (baseline_pop, baseline_s_pop, baseline_item_knn):
            a, b = fn(train, test, n_items), fn(train, test, n_items)
            assert (a.hr_at_k, a.mrr_at_k) == (b.hr_at_k, b.mrr_at_k)


class TestAblationConfig:
    def test_contrastive_variant_zeroes_lambda(self):
        mc, tc, name = apply_variant(ModelConfig(), TrainConfig(), "w/o Contrastive")
        assert tc.lam == 0.0 and name == "w/o Contrastive"

    def test_dash_alias_accepted(self):
        _, tc, name = apply_variant(ModelConfig(), TrainConfig(), "w/o-Contrastive")
        assert tc.lam == 0.0 and name == "w/o Contrastive"

    def test_multi_intent_variant(self):
        mc, _, _ = apply_variant(ModelConfig(), TrainConfig(), "w/o MultiIntent")
        assert mc.use_multi_intent is False

    def test_intersim_disables_both_paths(self):
        mc, _, _ = apply_variant(ModelConfig(), TrainConfig(), "w/o InterSim")
        assert mc.use_global_sim is False and mc.use_local_sim is False

    def test_each_variant_touches_original_configs_copy(self):
        base_mc, base_tc = ModelConfig(), TrainConfig()
        for variant in ABLATION_VARIANTS:
            apply_variant(base_mc, base_tc, variant)
        assert base_mc == ModelConfig() and base_tc == TrainConfig()

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="unknown ablation variant"):
            apply_variant(ModelConfig(), TrainConfig(), "w/o Magic")


def test_run_ablation_empty_variant_list_is_full_model_only():
    train, test, n_items = util.successor_benchmark(n_items=15, n_train=40, n_test=8, seed=6,
                                                    min_len=3, max_len=4)
    mc = ModelConfig(d=8, num_intents=2, local_window=2, top_k_sessions=2, dropout=0.0)
    tc = TrainConfig(batch_size=32, epochs_max=1, n_neg=2, seed=0)
    rows = run_ablation(train, test, test, n_items, mc, tc, variants=())
    assert len(rows) == 1 and rows[0][0] == "full"
    table = metrics_table(rows)
    assert "| full" in table
    csv = metrics_table(rows, fmt="csv")
    assert csv.splitlines()[0] == "variant,hr_at_k,mrr_at_k,k,n_examples"
    assert csv.splitlines()[1].startswith("full,")
