import numpy as np
import pytest

from sparsetok import autodiff as ad
from sparsetok.autodiff import Tape
from sparsetok.errors import CapacityError, ContractError
from sparsetok.rng import SeededRng
from sparsetok.selection import (KeepProbPredictor, SelectionMask, StrategyConfig,
                                 apply_ste, compute_keep_probabilities,
                                 deterministic_topk_select, gumbel_topk_select,
                                 inference_k_for, inference_rank_topk,
                                 keep_scores_from_values, ratio_controlled_select,
                                 reencode_positions, selection_loss, total_loss,
                                 uniform_fixed_select)


def scores_for(s_values, valid=None, tape=None):
    return keep_scores_from_values(tape or Tape(), np.asarray(s_values, float), valid)


def rigged_predictor(d, logit0, logit1):
    """Predictor whose output is the same pair of logits for every token."""
    p = KeepProbPredictor(d)
    p.b2.value = np.array([logit0, logit1], dtype=float)
    return p


class TestStrategyConfig:
    def test_topk_requires_k(self):
        with pytest.raises(ContractError):
            StrategyConfig("gumbel_topk", target_ratio=0.5)

    def test_ratio_requires_p_alone(self):
        with pytest.raises(ContractError):
            StrategyConfig("ratio_controlled", k=4, target_ratio=0.3)
        with pytest.raises(ContractError):
            StrategyConfig("ratio_controlled")

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            StrategyConfig("magic")

    def test_valid(self):
        StrategyConfig("deterministic_topk", k=3)
        StrategyConfig("ratio_controlled", target_ratio=0.3)


class TestKeepProbabilities:
    def test_symmetric_logits_give_half(self):
        with Tape() as tape:
            tokens = ad.constant(SeededRng(1).normals(12).reshape(4, 3))
            scores = compute_keep_probabilities(tape, tokens, rigged_predictor(3, 0.0, 0.0))
        assert np.allclose(scores.s.data, 0.5, atol=1e-15)

    def test_unit_logit_gap_closed_form(self):
        with Tape() as tape:
            tokens = ad.constant(np.zeros((2, 3)))
            scores = compute_keep_probabilities(tape, tokens, rigged_predictor(3, 1.0, 0.0))
        assert np.allclose(scores.s.data, 0.7310585786300049, atol=1e-12)

    def test_softmax_matches_sigmoid_identity(self):
        rng = SeededRng(9)
        pred = KeepProbPredictor(5).init(rng, stddev=0.7)
        with Tape() as tape:
            tokens = ad.constant(rng.normals(40).reshape(8, 5))
            scores = compute_keep_probabilities(tape, tokens, pred)
        gap = scores.logits.data[:, 0] - scores.logits.data[:, 1]
        sigmoid = 1.0 / (1.0 + np.exp(-gap))
        assert np.abs(scores.s.data - sigmoid).max() < 1e-12

    def test_padding_forces_zero(self):
        valid = np.array([True, True, False])
        with Tape() as tape:
            tokens = ad.constant(np.ones((3, 2)))
            scores = compute_keep_probabilities(tape, tokens, rigged_predictor(2, 2.0, 0.0),
                                                valid)
        assert scores.s.data[2] == 0.0
        assert scores.valid_count == 2


class TestGumbelTopK:
    def test_frozen_noise_orders_by_score(self, frozen_rng):
        mask = gumbel_topk_select(scores_for([0.9, 0.1, 0.5, 0.7]), 2, 0.1, frozen_rng)
        assert np.array_equal(mask.kept_indices, [0, 3])
        assert np.array_equal(mask.hard, [1, 0, 0, 1])

    def test_keep_all(self, frozen_rng):
        mask = gumbel_topk_select(scores_for([0.2, 0.4, 0.6]), 3, 0.1, frozen_rng)
        assert np.array_equal(mask.hard, [1, 1, 1])

    def test_k_out_of_range(self, frozen_rng):
        with pytest.raises(ContractError):
            gumbel_topk_select(scores_for([0.5, 0.5]), 3, 0.1, frozen_rng)
        with pytest.raises(ContractError):
            gumbel_topk_select(scores_for([0.5, 0.5]), 0, 0.1, frozen_rng)

    def test_soft_weights_sum_to_one_over_valid(self):
        valid = np.array([True] * 5 + [False] * 2)
        mask = gumbel_topk_select(scores_for([0.5] * 7, valid), 3, 0.5, SeededRng(3))
        assert abs(mask.soft.data.sum() - 1.0) < 1e-9
        assert np.all(mask.soft.data[5:] == 0.0)
        assert np.all(mask.kept_indices < 5)

    def test_k1_frequencies_match_normalized_scores(self):
        s = np.array([0.18, 0.27, 0.45])
        target = s / s.sum()
        scores = scores_for(s)
        rng = SeededRng(11)
        counts = np.zeros(3)
        n = 20_000
        for i in range(n):
            counts[gumbel_topk_select(scores, 1, 0.1, rng.split(i)).kept_indices[0]] += 1
        assert np.abs(counts / n - target).max() < 0.02

    def test_mask_invariants_random_inputs(self):
        rng = SeededRng(5)
        for trial in range(50):
            n = 2 + trial % 9
            k = 1 + trial % n
            s = np.clip(rng.uniforms(n), 0.05, 0.95)
            mask = gumbel_topk_select(scores_for(s), k, 0.3, rng.split(trial))
            assert mask.kept_count == k
            assert np.all(np.diff(mask.kept_indices) > 0)
            assert np.array_equal(np.where(mask.hard == 1)[0], mask.kept_indices)
            assert np.all((mask.soft.data >= 0) & (mask.soft.data <= 1))


class TestRatioControlled:
    def test_symmetric_noise_is_strictly_dropped(self, frozen_rng):
        mask = ratio_controlled_select(scores_for([0.5, 0.5]), 1.0, frozen_rng)
        assert np.allclose(mask.soft.data, 0.5)
        assert mask.kept_count == 0  # strict > 0.5

    def test_frozen_noise_keeps_above_half(self, frozen_rng):
        mask = ratio_controlled_select(scores_for([0.9, 0.1]), 1.0, frozen_rng)
        assert np.array_equal(mask.kept_indices, [0])
        assert np.allclose(mask.soft.data, [0.9, 0.1], atol=1e-9)

    def test_all_confident_all_kept(self, frozen_rng):
        mask = ratio_controlled_select(scores_for([0.999, 0.999, 0.999]), 1.0, frozen_rng)
        assert mask.kept_count == 3

    def test_padding_never_kept(self):
        valid = np.array([True, False, True])
        mask = ratio_controlled_select(scores_for([0.99, 0.99, 0.99], valid), 0.1,
                                       SeededRng(2))
        assert 1 not in mask.kept_indices
        assert mask.soft.data[1] == 0.0

    def test_threshold_matches_scores_with_zero_noise(self, frozen_rng):
        s = np.array([0.2, 0.500000001, 0.8, 0.4999999])
        mask = ratio_controlled_select(scores_for(s), 1.0, frozen_rng)
        assert np.array_equal(mask.kept_indices, [1, 2])


class TestDeterministicTopK:
    def test_direct_ordering(self):
        mask = deterministic_topk_select(scores_for([0.9, 0.1, 0.5, 0.7]), 2)
        assert np.array_equal(mask.kept_indices, [0, 3])

    def test_tie_breaks_to_lower_index(self):
        mask = deterministic_topk_select(scores_for([0.5, 0.5]), 1)
        assert np.array_equal(mask.kept_indices, [0])

    def test_identity_when_k_equals_n(self):
        mask = deterministic_topk_select(scores_for([0.3, 0.6, 0.2]), 3)
        assert np.array_equal(mask.kept_indices, [0, 1, 2])

    def test_argmax_invariance_under_positive_logit_scaling(self):
        rng = SeededRng(31)
        gaps = rng.normals(6)
        for scale in (0.5, 2.0, 17.0):
            with Tape() as tape:
                base = keep_scores_from_values(tape, 1 / (1 + np.exp(-gaps)))
                scaled = keep_scores_from_values(tape, 1 / (1 + np.exp(-scale * gaps)))
            m1 = deterministic_topk_select(base, 2)
            m2 = deterministic_topk_select(scaled, 2)
            assert np.array_equal(m1.kept_indices, m2.kept_indices)
            i1 = inference_rank_topk(base, 3)
            i2 = inference_rank_topk(scaled, 3)
            assert np.array_equal(i1.kept_indices, i2.kept_indices)


class TestUniformFixed:
    def test_full_coverage(self):
        assert np.array_equal(uniform_fixed_select(10, 10).kept_indices, np.arange(10))

    def test_single_point_is_first(self):
        assert np.array_equal(uniform_fixed_select(10, 1).kept_indices, [0])

    def test_rounded_grid(self):
        assert np.array_equal(uniform_fixed_select(8, 4).kept_indices, [0, 2, 5, 7])

    def test_backfill_keeps_exactly_k(self):
        for n in range(2, 20):
            for k in range(1, n + 1):
                mask = uniform_fixed_select(n, k)
                assert mask.kept_count == k
                assert np.all(np.diff(mask.kept_indices) > 0)

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            uniform_fixed_select(5, 6)


class TestApplySte:
    def test_hard_path_forwards_tokens_exactly(self, frozen_rng):
        tokens = ad.constant([[2.0], [3.0]])
        mask = SelectionMask(np.array([1.0, 0.0]), ad.constant([0.3, 0.7]),
                             np.array([0]), "test", 2)
        out = apply_ste(tokens, mask)
        assert out.shape == (1, 1)
        assert out.data[0, 0] == 2.0  # soft must not scale the forward value

    def test_empty_selection_yields_zero_rows(self):
        tokens = ad.constant(np.ones((3, 2)))
        mask = SelectionMask(np.zeros(3), ad.constant(np.zeros(3)),
                             np.array([], dtype=np.int64), "test", 3)
        assert apply_ste(tokens, mask).shape == (0, 2)

    def test_length_mismatch(self):
        tokens = ad.constant(np.ones((3, 2)))
        mask = SelectionMask(np.zeros(2), ad.constant(np.zeros(2)),
                             np.array([], dtype=np.int64), "test", 2)
        with pytest.raises(ContractError):
            apply_ste(tokens, mask)

    def test_gradient_flows_through_soft_not_hard(self):
        tokens_np = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        with Tape() as tape:
            s_leaf = tape.leaf(np.array([0.6, 0.3, 0.8]))
            mask = SelectionMask(np.array([1.0, 0.0, 1.0]), s_leaf,
                                 np.array([0, 2]), "test", 3)
            out = apply_ste(ad.constant(tokens_np), mask)
            loss = ad.mean_all(ad.square(out))
            tape.backward(loss)
            grad = tape.grad(s_leaf)
        # dropped token's soft weight gets no direct task gradient
        assert grad[1] == 0.0
        assert grad[0] != 0.0 and grad[2] != 0.0

    def test_ste_scorer_gradient_nonzero_hard_only_zero(self):
        """Criterion-7 wiring at unit scale: removing the soft path zeroes the
        scorer gradient; the straight-through path keeps it alive."""
        rng = SeededRng(4)
        pred = KeepProbPredictor(3).init(rng, stddev=0.3)
        tokens_np = rng.normals(12).reshape(4, 3)

        def run(soft_path: bool) -> float:
            with Tape() as tape:
                tokens = ad.constant(tokens_np)
                scores = compute_keep_probabilities(tape, tokens, pred)
                mask = gumbel_topk_select(scores, 2, 0.5, SeededRng(99))
                if soft_path:
                    kept = apply_ste(tokens, mask)
                else:
                    kept = ad.gather_rows(tokens, mask.kept_indices)
                loss = ad.mean_all(ad.square(kept))
                tape.backward(loss)
                return max(np.abs(tape.grad(p)).max() for p in pred.parameters())

        assert run(soft_path=False) == 0.0
        assert run(soft_path=True) > 0.0


class TestReencodePositions:
    def test_compacted_rows(self):
        table = ad.constant(np.arange(20.0).reshape(10, 2))
        mask = SelectionMask(np.zeros(8), ad.constant(np.zeros(8)),
                             np.array([2, 5, 7]), "test", 8)
        rows = reencode_positions(mask, table)
        assert np.array_equal(rows.data, table.data[:3])

    def test_identity_when_all_kept(self):
        table = ad.constant(np.arange(8.0).reshape(4, 2))
        mask = SelectionMask(np.ones(4), ad.constant(np.ones(4)),
                             np.arange(4), "test", 4)
        assert np.array_equal(reencode_positions(mask, table).data, table.data)

    def test_single_token_gets_row_zero(self):
        table = ad.constant(np.arange(8.0).reshape(4, 2))
        mask = SelectionMask(np.zeros(4), ad.constant(np.zeros(4)),
                             np.array([3]), "test", 4)
        assert np.array_equal(reencode_positions(mask, table).data, table.data[:1])

    def test_capacity_error(self):
        table = ad.constant(np.zeros((2, 2)))
        mask = SelectionMask(np.ones(3), ad.constant(np.ones(3)),
                             np.arange(3), "test", 3)
        with pytest.raises(CapacityError):
            reencode_positions(mask, table)


def mask_with_ratio(n, kept_count, soft_value=0.5):
    kept = np.arange(kept_count)
    hard = np.zeros(n)
    hard[kept] = 1.0
    return SelectionMask(hard, ad.constant(np.full(n, soft_value)), kept, "test", n)


class TestSelectionLoss:
    def test_exact_ratio_is_zero(self):
        loss = selection_loss([mask_with_ratio(10, 3)], 0.3)
        assert loss.item() == 0.0

    def test_all_kept_against_half(self):
        loss = selection_loss([mask_with_ratio(10, 10)], 0.5)
        assert abs(loss.item() - 0.25) < 1e-15

    def test_batch_mean(self):
        masks = [mask_with_ratio(10, 2), mask_with_ratio(10, 6)]
        assert abs(selection_loss(masks, 0.4).item() - 0.04) < 1e-15

    def test_permutation_invariance(self):
        rng = SeededRng(8)
        n = 12
        kept = np.sort(rng.choice(n, 5))
        soft = rng.uniforms(n)
        hard = np.zeros(n)
        hard[kept] = 1.0
        base = SelectionMask(hard, ad.constant(soft), kept, "t", n)
        perm = rng.permutation(n)
        inv = np.empty(n, dtype=np.int64)
        inv[perm] = np.arange(n)
        kept_p = np.sort(inv[kept])
        hard_p = np.zeros(n)
        hard_p[kept_p] = 1.0
        permuted = SelectionMask(hard_p, ad.constant(soft[perm]), kept_p, "t", n)
        assert selection_loss([base], 0.3).item() == selection_loss([permuted], 0.3).item()

    def test_gradient_uses_soft_path(self):
        with Tape() as tape:
            soft = tape.leaf(np.full(4, 0.5))
            mask = SelectionMask(np.array([1.0, 1.0, 0, 0]), soft,
                                 np.array([0, 1]), "t", 4)
            loss = selection_loss([mask], 0.25)
            tape.backward(loss)
            grad = tape.grad(soft)
        # value (0.25 - 0.5)^2; d/dsoft_i = -2 (0.25 - 0.5) / 4 = 0.125
        assert abs(loss.item() - 0.0625) < 1e-15
        assert np.allclose(grad, 0.125)

    def test_target_validation(self):
        with pytest.raises(ContractError):
            selection_loss([mask_with_ratio(4, 2)], 0.0)
        with pytest.raises(ContractError):
            selection_loss([], 0.5)


class TestTotalLoss:
    def test_lambda_zero_is_task_loss(self):
        total = total_loss(ad.constant([0.5]), ad.constant([0.25]), 0.0)
        assert total.item() == 0.5

    @pytest.mark.parametrize("lam,expected", [(1.0, 0.75), (10.0, 3.0)])
    def test_weighted_sum(self, lam, expected):
        assert total_loss(ad.constant([0.5]), ad.constant([0.25]), lam).item() == expected

    def test_negative_lambda(self):
        with pytest.raises(ContractError):
            total_loss(ad.constant([0.5]), ad.constant([0.25]), -1.0)


class TestInference:
    def test_repeated_calls_identical(self):
        scores = scores_for([0.1, 0.8, 0.3])
        m1 = inference_rank_topk(scores, 2)
        m2 = inference_rank_topk(scores, 2)
        assert np.array_equal(m1.kept_indices, m2.kept_indices)

    def test_direct_ordering(self):
        mask = inference_rank_topk(scores_for([0.1, 0.8, 0.3]), 2)
        assert np.array_equal(mask.kept_indices, [1, 2])

    def test_ratio_inference_k_rounding(self):
        cfg = StrategyConfig("ratio_controlled", target_ratio=0.3)
        assert inference_k_for(cfg, 10) == 3
        assert inference_k_for(cfg, 3) == 1  # clamped to at least one token
        cfg_k = StrategyConfig("gumbel_topk", k=5)
        assert inference_k_for(cfg_k, 32) == 5
