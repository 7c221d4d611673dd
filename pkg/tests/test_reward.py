"""Length penalty against a quadrature oracle, reward composition, advantages."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from deskrl.core import Category, ChainedRollout, CostFeatures, Group, Segment, TokenRecord
from deskrl.reward import (
    CostWeights,
    PenaltyConfig,
    RewardConfigError,
    assign_chain_advantage,
    composite_reward,
    evaluate_behaviors,
    group_advantages,
    group_training_sequences,
    length_penalty,
    penalty_input,
    rubric_chatty_final_message,
    rubric_single_tool_collapse,
    rubric_unfinished_todos,
)

# Oracle: the penalty is the antiderivative of marginal cost (1+kt)^(-q),
# so quadrature over the marginal cost must reproduce it. A handful of
# values is frozen outright so a regression cannot hide behind the oracle.
FROZEN = [
    # (x, k, q, value)
    (100.0, 0.01, 0.5, 200.0 * (math.sqrt(2.0) - 1.0)),
    (100.0, 0.01, 1.0, 100.0 * math.log(2.0)),
    (50.0, 0.1, 0.0, 50.0),
    (10.0, 0.2, 2.0, 10.0 / 3.0),
]


def quad_oracle(x, k, q):
    val, err = quad(
        lambda t: (1.0 + k * t) ** (-q), 0.0, x, limit=200, epsabs=1e-13, epsrel=1e-12
    )
    assert err < 1e-9 * max(1.0, abs(val))
    return val


class TestLengthPenalty:
    @pytest.mark.parametrize("x,k,q,expected", FROZEN)
    def test_frozen_values(self, x, k, q, expected):
        assert length_penalty(x, k, q) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("q", [0.0, 0.25, 0.5, 1.0, 1.5, 3.0])
    @pytest.mark.parametrize("k", [0.001, 0.01, 0.3])
    def test_matches_quadrature(self, q, k):
        for x in np.linspace(0.0, 400.0, 21):
            expected = quad_oracle(float(x), k, q)
            got = length_penalty(float(x), k, q)
            assert got == pytest.approx(expected, rel=1e-9, abs=1e-12)

    def test_zero_cost_at_zero(self):
        assert length_penalty(0.0, 0.01, 0.5) == 0.0

    def test_unit_marginal_cost_at_zero(self):
        # C'(0) = (1+0)^(-q) = 1 regardless of shape
        for q in (0.0, 0.5, 1.0, 2.0):
            h = 1e-6
            deriv = length_penalty(h, 0.01, q) / h
            assert deriv == pytest.approx(1.0, abs=1e-6)

    def test_q_one_window_uses_log_form(self):
        k, x = 0.01, 123.0
        exact = math.log1p(k * x) / k
        for q in (1.0, 1.0 + 1e-10, 1.0 - 1e-10):
            assert length_penalty(x, k, q) == pytest.approx(exact, rel=1e-9)

    def test_continuity_at_q_window_edge(self):
        k, x = 0.01, 123.0
        inside = length_penalty(x, k, 1.0)
        outside = length_penalty(x, k, 1.0 + 2e-9)
        assert inside == pytest.approx(outside, rel=1e-6)

    @given(
        st.floats(0.0, 1000.0),
        st.floats(1e-4, 1.0),
        st.floats(0.0, 4.0),
    )
    def test_nonnegative_and_increasing(self, x, k, q):
        v = length_penalty(x, k, q)
        assert v >= 0.0
        assert length_penalty(x + 1.0, k, q) >= v

    def test_higher_q_discounts_more(self):
        # stronger discounting means lower accumulated cost for long outputs
        assert length_penalty(300, 0.01, 1.5) < length_penalty(300, 0.01, 0.5)

    def test_invalid_parameters(self):
        with pytest.raises(RewardConfigError):
            length_penalty(10.0, -0.01, 0.5)
        with pytest.raises(RewardConfigError):
            length_penalty(10.0, 0.01, -0.5)
        with pytest.raises(RewardConfigError):
            # outside the domain of the antiderivative: 1 + k*x <= 0
            length_penalty(-200.0, 0.01, 0.5)


class TestPenaltyInput:
    def test_weighted_sum(self):
        f = CostFeatures(
            thinking_tokens=10,
            tool_call_tokens=4,
            tool_output_tokens=6,
            final_message_tokens=2,
            tool_call_count=2,
            turn_count=3,
        )
        w = CostWeights()
        assert penalty_input(f, w) == pytest.approx(10 + 4 + 6 + 2 + 20 + 75)

    def test_negative_weight_rejected(self):
        with pytest.raises(RewardConfigError):
            CostWeights(turn_count=-1.0)


def _tiny_chain(categories=(Category.THINKING,)):
    records = tuple(
        TokenRecord(
            token_id=10 + i,
            category=c,
            sampling_logprob=0.0 if c is Category.TOOL_OUTPUT else -1.0,
        )
        for i, c in enumerate(categories)
    )
    calls = sum(1 for c in categories if c is Category.TOOL_CALL)
    runs, prev = 0, False
    for c in categories:
        is_out = c is Category.TOOL_OUTPUT
        if is_out and not prev:
            runs += 1
        prev = is_out
    seg = Segment(
        prompt_tokens=(1, 12),
        records=records,
        tool_calls=calls // 2,
        turns=(1 if records else 0) + runs,
    )
    return ChainedRollout(segments=(seg,))


class TestCompositeReward:
    def test_total_arithmetic(self):
        cfg = PenaltyConfig(k=0.01, q=0.5, lam=0.002)
        features = CostFeatures(thinking_tokens=100)
        b = composite_reward(1.0, {"r1": -0.2, "r2": -0.1}, features, cfg)
        expected_penalty = length_penalty(100.0, 0.01, 0.5)
        assert b.length_penalty == pytest.approx(expected_penalty)
        assert b.total == pytest.approx(1.0 - 0.3 - 0.002 * expected_penalty)
        assert not b.zero_loss_weight

    def test_overlong_flag_follows_config(self):
        cfg = PenaltyConfig(mask_overlong=True)
        b = composite_reward(1.0, {}, CostFeatures(), cfg, overlong=True)
        assert b.zero_loss_weight
        cfg2 = PenaltyConfig(mask_overlong=False)
        b2 = composite_reward(1.0, {}, CostFeatures(), cfg2, overlong=True)
        assert not b2.zero_loss_weight

    def test_lambda_validation(self):
        with pytest.raises(RewardConfigError):
            PenaltyConfig(lam=-0.1)


class TestGroupAdvantages:
    def test_mean_centering(self):
        adv = group_advantages([1.0, 0.0, 0.5, 0.5])
        assert adv == pytest.approx([0.5, -0.5, 0.0, 0.0])

    def test_zero_sum(self):
        rng = np.random.Generator(np.random.Philox(5))
        for _ in range(200):
            rewards = rng.normal(size=rng.integers(2, 9)).tolist()
            adv = group_advantages(rewards)
            assert abs(sum(adv)) < 1e-12

    def test_all_equal_gives_zeros(self):
        assert group_advantages([0.7, 0.7, 0.7]) == pytest.approx([0.0, 0.0, 0.0])

    def test_single_rollout_rejected(self):
        with pytest.raises(ValueError):
            group_advantages([1.0])

    def test_no_variance_normalization(self):
        # doubling the spread doubles the advantages; a std-normalized
        # implementation would leave them unchanged
        a1 = group_advantages([0.0, 1.0])
        a2 = group_advantages([0.0, 2.0])
        assert a2 == pytest.approx([2 * v for v in a1])


class TestChainAdvantageAssignment:
    def test_weights_and_masks(self):
        chain = _tiny_chain(
            [
                Category.THINKING,
                Category.TOOL_CALL,
                Category.TOOL_CALL,
                Category.TOOL_OUTPUT,
                Category.FINAL_MESSAGE,
            ]
        )
        seqs = assign_chain_advantage(chain, 0.25)
        assert len(seqs) == 1
        s = seqs[0]
        n_prompt = 2
        assert s.weights[:n_prompt] == (0.0, 0.0)
        assert s.trainable[:n_prompt] == (False, False)
        gen = s.weights[n_prompt:]
        assert gen == (0.25, 0.25, 0.25, 0.0, 0.25)
        assert s.trainable[n_prompt:] == (True, True, True, False, True)

    def test_masked_rollout_zeroed(self):
        chain = _tiny_chain([Category.THINKING])
        cfg = PenaltyConfig(mask_overlong=True)
        scored = composite_reward(1.0, {}, CostFeatures(), cfg, overlong=True)
        import dataclasses

        masked = dataclasses.replace(chain, final_reward=scored)
        seqs = assign_chain_advantage(masked, 0.9)
        assert seqs[0].zero_loss_weight
        assert all(w == 0.0 for w in seqs[0].weights)

    def test_group_training_sequences_requires_advantages(self):
        chain = _tiny_chain()
        g = Group(prompt_id="a" * 32, rollouts=(chain, chain), rewards=(0.0, 1.0))
        with pytest.raises(ValueError):
            group_training_sequences(g)
        g2 = Group(
            prompt_id="a" * 32,
            rollouts=(chain, chain),
            rewards=(0.0, 1.0),
            advantages=(-0.5, 0.5),
        )
        seqs = group_training_sequences(g2)
        assert len(seqs) == 2
        assert seqs[0].weights[-1] == -0.5
        assert seqs[1].weights[-1] == 0.5


class TestRubrics:
    def test_unfinished_todos_caps_at_three(self):
        chain = _tiny_chain()
        assert rubric_unfinished_todos(chain, {"todos": []}) == 0.0
        assert rubric_unfinished_todos(chain, {"todos": [1]}) == pytest.approx(-0.2)
        assert rubric_unfinished_todos(chain, {"todos": [1, 2, 3, 4, 5]}) == pytest.approx(-0.6)

    def test_unfinished_todos_respects_done_flag(self):
        chain = _tiny_chain()
        todos = [{"item": "x", "done": True}, {"item": "y"}]
        assert rubric_unfinished_todos(chain, {"todos": todos}) == pytest.approx(-0.2)

    def test_single_tool_collapse(self):
        chain = _tiny_chain()
        log3 = {"tool_log": [{"tool": "lookup"}] * 3}
        assert rubric_single_tool_collapse(chain, log3) == pytest.approx(-0.1)
        mixed = {"tool_log": [{"tool": "lookup"}, {"tool": "submit"}, {"tool": "lookup"}]}
        assert rubric_single_tool_collapse(chain, mixed) == 0.0
        short = {"tool_log": [{"tool": "lookup"}] * 2}
        assert rubric_single_tool_collapse(chain, short) == 0.0

    def test_chatty_final_message(self):
        quiet = _tiny_chain([Category.FINAL_MESSAGE] * 6)
        chatty = _tiny_chain([Category.FINAL_MESSAGE] * 7)
        assert rubric_chatty_final_message(quiet, {}) == 0.0
        assert rubric_chatty_final_message(chatty, {}) == pytest.approx(-0.1)

    def test_evaluate_behaviors_unknown_name(self):
        with pytest.raises(RewardConfigError):
            evaluate_behaviors(["nope"], _tiny_chain(), {})

    def test_evaluate_behaviors_named_results(self):
        out = evaluate_behaviors(
            ["unfinished_todos", "chatty_final_message"], _tiny_chain(), {"todos": [1]}
        )
        assert out == {"unfinished_todos": pytest.approx(-0.2), "chatty_final_message": 0.0}
