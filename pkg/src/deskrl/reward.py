"""Rewards: nonlinear length penalty, behavior rubrics, group advantages.

The length penalty is the closed form of the integral of a saturating
marginal cost (1 + k*x)**(-q): early tokens cost full price, later tokens
progressively less for q > 0. Advantages are plain group mean-centering;
there is no std normalization and no length standardization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Mapping

from .core import (
    Category,
    ChainedRollout,
    CostFeatures,
    Group,
    TrainingSequence,
    flatten_chain,
)

# Switching window around q=1 where the closed form degenerates to a log.
_Q_LOG_WINDOW = 1e-9


class RewardConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CostWeights:
    """Weight per CostFeatures field for the penalty input x."""

    thinking_tokens: float = 1.0
    tool_call_tokens: float = 1.0
    tool_output_tokens: float = 1.0
    final_message_tokens: float = 1.0
    tool_call_count: float = 10.0
    turn_count: float = 25.0

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise RewardConfigError(f"cost weight {f.name} must be >= 0")

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass(frozen=True)
class PenaltyConfig:
    """Length penalty shape (k, q), feature weights, lambda, overlong policy.

    ``lam`` is the penalty coefficient applied in the composite reward (the
    JSON key is "lambda"). ``mask_overlong`` keeps the historical flag:
    overlong rollouts are NOT masked by default, they are penalized instead;
    flipping it marks them zero-loss-weight.
    """

    k: float = 0.01
    q: float = 0.5
    weights: CostWeights = field(default_factory=CostWeights)
    lam: float = 0.002
    mask_overlong: bool = False
    max_sequence_tokens: int = 4096

    def __post_init__(self) -> None:
        if self.k <= 0:
            raise RewardConfigError(f"k must be > 0, got {self.k}")
        if self.q < 0:
            raise RewardConfigError(f"q must be >= 0, got {self.q}")
        if self.lam < 0:
            raise RewardConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.max_sequence_tokens <= 0:
            raise RewardConfigError("max_sequence_tokens must be > 0")


@dataclass(frozen=True)
class RewardBreakdown:
    """Composite reward with its parts kept visible.

    ``length_penalty`` is the unscaled curve value C(x) >= 0;
    total = task_reward + sum(behavior_rewards) - lambda * length_penalty.
    """

    task_reward: float
    behavior_rewards: dict[str, float]
    length_penalty: float
    total: float
    zero_loss_weight: bool = False

    def __post_init__(self) -> None:
        if self.length_penalty < 0:
            raise ValueError("length_penalty must be >= 0")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "task_reward": self.task_reward,
            "behavior_rewards": dict(self.behavior_rewards),
            "length_penalty": self.length_penalty,
            "total": self.total,
            "zero_loss_weight": self.zero_loss_weight,
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "RewardBreakdown":
        return cls(
            task_reward=d["task_reward"],
            behavior_rewards=dict(d["behavior_rewards"]),
            length_penalty=d["length_penalty"],
            total=d["total"],
            zero_loss_weight=d.get("zero_loss_weight", False),
        )


def length_penalty(x: float, k: float, q: float) -> float:
    """Accumulated cost of x weighted tokens under marginal cost (1+k*t)**(-q).

    Closed form ((1+k*x)**(1-q) - 1) / (k*(1-q)); at q=1 the limit is
    log(1+k*x)/k, taken explicitly inside a small window around 1 so the
    general branch never divides by ~0. C(0)=0 and C'(0)=1 for every
    admissible (k, q); q=0 degenerates to the identity.
    """

    if k <= 0:
        raise RewardConfigError(f"k must be > 0, got {k}")
    if q < 0:
        raise RewardConfigError(f"q must be >= 0, got {q}")
    if 1.0 + k * x <= 0:
        raise RewardConfigError(f"1 + k*x must be > 0, got {1.0 + k * x}")
    if abs(q - 1.0) < _Q_LOG_WINDOW:
        return math.log1p(k * x) / k
    return (math.pow(1.0 + k * x, 1.0 - q) - 1.0) / (k * (1.0 - q))


def penalty_input(features: CostFeatures, weights: CostWeights) -> float:
    """Weighted combination of the six cost features."""

    w = weights.as_dict()
    f = features.as_dict()
    return math.fsum(w[name] * f[name] for name in f)


def composite_reward(
    task_reward: float,
    behavior_rewards: Mapping[str, float],
    features: CostFeatures,
    cfg: PenaltyConfig,
    overlong: bool = False,
) -> RewardBreakdown:
    """Combine task reward, behavior rubric rewards and the length penalty.

    Overlong rollouts keep their recorded reward either way; with
    mask_overlong set they are additionally flagged zero-loss-weight so the
    trainer drops their tokens.
    """

    x = penalty_input(features, cfg.weights)
    penalty = length_penalty(x, cfg.k, cfg.q)
    total = task_reward + math.fsum(behavior_rewards.values()) - cfg.lam * penalty
    return RewardBreakdown(
        task_reward=float(task_reward),
        behavior_rewards=dict(behavior_rewards),
        length_penalty=penalty,
        total=total,
        zero_loss_weight=bool(overlong and cfg.mask_overlong),
    )


def group_advantages(rewards: list[float] | tuple[float, ...]) -> list[float]:
    """Advantage of each rollout relative to its own group: r - mean(r).

    Nothing else: no variance normalization, no length terms. Needs at
    least two rollouts to carry information.
    """

    if len(rewards) < 2:
        raise ValueError(f"a group needs >= 2 rewards, got {len(rewards)}")
    mean = math.fsum(rewards) / len(rewards)
    return [float(r) - mean for r in rewards]


def assign_chain_advantage(r: ChainedRollout, advantage: float) -> list[TrainingSequence]:
    """Spread one scalar advantage over every trainable token of the chain.

    One TrainingSequence per segment. Summary tokens are trainable and carry
    the same weight; tool output carries weight 0. A rollout flagged
    zero-loss-weight keeps its structure but all weights are zeroed.
    """

    segments = flatten_chain(r)
    masked = bool(r.final_reward is not None and r.final_reward.zero_loss_weight)
    out: list[TrainingSequence] = []
    for seg in segments:
        tokens = list(seg.prompt_tokens)
        weights = [0.0] * len(tokens)
        logprobs = [0.0] * len(tokens)
        trainable = [False] * len(tokens)
        traces: list[Any] = [None] * len(tokens)
        versions = [0] * len(tokens)
        for rec in seg.records:
            tokens.append(rec.token_id)
            is_trainable = rec.trainable
            weights.append(advantage if (is_trainable and not masked) else 0.0)
            logprobs.append(rec.sampling_logprob)
            trainable.append(is_trainable)
            traces.append(rec.router_trace)
            versions.append(rec.policy_version)
        out.append(
            TrainingSequence(
                tokens=tuple(tokens),
                weights=tuple(weights),
                sampling_logprobs=tuple(logprobs),
                trainable=tuple(trainable),
                traces=tuple(traces),
                policy_versions=tuple(versions),
                zero_loss_weight=masked,
            )
        )
    return out


def group_training_sequences(g: Group) -> list[TrainingSequence]:
    """All training sequences of a scored group (advantages required)."""

    if g.advantages is None:
        raise ValueError("group has no advantages")
    seqs: list[TrainingSequence] = []
    for rollout, adv in zip(g.rollouts, g.advantages):
        seqs.extend(assign_chain_advantage(rollout, adv))
    return seqs


# ---------------------------------------------------------------------------
# behavior rubrics
#
# Each rubric maps (rollout, final env task state) -> float. They are small
# and local on purpose; the interesting contract is that they are named,
# pluggable, and show up in RewardBreakdown.behavior_rewards by name.

Rubric = Callable[[ChainedRollout, Mapping[str, Any]], float]


def rubric_unfinished_todos(r: ChainedRollout, env_state: Mapping[str, Any]) -> float:
    """Penalize leaving todo items open at the end of the rollout."""

    todos = env_state.get("todos", [])
    # entries are either bare items (always open) or dicts with a done flag
    open_items = sum(
        1 for t in todos if not (isinstance(t, Mapping) and t.get("done", False))
    )
    return -0.2 * min(open_items, 3)


def rubric_single_tool_collapse(r: ChainedRollout, env_state: Mapping[str, Any]) -> float:
    """Penalize leaning on one tool for everything (3+ calls, all same)."""

    names = [entry["tool"] for entry in env_state.get("tool_log", [])]
    if len(names) >= 3 and len(set(names)) == 1:
        return -0.1
    return 0.0


def rubric_chatty_final_message(r: ChainedRollout, env_state: Mapping[str, Any]) -> float:
    """Penalize final messages that ramble past a small budget."""

    n_final = sum(1 for rec in r.iter_records() if rec.category is Category.FINAL_MESSAGE)
    return -0.1 if n_final > 6 else 0.0


RUBRICS: dict[str, Rubric] = {
    "unfinished_todos": rubric_unfinished_todos,
    "single_tool_collapse": rubric_single_tool_collapse,
    "chatty_final_message": rubric_chatty_final_message,
}


def evaluate_behaviors(
    names: list[str], r: ChainedRollout, env_state: Mapping[str, Any]
) -> dict[str, float]:
    """Run the named rubrics; unknown names are a configuration error."""

    out: dict[str, float] = {}
    for name in names:
        if name not in RUBRICS:
            raise RewardConfigError(f"unknown behavior rubric: {name!r}")
        out[name] = float(RUBRICS[name](r, env_state))
    return out
