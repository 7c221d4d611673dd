"""Domain types shared by every other module.

The vocabulary here is deliberately small:

* ``TokenRecord``    one sampled or injected token with its bookkeeping
* ``Segment``        a contiguous stretch of context (prompt + records)
* ``ChainedRollout`` segments linked by model-written summaries
* ``Group``          G rollouts of one prompt, with rewards and advantages
* ``CostFeatures``   the six counts the length penalty is built from
* ``TrainingSequence`` a flattened segment annotated with per-token loss weights
* ``RouterTrace``    routing decisions recorded at sampling time for replay

Everything is an immutable value object after construction; all sequence
fields are tuples. Canonical JSON uses the field names exactly as declared
here, one object per line for JSONL streams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, Iterable, Mapping


class Category(str, Enum):
    """Token categories assigned by the sampling engine."""

    THINKING = "thinking"
    TOOL_CALL = "tool_call"
    TOOL_OUTPUT = "tool_output"
    FINAL_MESSAGE = "final_message"
    SUMMARY = "summary"


class ChainError(ValueError):
    """A ChainedRollout that violates its linkage or monotonicity rules."""


class GroupError(ValueError):
    """A Group that is malformed (wrong size, mixed prompts, bad advantages)."""


class TraceSource(str, Enum):
    """How the expert selection at a position came to be."""

    FRESH = "fresh"
    REPLAYED = "replayed"
    REPLACED = "replaced"


@dataclass(frozen=True)
class RouterTrace:
    """Routing record for one position: normalized gate scores over all
    experts, the selected expert indices, and whether the selection was
    fresh, replayed verbatim, or partially replaced by the plausibility
    filter."""

    gate_scores: tuple[float, ...]
    selected: tuple[int, ...]
    source: TraceSource = TraceSource.FRESH

    def __post_init__(self) -> None:
        object.__setattr__(self, "gate_scores", tuple(float(g) for g in self.gate_scores))
        object.__setattr__(self, "selected", tuple(int(e) for e in self.selected))
        object.__setattr__(self, "source", TraceSource(self.source))
        if len(set(self.selected)) != len(self.selected):
            raise ValueError("selected expert indices must be distinct")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "gate_scores": list(self.gate_scores),
            "selected": list(self.selected),
            "source": self.source.value,
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "RouterTrace":
        return cls(
            gate_scores=tuple(d["gate_scores"]),
            selected=tuple(d["selected"]),
            source=TraceSource(d["source"]),
        )


@dataclass(frozen=True)
class TokenRecord:
    """One token as it entered the context.

    ``sampling_logprob`` is the log-probability (nats, float64) of the token
    under the policy version that sampled it; injected tool output carries no
    sampling contribution and is pinned to 0.0 and non-trainable.
    """

    token_id: int
    category: Category
    sampling_logprob: float = 0.0
    policy_version: int = 0
    router_trace: RouterTrace | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "category", Category(self.category))
        object.__setattr__(self, "sampling_logprob", float(self.sampling_logprob))
        if self.token_id < 0:
            raise ValueError(f"token_id must be >= 0, got {self.token_id}")
        if self.sampling_logprob > 0.0:
            raise ValueError(f"sampling_logprob must be <= 0, got {self.sampling_logprob}")
        if self.policy_version < 0:
            raise ValueError(f"policy_version must be >= 0, got {self.policy_version}")
        if self.category is Category.TOOL_OUTPUT and self.sampling_logprob != 0.0:
            raise ValueError("tool_output records carry no sampling_logprob")

    @property
    def trainable(self) -> bool:
        return self.category is not Category.TOOL_OUTPUT

    def to_json_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "token_id": self.token_id,
            "category": self.category.value,
            "sampling_logprob": self.sampling_logprob,
            "policy_version": self.policy_version,
        }
        if self.router_trace is not None:
            d["router_trace"] = self.router_trace.to_json_dict()
        return d

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "TokenRecord":
        trace = d.get("router_trace")
        return cls(
            token_id=d["token_id"],
            category=Category(d["category"]),
            sampling_logprob=d["sampling_logprob"],
            policy_version=d["policy_version"],
            router_trace=RouterTrace.from_json_dict(trace) if trace is not None else None,
        )


def _tool_call_record_count(records: Iterable[TokenRecord]) -> int:
    return sum(1 for r in records if r.category is Category.TOOL_CALL)


def _tool_output_runs(records: Iterable[TokenRecord]) -> int:
    runs = 0
    prev_out = False
    for r in records:
        is_out = r.category is Category.TOOL_OUTPUT
        if is_out and not prev_out:
            runs += 1
        prev_out = is_out
    return runs


@dataclass(frozen=True)
class Segment:
    """One context window: a prompt plus the records generated inside it.

    ``tool_calls`` counts tool invocations (each contributes exactly two
    tool_call records: the tool token and its argument). ``turns`` counts
    generation stretches: 1 plus the number of contiguous tool_output runs.
    """

    prompt_tokens: tuple[int, ...]
    records: tuple[TokenRecord, ...]
    tool_calls: int
    turns: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompt_tokens", tuple(int(t) for t in self.prompt_tokens))
        object.__setattr__(self, "records", tuple(self.records))
        n_call_records = _tool_call_record_count(self.records)
        if n_call_records != 2 * self.tool_calls:
            raise ValueError(
                f"tool_calls={self.tool_calls} inconsistent with "
                f"{n_call_records} tool_call records (expected {2 * self.tool_calls})"
            )
        expected_turns = (1 if self.records else 0) + _tool_output_runs(self.records)
        if self.turns != expected_turns:
            raise ValueError(f"turns={self.turns} inconsistent with records (expected {expected_turns})")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "prompt_tokens": list(self.prompt_tokens),
            "records": [r.to_json_dict() for r in self.records],
            "tool_calls": self.tool_calls,
            "turns": self.turns,
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "Segment":
        return cls(
            prompt_tokens=tuple(d["prompt_tokens"]),
            records=tuple(TokenRecord.from_json_dict(r) for r in d["records"]),
            tool_calls=d["tool_calls"],
            turns=d["turns"],
        )


@dataclass(frozen=True)
class ChainedRollout:
    """Segments linked by self-written summaries.

    There is exactly one summary per segment boundary, and every segment
    after the first begins with the preceding summary in its prompt.
    Policy versions are nondecreasing over the concatenated records.
    ``final_reward`` is attached by the verifier (a reward.RewardBreakdown);
    it stays None until scoring.
    """

    segments: tuple[Segment, ...]
    summaries: tuple[tuple[int, ...], ...] = ()
    env_snapshot_ref: str | None = None
    final_reward: Any | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "summaries", tuple(tuple(int(t) for t in s) for s in self.summaries))
        n_seg = len(self.segments)
        expected = max(0, n_seg - 1)
        if len(self.summaries) != expected:
            raise ChainError(
                f"chain with {n_seg} segments needs {expected} summaries, got {len(self.summaries)}"
            )
        for i, summary in enumerate(self.summaries):
            if len(summary) == 0:
                raise ChainError(f"summary {i} is empty")
            nxt = self.segments[i + 1].prompt_tokens
            if nxt[: len(summary)] != summary:
                raise ChainError(f"segment {i + 1} does not begin with summary {i} in its prompt")
        last_version = -1
        for seg in self.segments:
            for rec in seg.records:
                if rec.policy_version < last_version:
                    raise ChainError(
                        f"policy_version decreased: {rec.policy_version} after {last_version}"
                    )
                last_version = rec.policy_version

    def iter_records(self) -> Iterable[TokenRecord]:
        for seg in self.segments:
            yield from seg.records

    def generated_tokens(self) -> int:
        return sum(len(seg.records) for seg in self.segments)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "segments": [s.to_json_dict() for s in self.segments],
            "summaries": [list(s) for s in self.summaries],
            "env_snapshot_ref": self.env_snapshot_ref,
            "final_reward": self.final_reward.to_json_dict() if self.final_reward is not None else None,
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "ChainedRollout":
        reward = d.get("final_reward")
        if reward is not None:
            # Late import: reward depends on core, not the other way around.
            from .reward import RewardBreakdown

            reward = RewardBreakdown.from_json_dict(reward)
        return cls(
            segments=tuple(Segment.from_json_dict(s) for s in d["segments"]),
            summaries=tuple(tuple(s) for s in d["summaries"]),
            env_snapshot_ref=d.get("env_snapshot_ref"),
            final_reward=reward,
        )


@dataclass(frozen=True)
class CostFeatures:
    """Per-rollout counts feeding the length penalty. All non-negative."""

    thinking_tokens: int = 0
    tool_call_tokens: int = 0
    tool_output_tokens: int = 0
    final_message_tokens: int = 0
    tool_call_count: int = 0
    turn_count: int = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0:
                raise ValueError(f"{f.name} must be >= 0, got {v}")

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_json_dict(self) -> dict[str, Any]:
        return self.as_dict()

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "CostFeatures":
        return cls(**d)


@dataclass(frozen=True)
class Group:
    """G rollouts of one prompt with rewards and (optionally) advantages.

    ``prompt_id`` is a 128-bit random identifier rendered as 32 hex chars;
    uniqueness is enforced by the reconciler's registry, not here.
    ``policy_versions`` is the set of versions observed across all rollouts.
    """

    prompt_id: str
    rollouts: tuple[ChainedRollout, ...]
    rewards: tuple[float, ...]
    advantages: tuple[float, ...] | None = None
    policy_versions: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "rollouts", tuple(self.rollouts))
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
        if self.advantages is not None:
            object.__setattr__(self, "advantages", tuple(float(a) for a in self.advantages))
        object.__setattr__(self, "policy_versions", tuple(sorted(set(int(v) for v in self.policy_versions))))
        if len(self.rewards) != len(self.rollouts):
            raise GroupError(f"{len(self.rewards)} rewards for {len(self.rollouts)} rollouts")
        if self.advantages is not None and len(self.advantages) != len(self.rollouts):
            raise GroupError(f"{len(self.advantages)} advantages for {len(self.rollouts)} rollouts")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "prompt_id": self.prompt_id,
            "rollouts": [r.to_json_dict() for r in self.rollouts],
            "rewards": list(self.rewards),
            "advantages": list(self.advantages) if self.advantages is not None else None,
            "policy_versions": list(self.policy_versions),
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "Group":
        return cls(
            prompt_id=d["prompt_id"],
            rollouts=tuple(ChainedRollout.from_json_dict(r) for r in d["rollouts"]),
            rewards=tuple(d["rewards"]),
            advantages=tuple(d["advantages"]) if d.get("advantages") is not None else None,
            policy_versions=tuple(d.get("policy_versions", ())),
        )


@dataclass(frozen=True)
class TrainingSequence:
    """One flattened segment ready for the policy loss.

    Index t of every array refers to tokens[t]. Prompt positions carry weight
    0, are non-trainable and have no trace. ``zero_loss_weight`` marks
    rollouts whose tokens must contribute nothing to loss or gradient.
    """

    tokens: tuple[int, ...]
    weights: tuple[float, ...]
    sampling_logprobs: tuple[float, ...]
    trainable: tuple[bool, ...]
    traces: tuple[RouterTrace | None, ...]
    policy_versions: tuple[int, ...]
    zero_loss_weight: bool = False

    def __post_init__(self) -> None:
        n = len(self.tokens)
        for name in ("weights", "sampling_logprobs", "trainable", "traces", "policy_versions"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        if n and self.trainable[0]:
            raise ValueError("tokens[0] cannot be trainable (nothing predicts it)")


# ---------------------------------------------------------------------------
# operations


def rollout_cost_features(
    r: ChainedRollout, summary_bucket: Category = Category.FINAL_MESSAGE
) -> CostFeatures:
    """Count tokens per category plus tool calls and turns over the chain.

    Summary tokens fold into ``summary_bucket`` (final_message by default).
    An empty rollout yields all-zero features.
    """

    if summary_bucket is Category.SUMMARY:
        raise ValueError("summary tokens must fold into a non-summary bucket")
    counts = {c: 0 for c in Category}
    for rec in r.iter_records():
        counts[rec.category] += 1
    counts[summary_bucket] += counts.pop(Category.SUMMARY)
    return CostFeatures(
        thinking_tokens=counts[Category.THINKING],
        tool_call_tokens=counts[Category.TOOL_CALL],
        tool_output_tokens=counts[Category.TOOL_OUTPUT],
        final_message_tokens=counts[Category.FINAL_MESSAGE],
        tool_call_count=sum(seg.tool_calls for seg in r.segments),
        turn_count=sum(seg.turns for seg in r.segments),
    )


def flatten_chain(r: ChainedRollout) -> list[Segment]:
    """Return the chain's segments in order after validating linkage.

    Linkage is validated at construction time too; this re-checks so callers
    holding a chain built by from_json_dict or by hand get a hard error
    before training on it.
    """

    for i, summary in enumerate(r.summaries):
        nxt = r.segments[i + 1].prompt_tokens
        if nxt[: len(summary)] != summary:
            raise ChainError(f"segment {i + 1} does not begin with summary {i}")
    return list(r.segments)


def validate_group(g: Group, group_size: int) -> None:
    """Check group size and shared prompt lineage.

    Rollouts of one prompt all start from the same first-segment prompt;
    mixing prompts in a group is a hard error.
    """

    if len(g.rollouts) != group_size:
        raise GroupError(f"group has {len(g.rollouts)} rollouts, expected {group_size}")
    if g.advantages is not None and len(g.advantages) != group_size:
        raise GroupError("advantages do not match group size")
    prompts = {r.segments[0].prompt_tokens for r in g.rollouts if r.segments}
    if len(prompts) > 1:
        raise GroupError("rollouts come from more than one prompt")


def rollout_to_json(r: ChainedRollout) -> str:
    return json.dumps(r.to_json_dict())


def rollout_from_json(line: str) -> ChainedRollout:
    return ChainedRollout.from_json_dict(json.loads(line))


def group_to_json(g: Group) -> str:
    return json.dumps(g.to_json_dict())


def group_from_json(line: str) -> Group:
    return Group.from_json_dict(json.loads(line))


def write_jsonl(path: str, items: Iterable[Any], to_json_dict=lambda x: x.to_json_dict()) -> int:
    """Append-free canonical JSONL writer; returns the number of lines."""

    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(to_json_dict(item)))
            fh.write("\n")
            n += 1
    return n
