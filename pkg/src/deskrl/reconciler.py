"""Sample lifecycle management: slots, staleness-aware dispatch, durable
group checkpoints, the single-epoch audit trail, and curriculum weighting.

A slot walks Pending -> Generating -> AwaitingVerification -> Scored ->
GroupReady -> Packed -> Trained; Failed is reachable from every non-terminal
state and Retry sends it back to Pending. The transition table is total data
(TRANSITIONS), so tests can model-check it by brute force.

Checkpoints and the audit log are append-only JSONL with a per-record
sha256, written through a temp-file-free append (each line is self-
delimiting, so a torn tail line is detected and skipped on load).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import AbstractSet, Iterable, Mapping, Sequence

from .core import Category, Group, group_from_json, group_to_json

THINKING_WEIGHT = 0.1
_MIN_SIGNAL = 1e-9


class SlotState(str, Enum):
    PENDING = "Pending"
    GENERATING = "Generating"
    AWAITING_VERIFICATION = "AwaitingVerification"
    SCORED = "Scored"
    GROUP_READY = "GroupReady"
    PACKED = "Packed"
    TRAINED = "Trained"
    FAILED = "Failed"


class SlotEvent(str, Enum):
    DISPATCH = "Dispatch"
    FINISH_ROLLOUT = "FinishRollout"
    SCORE = "Score"
    GROUP_COMPLETE = "GroupComplete"
    PACK = "Pack"
    TRAIN = "Train"
    FAIL = "Fail"
    RETRY = "Retry"


class IllegalTransition(ValueError):
    pass


_ACTIVE_STATES = (
    SlotState.PENDING,
    SlotState.GENERATING,
    SlotState.AWAITING_VERIFICATION,
    SlotState.SCORED,
    SlotState.GROUP_READY,
    SlotState.PACKED,
)

TRANSITIONS: dict[tuple[SlotState, SlotEvent], SlotState] = {
    (SlotState.PENDING, SlotEvent.DISPATCH): SlotState.GENERATING,
    (SlotState.GENERATING, SlotEvent.FINISH_ROLLOUT): SlotState.AWAITING_VERIFICATION,
    (SlotState.AWAITING_VERIFICATION, SlotEvent.SCORE): SlotState.SCORED,
    (SlotState.SCORED, SlotEvent.GROUP_COMPLETE): SlotState.GROUP_READY,
    (SlotState.GROUP_READY, SlotEvent.PACK): SlotState.PACKED,
    (SlotState.PACKED, SlotEvent.TRAIN): SlotState.TRAINED,
    (SlotState.FAILED, SlotEvent.RETRY): SlotState.PENDING,
}
for _state in _ACTIVE_STATES:
    TRANSITIONS[(_state, SlotEvent.FAIL)] = SlotState.FAILED


@dataclass(frozen=True)
class SampleSlot:
    slot_id: int
    prompt_id: str
    state: SlotState = SlotState.PENDING
    rollout_start_version: int = 0
    attempts: int = 0


@dataclass(frozen=True)
class StalenessPolicy:
    max_version_lag: int = 2
    max_inflight: int = 8

    def __post_init__(self) -> None:
        if self.max_version_lag < 1 or self.max_inflight < 1:
            raise ValueError("max_version_lag and max_inflight must be >= 1")


def advance(slot: SampleSlot, event: SlotEvent, version: int | None = None) -> SampleSlot:
    """Apply one lifecycle event; illegal (state, event) pairs raise.

    Dispatch stamps the rollout's starting policy version and counts an
    attempt; other events leave those fields alone.
    """

    event = SlotEvent(event)
    key = (slot.state, event)
    if key not in TRANSITIONS:
        raise IllegalTransition(f"{event.value} is illegal in state {slot.state.value}")
    new_state = TRANSITIONS[key]
    if event is SlotEvent.DISPATCH:
        return replace(
            slot,
            state=new_state,
            rollout_start_version=slot.rollout_start_version if version is None else int(version),
            attempts=slot.attempts + 1,
        )
    return replace(slot, state=new_state)


@dataclass(frozen=True)
class SchedulePlan:
    dispatch: tuple[int, ...]  # slot ids to dispatch now
    requeue: tuple[int, ...]  # Generating slots too stale to finish


def schedule(
    slots: Sequence[SampleSlot],
    trained: AbstractSet[str],
    current_version: int,
    policy: StalenessPolicy,
) -> SchedulePlan:
    """Decide dispatches and requeues for one coordinator pass.

    Requeue any Generating slot whose start version lags more than
    max_version_lag behind. Dispatch Pending slots (lowest slot id first)
    while in-flight count stays under max_inflight, never a prompt already
    trained.
    """

    requeue = tuple(
        s.slot_id
        for s in slots
        if s.state is SlotState.GENERATING
        and current_version - s.rollout_start_version > policy.max_version_lag
    )
    inflight = sum(
        1
        for s in slots
        if s.state is SlotState.GENERATING and s.slot_id not in requeue
    )
    budget = policy.max_inflight - inflight
    dispatch = tuple(
        s.slot_id
        for s in sorted(slots, key=lambda s: s.slot_id)
        if s.state is SlotState.PENDING and s.prompt_id not in trained
    )[: max(budget, 0)]
    return SchedulePlan(dispatch=dispatch, requeue=requeue)


def within_staleness_bound(
    group: Group, current_version: int, policy: StalenessPolicy
) -> bool:
    """Packing-time check: the group's oldest token may lag at most
    max_version_lag + 1 (the +1 absorbs in-flight adoption granularity)."""

    if not group.policy_versions:
        return True
    return current_version - min(group.policy_versions) <= policy.max_version_lag + 1


# --- durable group checkpoints -----------------------------------------------


def _record_line(payload: str) -> str:
    digest = hashlib.sha256(payload.encode("utf-8")).hexdigest()
    return json.dumps({"digest": digest, "group": payload}) + "\n"


def checkpoint_group(group: Group, path: str | Path) -> None:
    """Append one group to the JSONL checkpoint, fsynced before return."""

    if group.advantages is None:
        raise ValueError("only scored groups (with advantages) are checkpointed")
    line = _record_line(group_to_json(group))
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line)
        fh.flush()
        os.fsync(fh.fileno())


@dataclass(frozen=True)
class RestoreResult:
    groups: tuple[Group, ...]
    discarded_stale: tuple[str, ...]  # prompt ids dropped for lag
    errors: tuple[str, ...]  # per-record problems, surfaced not raised


def restore_groups(
    path: str | Path,
    current_version: int,
    policy: StalenessPolicy,
) -> RestoreResult:
    """Reload checkpointed groups, skipping corrupt records and discarding
    groups whose oldest policy version lags beyond the policy.

    Discarded prompts are NOT meant to be re-enqueued; single-epoch purity
    wins over sample efficiency.
    """

    path = Path(path)
    groups: list[Group] = []
    discarded: list[str] = []
    errors: list[str] = []
    seen: set[str] = set()
    if not path.exists():
        return RestoreResult((), (), ())
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                wrapper = json.loads(line)
                payload = wrapper["group"]
                if hashlib.sha256(payload.encode("utf-8")).hexdigest() != wrapper["digest"]:
                    raise ValueError("digest mismatch")
                group = group_from_json(payload)
            except (ValueError, KeyError, TypeError) as exc:
                errors.append(f"record {lineno}: {exc}")
                continue
            if group.prompt_id in seen:
                errors.append(f"record {lineno}: duplicate prompt {group.prompt_id}")
                continue
            seen.add(group.prompt_id)
            lag = (
                current_version - min(group.policy_versions)
                if group.policy_versions
                else 0
            )
            if lag > policy.max_version_lag:
                discarded.append(group.prompt_id)
                continue
            groups.append(group)
    return RestoreResult(tuple(groups), tuple(discarded), tuple(errors))


# --- audit log -----------------------------------------------------------------


def audit_append(path: str | Path, prompt_id: str, state: SlotState, step: int) -> None:
    """Record a terminal outcome (Trained or Failed) for the global audit."""

    entry = {"prompt_id": prompt_id, "state": SlotState(state).value, "step": int(step)}
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def audit_load(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


def single_epoch_violations(entries: Iterable[Mapping]) -> list[str]:
    """Prompt ids trained more than once across the whole execution."""

    counts: dict[str, int] = {}
    for e in entries:
        if e["state"] == SlotState.TRAINED.value:
            counts[e["prompt_id"]] = counts.get(e["prompt_id"], 0) + 1
    return sorted(p for p, c in counts.items() if c > 1)


# --- curriculum -----------------------------------------------------------------


@dataclass(frozen=True)
class GroupObservation:
    bucket: int
    turns: float
    thinking_tokens: float


def observe_group(bucket: int, group: Group) -> GroupObservation:
    """Difficulty evidence from one completed group: mean turns and mean
    thinking-token count across its rollouts."""

    turns = []
    thinking = []
    for rollout in group.rollouts:
        turns.append(sum(seg.turns for seg in rollout.segments))
        thinking.append(
            sum(1 for rec in rollout.iter_records() if rec.category is Category.THINKING)
        )
    n = max(len(group.rollouts), 1)
    return GroupObservation(
        bucket=bucket,
        turns=sum(turns) / n,
        thinking_tokens=sum(thinking) / n,
    )


def curriculum_weights(
    history: Sequence[GroupObservation],
    buckets: Sequence[int],
    exponent: float = 1.0,
) -> dict[int, float]:
    """Sampling weight per difficulty bucket, proportional to
    (mean turns + 0.1 * mean thinking tokens) ** exponent.

    Empty history gives the uniform distribution; a bucket with no
    observations yet is scored at the global mean signal so it is neither
    starved nor favored.
    """

    if not buckets:
        raise ValueError("no buckets")
    if len(set(buckets)) != len(buckets):
        raise ValueError("duplicate buckets")
    if not history:
        return {b: 1.0 / len(buckets) for b in buckets}

    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for obs in history:
        signal = obs.turns + THINKING_WEIGHT * obs.thinking_tokens
        sums[obs.bucket] = sums.get(obs.bucket, 0.0) + signal
        counts[obs.bucket] = counts.get(obs.bucket, 0) + 1
    means = {b: sums[b] / counts[b] for b in sums}
    global_mean = sum(sums.values()) / sum(counts.values())
    raw = {
        b: max(means.get(b, global_mean), _MIN_SIGNAL) ** exponent for b in buckets
    }
    total = sum(raw.values())
    return {b: raw[b] / total for b in buckets}
