"""Context-parallel chunk assignment and cost-aware sequence packing.

Zigzag assignment pairs chunk i with chunk 2*cp-1-i so every rank attends
the same number of (query, key) pairs under causal masking. Packing spreads
whole sequences over data-parallel ranks with a quadratic cost model,
because attention makes a long sequence worth more than its token count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


class PackingError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    """cost(L) = alpha*L + beta*L^2."""

    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("cost model coefficients must be nonnegative")


def attention_cost(length: int, m: CostModel) -> float:
    if length < 0:
        raise ValueError(f"length must be nonnegative, got {length}")
    return m.alpha * length + m.beta * length * length


def zigzag_assign(cp: int) -> list[tuple[int, int]]:
    """Rank i of a cp-way ring gets chunks i and 2*cp-1-i.

    The 2*cp chunks partition the sequence; each rank's chunk indices sum
    to 2*cp-1, which is the constant-work identity for causal attention.
    """

    if cp < 1:
        raise ValueError(f"cp must be >= 1, got {cp}")
    return [(i, 2 * cp - 1 - i) for i in range(cp)]


def chunk_attended_pairs(chunk_index: int, chunk_tokens: int) -> int:
    """Causal (query, key) pairs attended by chunk chunk_index.

    Query at global position p attends p+1 keys; chunk i holds positions
    [i*c, (i+1)*c), so the count is i*c^2 + c*(c+1)/2.
    """

    if chunk_index < 0 or chunk_tokens < 0:
        raise ValueError("chunk index and size must be nonnegative")
    c = chunk_tokens
    return chunk_index * c * c + c * (c + 1) // 2


def rank_attended_pairs(cp: int, chunk_tokens: int) -> list[int]:
    """Total attended pairs per rank under zigzag assignment."""

    return [
        chunk_attended_pairs(a, chunk_tokens) + chunk_attended_pairs(b, chunk_tokens)
        for a, b in zigzag_assign(cp)
    ]


@dataclass(frozen=True)
class PackingPlan:
    assignment: tuple[int, ...]  # rank per sequence, input order
    loads: tuple[float, ...]
    token_totals: tuple[int, ...]

    @property
    def max_load(self) -> float:
        return max(self.loads)

    def imbalance_ratio(self) -> float:
        """max rank load over the ideal (mean) load; 1.0 is perfect."""

        mean = sum(self.loads) / len(self.loads)
        if mean == 0.0:
            return 1.0
        return self.max_load / mean


def pack(
    lengths: Sequence[int],
    ranks: int,
    m: CostModel,
    token_budget: int,
) -> PackingPlan:
    """Longest-processing-time greedy: costliest sequence first onto the
    least-loaded rank that still has token budget, ties to the lower rank.

    Deterministic for a fixed input: the processing order sorts on
    (-cost, -length) and falls back to input position, and rank choice
    never depends on anything but current loads. Raises when a sequence
    alone exceeds the budget or the greedy runs out of room.
    """

    if ranks < 1:
        raise PackingError(f"ranks must be >= 1, got {ranks}")
    if token_budget < 0:
        raise PackingError(f"token_budget must be >= 0, got {token_budget}")
    for length in lengths:
        if length < 0:
            raise PackingError(f"negative sequence length {length}")
        if length > token_budget:
            raise PackingError(
                f"sequence of length {length} exceeds token budget {token_budget}"
            )

    costs = [attention_cost(length, m) for length in lengths]
    order = sorted(
        range(len(lengths)), key=lambda i: (-costs[i], -lengths[i], i)
    )
    assignment = [-1] * len(lengths)
    loads = [0.0] * ranks
    tokens = [0] * ranks
    for i in order:
        best = -1
        for r in range(ranks):
            if tokens[r] + lengths[i] > token_budget:
                continue
            if best < 0 or loads[r] < loads[best]:
                best = r
        if best < 0:
            raise PackingError(
                f"no rank can take a sequence of length {lengths[i]} "
                f"within token budget {token_budget}"
            )
        assignment[i] = best
        loads[best] += costs[i]
        tokens[best] += lengths[i]
    return PackingPlan(
        assignment=tuple(assignment),
        loads=tuple(loads),
        token_totals=tuple(tokens),
    )
