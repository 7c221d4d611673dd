"""Sequence packing and the zigzag trick for causal attention.

Two balance problems, one page. First: spreading variable-length
sequences over training ranks so no rank waits on a straggler; longest
processing time greedy gets within 4/3 of optimal. Second: splitting
ONE long sequence across ranks for context parallelism; causal
attention makes late chunks quadratically heavier, so each rank takes
chunk i plus its mirror 2*cp-1-i and everyone does identical work.
"""

from deskrl.sched import (
    CostModel,
    attention_cost,
    chunk_attended_pairs,
    pack,
    rank_attended_pairs,
    zigzag_assign,
)


def main() -> None:
    lengths = [8, 7, 6, 5, 4]
    m = CostModel(alpha=0.0, beta=1.0)  # pure quadratic attention cost
    plan = pack(lengths, ranks=2, m=m, token_budget=100)
    print(f"packing lengths {lengths} on 2 ranks (cost = beta * len^2):")
    for rank in range(2):
        mine = [lengths[i] for i, r in enumerate(plan.assignment) if r == rank]
        print(f"  rank {rank}: {mine}, load {plan.loads[rank]:.0f}, tokens {plan.token_totals[rank]}")
    print(f"  imbalance ratio {plan.imbalance_ratio():.3f} (1.0 is perfect)\n")

    cp = 4
    chunk = 16
    print(f"zigzag with cp={cp}, {2 * cp} chunks of {chunk} tokens:")
    print(f"  assignment (chunk pairs per rank): {zigzag_assign(cp)}")
    naive = [
        chunk_attended_pairs(2 * i, chunk) + chunk_attended_pairs(2 * i + 1, chunk)
        for i in range(cp)
    ]
    print(f"  contiguous split, attended pairs per rank: {naive}")
    print(f"  zigzag split,    attended pairs per rank: {rank_attended_pairs(cp, chunk)}")
    print("  contiguous skews %.1fx toward the tail; zigzag is flat" % (max(naive) / min(naive)))

    total = sum(chunk_attended_pairs(i, chunk) for i in range(2 * cp))
    t = 2 * cp * chunk
    assert total == t * (t + 1) // 2
    print(f"  coverage check: {total} pairs = T(T+1)/2 for T={t}\n")

    run_model = CostModel(alpha=0.1, beta=1.0)  # what the training loop packs with
    print("attention_cost(length) with alpha=0.1, beta=1.0:")
    for n in (64, 128, 256):
        print(f"  {n:4d} tokens -> {attention_cost(n, run_model):.0f}")


if __name__ == "__main__":
    main()
