"""A tour of the simulated pod fleet.

Placement scores nodes by residual capacity plus a pressure penalty
that triples during warmup. The catch: pressure only counts pods that
existed before the current tick, so a single-tick burst stacks onto one
node while the same pods spread out when they arrive across ticks. The
second half walks a key-chain task and shows snapshots and forks
copying task state instead of aliasing it.
"""

import numpy as np

from deskrl.envsim import Fleet, Node, PodSpec, make_keychain_task


def usage(fleet: Fleet) -> str:
    return ", ".join(
        f"node {nid}: cpu {fleet.used(nid, 'cpu'):.0f}/{node.capacity['cpu']:.0f}"
        for nid, node in sorted(fleet.nodes.items())
    )


def main() -> None:
    burst = Fleet(
        [Node(node_id=i, capacity={"cpu": 8.0, "mem": 8.0, "disk": 8.0}) for i in range(3)],
        warmup_ticks=3,
    )
    for _ in range(6):
        burst.create_pod(PodSpec(cpu=2.0, mem=1.0))
    print("six pods in one tick (invisible to each other's pressure):")
    print(f"  {usage(burst)}")

    spread = Fleet(
        [Node(node_id=i, capacity={"cpu": 8.0, "mem": 8.0, "disk": 8.0}) for i in range(3)],
        warmup_ticks=3,
    )
    for _ in range(6):
        spread.create_pod(PodSpec(cpu=2.0, mem=1.0))
        spread.tick()
    print("same six pods, one per tick (warmup pressure tripled):")
    print(f"  {usage(spread)}")

    print("\na key-chain task: follow lookups to the terminus, submit the value")
    fleet = spread
    rng = np.random.Generator(np.random.Philox(5))
    task = make_keychain_task(depth=2, rng=rng, value_space=12)
    pod = fleet.create_pod(PodSpec(cpu=1.0, mem=1.0), task=task)
    fleet.settle()
    held = fleet.pods[pod].task["start"]
    print(f"  start key {held}")
    while True:
        result = fleet.call_tool(pod, "lookup", held)
        if not result.ok:
            print(f"  lookup {held} -> ERR, so {held} is the answer")
            break
        print(f"  lookup {held} -> {result.value}")
        held = result.value

    print("\nsnapshots freeze state; forks copy it:")
    ref = fleet.snapshot(pod)
    fleet.call_tool(pod, "todo", 3)
    clone = fleet.restore(ref)
    print(f"  live pod todos after a write: {fleet.pods[pod].task['todos']}")
    print(f"  restored {ref} todos: {fleet.pods[clone].task['todos']} (pre-mutation)")

    twin = fleet.fork_pod(pod)
    fleet.call_tool(twin, "todo", 9)
    print(f"  fork's todos after its own write: {fleet.pods[twin].task['todos']}")
    print(f"  parent unchanged: {fleet.pods[pod].task['todos']}")

    fleet.call_tool(pod, "submit", held)
    print(f"\n  submit {held} -> task done: {fleet.pods[pod].task['done']}")
    print(f"  fork untouched by parent's submit: done={fleet.pods[twin].task['done']}")

    print(f"\naudit trail has {len(fleet.audit)} events; the last three:")
    for event in fleet.audit[-3:]:
        print(f"  {event}")


if __name__ == "__main__":
    main()
