"""Fleet simulator tests.

The load-bearing invariant is capacity safety: after any sequence of
operations, per-node usage never exceeds capacity (within float epsilon).
A randomized operation script hammers that; the other tests pin the
placement mechanics (same-tick invisibility, warmup burst, fill order),
the fork/snapshot isolation, and the key-chain task rules.
"""

import copy
import json

import numpy as np
import pytest

from deskrl.envsim import (
    BURST_FACTOR,
    RESOURCES,
    WARMUP_TICKS,
    EnvError,
    Fleet,
    Node,
    PlacementError,
    PodSpec,
    PodStatus,
    ToolResult,
    apply_tool,
    make_keychain_task,
    verify_task,
)


def make_fleet(n_nodes=3, cpu=4.0, mem=4.0, disk=4.0, **kwargs) -> Fleet:
    nodes = [
        Node(node_id=i, capacity={"cpu": cpu, "mem": mem, "disk": disk})
        for i in range(n_nodes)
    ]
    return Fleet(nodes, **kwargs)


def assert_capacity_safe(fleet: Fleet) -> None:
    for node_id, node in fleet.nodes.items():
        for r in RESOURCES:
            assert fleet.used(node_id, r) <= node.capacity[r] + 1e-9, (
                f"node {node_id} over capacity on {r}"
            )


def rng_for(stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([0xE5, stream], dtype=np.uint64)))


class TestRequests:
    def test_pod_spec_request(self):
        assert PodSpec(cpu=2, mem=1, disk=0).request() == {"cpu": 2.0, "mem": 1.0, "disk": 0.0}

    def test_unknown_resource_rejected(self):
        with pytest.raises(EnvError, match="unknown resources"):
            Node(node_id=0, capacity={"cpu": 1, "gpu": 1})

    def test_negative_request_rejected(self):
        with pytest.raises(EnvError, match="negative"):
            PodSpec(cpu=-1).request()

    def test_trace_clamps_to_last_sample(self):
        node = Node(node_id=0, capacity={"cpu": 4}, pressure_trace={"cpu": (0.1, 0.2)})
        assert node.trace_at("cpu", 0) == 0.1
        assert node.trace_at("cpu", 1) == 0.2
        assert node.trace_at("cpu", 99) == 0.2
        assert node.trace_at("mem", 0) == 0.0


class TestFleetConstruction:
    def test_needs_nodes(self):
        with pytest.raises(EnvError):
            Fleet([])

    def test_duplicate_node_ids_rejected(self):
        nodes = [Node(node_id=1, capacity={"cpu": 1}), Node(node_id=1, capacity={"cpu": 2})]
        with pytest.raises(EnvError, match="duplicate"):
            Fleet(nodes)

    def test_from_config(self):
        fleet = Fleet.from_config(
            {
                "nodes": [
                    {"id": 0, "capacity": {"cpu": 2, "mem": 2}},
                    {
                        "id": 1,
                        "capacity": {"cpu": 4, "mem": 4},
                        "pressure_trace": {"cpu": [0.5]},
                    },
                ],
                "warmup_ticks": 2,
                "queue_when_full": True,
            }
        )
        assert set(fleet.nodes) == {0, 1}
        assert fleet.warmup_ticks == 2
        assert fleet.queue_when_full
        assert fleet.nodes[1].trace_at("cpu", 7) == 0.5


class TestPlacement:
    def test_same_tick_placements_fill_first_fit(self):
        # Pressure readings ignore pods created this tick, so identical idle
        # nodes fill lowest-id-first via the best-fit residual.
        fleet = make_fleet(3, cpu=4, mem=4, disk=0)
        nodes = [
            fleet.pods[fleet.create_pod(PodSpec(cpu=2, mem=0, disk=0))].node_id
            for _ in range(6)
        ]
        assert nodes == [0, 0, 1, 1, 2, 2]
        assert_capacity_safe(fleet)

    def test_warmup_pressure_spreads_later_placements(self):
        fleet = make_fleet(2, cpu=8, mem=8, disk=0)
        first = fleet.create_pod(PodSpec(cpu=2, mem=1, disk=0))
        fleet.tick()
        second = fleet.create_pod(PodSpec(cpu=2, mem=1, disk=0))
        assert fleet.pods[first].node_id == 0
        assert fleet.pods[second].node_id == 1

    def test_pressure_numbers(self):
        fleet = make_fleet(1, cpu=8, mem=8, disk=8)
        fleet.create_pod(PodSpec(cpu=2, mem=0, disk=0))
        assert fleet.pressure(0, "cpu") == 0.0  # same tick: not visible yet
        fleet.tick()
        assert fleet.pressure(0, "cpu") == pytest.approx(BURST_FACTOR * 2 / 8)
        for _ in range(WARMUP_TICKS):
            fleet.tick()
        assert fleet.pressure(0, "cpu") == pytest.approx(2 / 8)

    def test_scripted_trace_adds_to_pressure(self):
        node = Node(node_id=0, capacity={"cpu": 4}, pressure_trace={"cpu": (0.25,)})
        fleet = Fleet([node])
        assert fleet.pressure(0, "cpu") == 0.25

    def test_full_fleet_raises_without_queue(self):
        fleet = make_fleet(1, cpu=2, mem=2, disk=2)
        fleet.create_pod(PodSpec(cpu=2, mem=2, disk=2))
        with pytest.raises(PlacementError):
            fleet.create_pod(PodSpec(cpu=1, mem=0, disk=0))

    def test_exact_fit_allowed(self):
        fleet = make_fleet(1, cpu=2, mem=2, disk=2)
        fleet.create_pod(PodSpec(cpu=2, mem=2, disk=2))
        assert fleet.used(0, "cpu") == 2.0
        assert_capacity_safe(fleet)


class TestQueueing:
    def test_queue_then_drain_after_capacity_frees(self):
        fleet = make_fleet(1, cpu=2, mem=2, disk=2, queue_when_full=True)
        first = fleet.create_pod(PodSpec(cpu=2, mem=2, disk=2))
        queued = fleet.create_pod(PodSpec(cpu=2, mem=2, disk=2))
        assert queued in fleet.queued
        assert queued not in fleet.pods
        assert any(e["event"] == "queue" and e["pod"] == queued for e in fleet.audit)
        fleet.tick()
        assert queued in fleet.queued  # still no room
        fleet.terminate(first)
        fleet.tick()
        assert queued not in fleet.queued
        assert fleet.pods[queued].status is PodStatus.STARTING
        assert_capacity_safe(fleet)

    def test_settle_reaches_ready(self):
        fleet = make_fleet(1, queue_when_full=True)
        pod = fleet.create_pod(PodSpec())
        ticks = fleet.settle()
        assert ticks == WARMUP_TICKS
        assert fleet.pods[pod].status is PodStatus.READY

    def test_settle_gives_up_on_impossible_queue(self):
        fleet = make_fleet(1, cpu=1, mem=1, disk=1, queue_when_full=True)
        fleet.create_pod(PodSpec(cpu=3, mem=0, disk=0))  # can never fit
        with pytest.raises(EnvError, match="did not settle"):
            fleet.settle(max_ticks=5)

    def test_settle_noop_when_idle(self):
        fleet = make_fleet(1)
        assert fleet.settle() == 0


class TestBurst:
    def test_largest_first_order(self):
        fleet = make_fleet(1, cpu=10, mem=10, disk=0)
        result = fleet.schedule_burst(
            [{"cpu": 1}, {"cpu": 5}, {"cpu": 3}]
        )
        assert result.unplaced == ()
        # Bookkeeping is immediate, so placement order shows in pod ids.
        by_request = {
            next(
                p.pod_id
                for p in fleet.pods.values()
                if p.request["cpu"] == cpu
            ): cpu
            for cpu in (5, 3, 1)
        }
        assert list(by_request.values()) == [5, 3, 1]
        assert sorted(by_request) == list(by_request)

    def test_infeasible_requests_reported_not_raised(self):
        fleet = make_fleet(2, cpu=4, mem=4, disk=0)
        result = fleet.schedule_burst(
            [{"cpu": 3}, {"cpu": 99}, {"cpu": 3}, {"cpu": 3}]
        )
        assert result.unplaced == (1, 3)  # the giant, then the third 3 (no room)
        assert {i for i, _ in result.placements} == {0, 2}
        assert_capacity_safe(fleet)

    def test_placements_sorted_by_request_index(self):
        fleet = make_fleet(2, cpu=8, mem=8, disk=0)
        result = fleet.schedule_burst([{"cpu": 1}, {"cpu": 2}, {"cpu": 3}])
        assert [i for i, _ in result.placements] == [0, 1, 2]

    def test_burst_respects_capacity_on_pressure(self):
        rng = rng_for(1)
        fleet = make_fleet(5, cpu=6, mem=6, disk=6)
        requests = [
            {"cpu": float(rng.integers(1, 4)), "mem": float(rng.integers(1, 4))}
            for _ in range(40)
        ]
        result = fleet.schedule_burst(requests)
        assert_capacity_safe(fleet)
        assert len(result.placements) + len(result.unplaced) == 40

    def test_deterministic(self):
        requests = [{"cpu": c} for c in (2, 2, 3, 1, 4, 4, 1)]
        a = make_fleet(3, cpu=6, mem=6, disk=6).schedule_burst(requests)
        b = make_fleet(3, cpu=6, mem=6, disk=6).schedule_burst(requests)
        assert a == b


class TestForkSnapshot:
    def _ready_fleet_with_task(self, depth=2):
        fleet = make_fleet(2, cpu=8, mem=8, disk=8)
        task = make_keychain_task(depth, rng_for(2), value_space=10)
        pod = fleet.create_pod(PodSpec(), task=task)
        fleet.settle()
        return fleet, pod

    def test_fork_requires_ready(self):
        fleet = make_fleet(1)
        pod = fleet.create_pod(PodSpec())
        with pytest.raises(EnvError, match="not Ready"):
            fleet.fork_pod(pod)

    def test_fork_prefers_parent_node(self):
        fleet, pod = self._ready_fleet_with_task()
        child = fleet.fork_pod(pod)
        assert fleet.pods[child].node_id == fleet.pods[pod].node_id
        assert fleet.pods[child].status is PodStatus.READY

    def test_fork_moves_when_parent_node_full(self):
        fleet = make_fleet(2, cpu=3, mem=3, disk=3)
        pod = fleet.create_pod(PodSpec(cpu=2, mem=2, disk=2))
        fleet.settle()
        child = fleet.fork_pod(pod)
        assert fleet.pods[child].node_id != fleet.pods[pod].node_id
        assert_capacity_safe(fleet)

    def test_fork_exhaustion_raises(self):
        fleet = make_fleet(1, cpu=3, mem=3, disk=3)
        pod = fleet.create_pod(PodSpec(cpu=2, mem=2, disk=2))
        fleet.settle()
        with pytest.raises(PlacementError):
            fleet.fork_pod(pod)

    def test_fork_is_deep_copy_both_directions(self):
        fleet, pod = self._ready_fleet_with_task()
        fleet.pods[pod].files["notes.txt"] = "parent"
        child = fleet.fork_pod(pod)
        fleet.call_tool(child, "todo", 5)
        fleet.pods[child].files["notes.txt"] = "child"
        assert fleet.pods[pod].task["todos"] == []
        assert fleet.pods[pod].files["notes.txt"] == "parent"
        fleet.call_tool(pod, "todo", 9)
        assert fleet.pods[child].task["todos"] == [5]

    def test_terminated_pod_keeps_record_frees_usage(self):
        fleet, pod = self._ready_fleet_with_task()
        node_id = fleet.pods[pod].node_id
        used_before = fleet.used(node_id, "cpu")
        fleet.terminate(pod)
        assert fleet.pods[pod].status is PodStatus.TERMINATED
        assert fleet.used(node_id, "cpu") == used_before - 1.0
        assert any(e["event"] == "terminate" and e["pod"] == pod for e in fleet.audit)
        with pytest.raises(EnvError):
            fleet.fork_pod(pod)

    def test_snapshot_refs_are_sequential(self):
        fleet, pod = self._ready_fleet_with_task()
        assert fleet.snapshot(pod) == "snap-0"
        assert fleet.snapshot(pod) == "snap-1"

    def test_restore_unknown_ref(self):
        fleet, _ = self._ready_fleet_with_task()
        with pytest.raises(EnvError, match="unknown snapshot"):
            fleet.restore("snap-99")

    def test_restore_recovers_state_at_snapshot_time(self):
        fleet, pod = self._ready_fleet_with_task(depth=3)
        start = fleet.pods[pod].task["start"]
        fleet.call_tool(pod, "lookup", start)
        ref = fleet.snapshot(pod)
        frozen = copy.deepcopy(fleet.pods[pod].task)
        fleet.call_tool(pod, "todo", 1)
        fleet.call_tool(pod, "submit", 0)
        restored = fleet.restore(ref)
        assert fleet.pods[restored].task == frozen
        assert fleet.pods[restored].status is PodStatus.READY

    def test_restore_survives_original_termination(self):
        fleet, pod = self._ready_fleet_with_task()
        ref = fleet.snapshot(pod)
        fleet.terminate(pod)
        restored = fleet.restore(ref)
        assert fleet.pods[restored].task is not None

    def test_snapshot_isolation_under_mutation_scripts(self):
        # Snapshot state must not alias the live pod in either direction,
        # whatever mix of tool calls happens after the snapshot.
        rng = rng_for(3)
        for _ in range(100):
            fleet = make_fleet(2, cpu=16, mem=16, disk=16)
            depth = int(rng.integers(1, 4))
            task = make_keychain_task(depth, rng, value_space=12)
            pod = fleet.create_pod(PodSpec(), task=task)
            fleet.settle()
            key = fleet.pods[pod].task["start"]
            for _ in range(int(rng.integers(0, 4))):
                result = fleet.call_tool(pod, "lookup", key)
                if result.ok:
                    key = result.value
            ref = fleet.snapshot(pod)
            frozen = json.dumps(fleet.pods[pod].task, sort_keys=True)
            for _ in range(int(rng.integers(1, 6))):
                tool = ("lookup", "todo", "submit")[int(rng.integers(3))]
                fleet.call_tool(pod, tool, int(rng.integers(0, 12)))
            restored = fleet.restore(ref)
            assert json.dumps(fleet.pods[restored].task, sort_keys=True) == frozen
            # and mutating the restored pod leaves the snapshot reusable
            fleet.call_tool(restored, "submit", 0)
            second = fleet.restore(ref)
            assert json.dumps(fleet.pods[second].task, sort_keys=True) == frozen


class TestCapacityInvariant:
    def test_random_operation_scripts_stay_safe(self):
        rng = rng_for(4)
        for _ in range(30):
            fleet = make_fleet(4, cpu=8, mem=8, disk=8, queue_when_full=True)
            live: list[int] = []
            for _ in range(60):
                op = rng.integers(0, 5)
                try:
                    if op == 0:
                        spec = PodSpec(
                            cpu=float(rng.integers(1, 4)),
                            mem=float(rng.integers(1, 4)),
                            disk=float(rng.integers(0, 3)),
                        )
                        live.append(fleet.create_pod(spec))
                    elif op == 1 and live:
                        victim = live.pop(int(rng.integers(len(live))))
                        if victim in fleet.pods:
                            fleet.terminate(victim)
                    elif op == 2:
                        fleet.tick()
                    elif op == 3 and live:
                        parent = live[int(rng.integers(len(live)))]
                        if (
                            parent in fleet.pods
                            and fleet.pods[parent].status is PodStatus.READY
                        ):
                            try:
                                live.append(fleet.fork_pod(parent))
                            except PlacementError:
                                pass
                    else:
                        fleet.schedule_burst(
                            [{"cpu": float(rng.integers(1, 3))} for _ in range(3)]
                        )
                except PlacementError:
                    pass
                assert_capacity_safe(fleet)
                for pod_id in fleet.queued:
                    assert pod_id not in fleet.pods


class TestKeychainTask:
    def test_chain_structure(self):
        rng = rng_for(5)
        for depth in (1, 2, 3, 5):
            task = make_keychain_task(depth, rng, value_space=12)
            assert len(task["chain"]) == depth
            key = task["start"]
            for _ in range(depth):
                key = task["chain"][key]
            assert key == task["terminus"]
            assert task["terminus"] not in task["chain"]  # terminus ends it

    def test_ids_distinct(self):
        task = make_keychain_task(4, rng_for(6), value_space=6)
        ids = {task["start"], *task["chain"].values()}
        assert len(ids) == 5

    def test_parameter_validation(self):
        with pytest.raises(EnvError):
            make_keychain_task(0, rng_for(7))
        with pytest.raises(EnvError, match="too small"):
            make_keychain_task(5, rng_for(7), value_space=5)

    def test_deterministic_per_seed(self):
        a = make_keychain_task(3, rng_for(8), value_space=20)
        b = make_keychain_task(3, rng_for(8), value_space=20)
        assert a == b

    def test_lookup_walks_chain(self):
        task = make_keychain_task(2, rng_for(9), value_space=10)
        r1 = apply_tool(task, "lookup", task["start"])
        assert r1 == ToolResult(ok=True, value=task["chain"][task["start"]])
        r2 = apply_tool(task, "lookup", r1.value)
        assert r2.ok and r2.value == task["terminus"]
        # The terminus is not a key: probing it fails, which is the signal
        # that the chain is exhausted.
        assert apply_tool(task, "lookup", task["terminus"]) == ToolResult(ok=False)

    def test_lookup_garbage_fails(self):
        task = make_keychain_task(1, rng_for(10), value_space=5)
        assert not apply_tool(task, "lookup", None).ok
        assert not apply_tool(task, "lookup", 999).ok

    def test_submit_finishes_task(self):
        task = make_keychain_task(1, rng_for(11), value_space=5)
        assert apply_tool(task, "submit", task["terminus"]).ok
        assert task["done"] and task["submitted"] == task["terminus"]
        # everything after done is refused but still logged
        assert not apply_tool(task, "lookup", task["start"]).ok
        assert not apply_tool(task, "submit", 0).ok
        assert len(task["tool_log"]) == 3

    def test_todo_appends(self):
        task = make_keychain_task(1, rng_for(12), value_space=5)
        apply_tool(task, "todo", 3)
        apply_tool(task, "todo", None)
        assert task["todos"] == [3, None]

    def test_unknown_tool_raises(self):
        task = make_keychain_task(1, rng_for(13), value_space=5)
        with pytest.raises(EnvError, match="unknown tool"):
            apply_tool(task, "rm_rf", 0)

    def test_verify(self):
        task = make_keychain_task(2, rng_for(14), value_space=8)
        assert verify_task(task) == 0.0  # not done
        apply_tool(task, "submit", task["terminus"])
        assert verify_task(task) == 1.0
        wrong = make_keychain_task(2, rng_for(15), value_space=8)
        apply_tool(wrong, "submit", wrong["start"])
        assert verify_task(wrong) == 0.0

    def test_call_tool_needs_task_and_logs(self):
        fleet = make_fleet(1)
        bare = fleet.create_pod(PodSpec())
        fleet.settle()
        with pytest.raises(EnvError, match="hosts no task"):
            fleet.call_tool(bare, "lookup", 0)
        task = make_keychain_task(1, rng_for(16), value_space=5)
        pod = fleet.create_pod(PodSpec(), task=task)
        fleet.settle()
        fleet.call_tool(pod, "lookup", task["start"])
        entries = [e for e in fleet.audit if e["event"] == "tool"]
        assert entries == [
            {
                "tick": fleet.clock,
                "event": "tool",
                "pod": pod,
                "tool": "lookup",
                "arg": task["start"],
                "ok": True,
            }
        ]
