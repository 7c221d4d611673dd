"""In-process stand-in for a pod fleet plus the toy task it hosts.

Nodes have fixed per-resource capacity and a scripted pressure trace; pods
are placed under a hard request-sum constraint and a soft score that mixes
best-fit packing with the live pressure reading. Placement bookkeeping is
immediate, pressure readings are sampled per tick (a pod placed this tick
shows up in next tick's reading, with a warmup burst multiplier), which is
what makes identical idle nodes fill in first-fit order within one burst.

The hosted task is a key-value chain: start key, follow `lookup` depth
times, `submit` the terminus. Depth is the difficulty knob. All task state
mutation goes through call_tool and lands in the audit log.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

RESOURCES = ("cpu", "mem", "disk")
WARMUP_TICKS = 3
BURST_FACTOR = 3.0
PRESSURE_WEIGHT = 10.0
_EPS = 1e-9


class EnvError(ValueError):
    pass


class PlacementError(EnvError):
    pass


class PodStatus(str, Enum):
    STARTING = "Starting"
    READY = "Ready"
    TERMINATED = "Terminated"


def _request_dict(request: Mapping[str, float]) -> dict[str, float]:
    req = {r: float(request.get(r, 0.0)) for r in RESOURCES}
    extra = set(request) - set(RESOURCES)
    if extra:
        raise EnvError(f"unknown resources {sorted(extra)}")
    if any(v < 0 for v in req.values()):
        raise EnvError(f"negative resource request {req}")
    return req


@dataclass(frozen=True)
class PodSpec:
    cpu: float = 1.0
    mem: float = 1.0
    disk: float = 0.0

    def request(self) -> dict[str, float]:
        return _request_dict({"cpu": self.cpu, "mem": self.mem, "disk": self.disk})


@dataclass
class Node:
    node_id: int
    capacity: dict[str, float]
    pressure_trace: dict[str, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.capacity = _request_dict(self.capacity)
        self.pressure_trace = {
            r: tuple(float(v) for v in t) for r, t in self.pressure_trace.items()
        }

    def trace_at(self, resource: str, tick: int) -> float:
        trace = self.pressure_trace.get(resource)
        if not trace:
            return 0.0
        return trace[min(tick, len(trace) - 1)]


@dataclass
class Pod:
    pod_id: int
    node_id: int
    request: dict[str, float]
    status: PodStatus
    created_at: int
    files: dict[str, str] = field(default_factory=dict)
    task: dict | None = None


@dataclass(frozen=True)
class ToolResult:
    ok: bool
    value: int | None = None


@dataclass(frozen=True)
class BurstResult:
    placements: tuple[tuple[int, int], ...]  # (request index, node id)
    unplaced: tuple[int, ...]


class Fleet:
    def __init__(
        self,
        nodes: Sequence[Node],
        *,
        warmup_ticks: int = WARMUP_TICKS,
        burst_factor: float = BURST_FACTOR,
        queue_when_full: bool = False,
    ) -> None:
        if not nodes:
            raise EnvError("fleet needs at least one node")
        ids = [n.node_id for n in nodes]
        if len(set(ids)) != len(ids):
            raise EnvError("duplicate node ids")
        self.nodes = {n.node_id: n for n in sorted(nodes, key=lambda n: n.node_id)}
        self.pods: dict[int, Pod] = {}
        self.clock = 0
        self.warmup_ticks = warmup_ticks
        self.burst_factor = burst_factor
        self.queue_when_full = queue_when_full
        self.queued: dict[int, dict[str, float]] = {}
        self.audit: list[dict] = []
        self._pod_ids = itertools.count()
        self._snap_ids = itertools.count()
        self._snapshots: dict[str, dict] = {}

    @classmethod
    def from_config(cls, cfg: Mapping) -> "Fleet":
        nodes = [
            Node(
                node_id=int(n["id"]),
                capacity=dict(n["capacity"]),
                pressure_trace={
                    r: tuple(t) for r, t in n.get("pressure_trace", {}).items()
                },
            )
            for n in cfg["nodes"]
        ]
        return cls(
            nodes,
            warmup_ticks=int(cfg.get("warmup_ticks", WARMUP_TICKS)),
            burst_factor=float(cfg.get("burst_factor", BURST_FACTOR)),
            queue_when_full=bool(cfg.get("queue_when_full", False)),
        )

    # --- accounting -----------------------------------------------------

    def _live_pods(self, node_id: int) -> list[Pod]:
        return [
            p
            for p in self.pods.values()
            if p.node_id == node_id and p.status is not PodStatus.TERMINATED
        ]

    def used(self, node_id: int, resource: str) -> float:
        return sum(p.request[resource] for p in self._live_pods(node_id))

    def pressure(self, node_id: int, resource: str) -> float:
        """Sampled reading: scripted trace plus usage of pods placed on
        earlier ticks, tripled while a pod is inside its warmup window."""

        node = self.nodes[node_id]
        cap = node.capacity[resource]
        usage = 0.0
        for p in self._live_pods(node_id):
            if p.created_at >= self.clock:
                continue
            age = self.clock - p.created_at
            mult = self.burst_factor if age < self.warmup_ticks else 1.0
            usage += mult * p.request[resource]
        load = usage / cap if cap > 0 else 0.0
        return node.trace_at(resource, self.clock) + load

    def _fits(self, node_id: int, request: Mapping[str, float]) -> bool:
        node = self.nodes[node_id]
        return all(
            self.used(node_id, r) + request[r] <= node.capacity[r] + _EPS
            for r in RESOURCES
        )

    def _score(self, node_id: int, request: Mapping[str, float]) -> float:
        node = self.nodes[node_id]
        residual = 0.0
        for r in RESOURCES:
            cap = node.capacity[r]
            if cap > 0:
                residual += (cap - self.used(node_id, r) - request[r]) / cap
        pressure = sum(self.pressure(node_id, r) for r in RESOURCES)
        return residual + PRESSURE_WEIGHT * pressure

    def _choose_node(self, request: Mapping[str, float]) -> int | None:
        best: int | None = None
        best_score = 0.0
        for node_id in self.nodes:
            if not self._fits(node_id, request):
                continue
            score = self._score(node_id, request)
            if best is None or score < best_score - _EPS:
                best = node_id
                best_score = score
        return best

    # --- lifecycle --------------------------------------------------------

    def _new_pod(
        self,
        node_id: int,
        request: dict[str, float],
        status: PodStatus,
        files: dict[str, str] | None = None,
        task: dict | None = None,
        event: str = "place",
    ) -> int:
        pod_id = next(self._pod_ids)
        self.pods[pod_id] = Pod(
            pod_id=pod_id,
            node_id=node_id,
            request=dict(request),
            status=status,
            created_at=self.clock,
            files=dict(files or {}),
            task=task,
        )
        self.audit.append(
            {"tick": self.clock, "event": event, "pod": pod_id, "node": node_id}
        )
        return pod_id

    def create_pod(self, spec: PodSpec, task: dict | None = None) -> int:
        request = spec.request()
        node_id = self._choose_node(request)
        if node_id is None:
            if self.queue_when_full:
                pod_id = next(self._pod_ids)
                self.queued[pod_id] = request
                self.audit.append(
                    {"tick": self.clock, "event": "queue", "pod": pod_id}
                )
                return pod_id
            raise PlacementError(f"no node can host request {request}")
        return self._new_pod(node_id, request, PodStatus.STARTING, task=task)

    def fork_pod(self, pod_id: int) -> int:
        """Clone a Ready pod, preferring its own node, and hand the child
        an independent deep copy of the files and task state."""

        parent = self._ready_pod(pod_id)
        if self._fits(parent.node_id, parent.request):
            node_id = parent.node_id
        else:
            node_id = self._choose_node(parent.request)
            if node_id is None:
                raise PlacementError("fleet exhausted, cannot place fork")
        return self._new_pod(
            node_id,
            parent.request,
            PodStatus.READY,
            files=copy.deepcopy(parent.files),
            task=copy.deepcopy(parent.task),
            event="fork",
        )

    def terminate(self, pod_id: int) -> None:
        pod = self._pod(pod_id)
        pod.status = PodStatus.TERMINATED
        self.audit.append(
            {"tick": self.clock, "event": "terminate", "pod": pod_id, "node": pod.node_id}
        )

    def tick(self) -> None:
        self.clock += 1
        for pod in self.pods.values():
            if (
                pod.status is PodStatus.STARTING
                and self.clock - pod.created_at >= self.warmup_ticks
            ):
                pod.status = PodStatus.READY
        for pod_id in sorted(self.queued):
            request = self.queued[pod_id]
            node_id = self._choose_node(request)
            if node_id is None:
                continue
            del self.queued[pod_id]
            self.pods[pod_id] = Pod(
                pod_id=pod_id,
                node_id=node_id,
                request=dict(request),
                status=PodStatus.STARTING,
                created_at=self.clock,
            )
            self.audit.append(
                {"tick": self.clock, "event": "place", "pod": pod_id, "node": node_id}
            )

    def settle(self, max_ticks: int = 1000) -> int:
        """Tick until nothing is Starting or queued; returns ticks used."""

        for i in range(max_ticks):
            if not self.queued and all(
                p.status is not PodStatus.STARTING for p in self.pods.values()
            ):
                return i
            self.tick()
        raise EnvError("fleet did not settle")

    def schedule_burst(self, requests: Sequence[Mapping[str, float]]) -> BurstResult:
        """Place a batch of bare requests largest-first. Infeasible ones are
        returned unplaced, not errors."""

        reqs = [_request_dict(r) for r in requests]
        order = sorted(
            range(len(reqs)), key=lambda i: (-sum(reqs[i].values()), i)
        )
        placements: list[tuple[int, int]] = []
        unplaced: list[int] = []
        for i in order:
            node_id = self._choose_node(reqs[i])
            if node_id is None:
                unplaced.append(i)
                continue
            self._new_pod(node_id, reqs[i], PodStatus.STARTING, event="place")
            placements.append((i, node_id))
        return BurstResult(
            placements=tuple(sorted(placements)), unplaced=tuple(sorted(unplaced))
        )

    # --- snapshots --------------------------------------------------------

    def snapshot(self, pod_id: int) -> str:
        pod = self._ready_pod(pod_id)
        ref = f"snap-{next(self._snap_ids)}"
        self._snapshots[ref] = {
            "request": dict(pod.request),
            "files": copy.deepcopy(pod.files),
            "task": copy.deepcopy(pod.task),
        }
        self.audit.append(
            {"tick": self.clock, "event": "snapshot", "pod": pod_id, "ref": ref}
        )
        return ref

    def restore(self, ref: str) -> int:
        if ref not in self._snapshots:
            raise EnvError(f"unknown snapshot ref {ref!r}")
        snap = self._snapshots[ref]
        node_id = self._choose_node(snap["request"])
        if node_id is None:
            raise PlacementError("fleet exhausted, cannot place restore")
        pod_id = self._new_pod(
            node_id,
            snap["request"],
            PodStatus.READY,
            files=copy.deepcopy(snap["files"]),
            task=copy.deepcopy(snap["task"]),
            event="restore",
        )
        return pod_id

    # --- task tools --------------------------------------------------------

    def _pod(self, pod_id: int) -> Pod:
        if pod_id not in self.pods:
            raise EnvError(f"unknown pod {pod_id}")
        return self.pods[pod_id]

    def _ready_pod(self, pod_id: int) -> Pod:
        pod = self._pod(pod_id)
        if pod.status is not PodStatus.READY:
            raise EnvError(f"pod {pod_id} is {pod.status.value}, not Ready")
        return pod

    def call_tool(self, pod_id: int, tool: str, arg: int | None = None) -> ToolResult:
        pod = self._ready_pod(pod_id)
        if pod.task is None:
            raise EnvError(f"pod {pod_id} hosts no task")
        result = apply_tool(pod.task, tool, arg)
        self.audit.append(
            {
                "tick": self.clock,
                "event": "tool",
                "pod": pod_id,
                "tool": tool,
                "arg": arg,
                "ok": result.ok,
            }
        )
        return result


def create_pod(spec: PodSpec, fleet: Fleet, task: dict | None = None) -> int:
    return fleet.create_pod(spec, task)


def fork_pod(pod_id: int, fleet: Fleet) -> int:
    return fleet.fork_pod(pod_id)


def schedule_burst(requests: Sequence[Mapping[str, float]], fleet: Fleet) -> BurstResult:
    return fleet.schedule_burst(requests)


def snapshot(pod_id: int, fleet: Fleet) -> str:
    return fleet.snapshot(pod_id)


def restore(ref: str, fleet: Fleet) -> int:
    return fleet.restore(ref)


# --- key-chain task ----------------------------------------------------------

TASK_TOOLS = ("lookup", "submit", "todo")


def make_keychain_task(
    depth: int, rng: np.random.Generator, value_space: int = 40
) -> dict:
    """Hidden chain of `depth` hops: start -> v1 -> ... -> terminus.

    Keys and values share one integer space so a looked-up value is the
    next key. Entries are distinct, so the terminus is reached in exactly
    depth lookups and never earlier.
    """

    if depth < 1:
        raise EnvError(f"depth must be >= 1, got {depth}")
    if value_space < depth + 1:
        raise EnvError("value space too small for requested depth")
    ids = rng.choice(value_space, size=depth + 1, replace=False).tolist()
    chain = {int(ids[i]): int(ids[i + 1]) for i in range(depth)}
    return {
        "chain": chain,
        "start": int(ids[0]),
        "terminus": int(ids[-1]),
        "depth": depth,
        "todos": [],
        "submitted": None,
        "done": False,
        "tool_log": [],
    }


def apply_tool(task: dict, tool: str, arg: int | None) -> ToolResult:
    """The single mutation channel for task state."""

    if tool not in TASK_TOOLS:
        raise EnvError(f"unknown tool {tool!r}")
    task["tool_log"].append({"tool": tool, "arg": arg})
    if task["done"]:
        return ToolResult(ok=False)
    if tool == "lookup":
        if arg is None or arg not in task["chain"]:
            return ToolResult(ok=False)
        return ToolResult(ok=True, value=task["chain"][arg])
    if tool == "submit":
        task["submitted"] = arg
        task["done"] = True
        return ToolResult(ok=True)
    task["todos"].append(arg)
    return ToolResult(ok=True)


def verify_task(task: dict) -> float:
    """Binary reward: 1.0 iff the submitted answer is the chain terminus."""

    return 1.0 if task["done"] and task["submitted"] == task["terminus"] else 0.0
