"""End-to-end desk run: warm start, grouped rollouts, training, reporting.

One process plays every role in sequence: the coordinator schedules prompt
slots, the fleet hosts one task pod per prompt and one fork per rollout, the
sampler generates token-by-token against the forked pod, the verifier scores
and the trainer updates weights and publishes them to the store the sampler
polls. Everything downstream of the seed is deterministic: logical clocks
only, one RNG stream consumed in a fixed order, so two runs with the same
config produce byte-identical metrics.

Version 0 is not random: before any reinforcement step the model is
behavior-cloned on a scripted, deliberately noisy demonstrator so rollouts
have nonzero success probability from the first step. Version 0 also serves
as the KL reference policy.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import envsim, reconciler, sync, toylm
from .core import Group, rollout_cost_features
from .envsim import Fleet, PodSpec
from .klmath import EstimatorKind
from .reconciler import SampleSlot, SlotEvent, SlotState, StalenessPolicy
from .reward import (
    PenaltyConfig,
    RUBRICS,
    composite_reward,
    evaluate_behaviors,
    group_advantages,
    group_training_sequences,
)
from .sched import CostModel, pack
from .toylm import (
    BOS,
    EOS,
    SEP,
    TOK_ERR,
    TOK_LOOKUP,
    TOK_SUBMIT,
    VALUE_BASE,
    KLRegConfig,
    RolloutFailure,
    SamplerEngine,
    ToyMoEParams,
    params_from_shards,
    params_to_shards,
)


class ConfigError(ValueError):
    """A run config with unknown keys, bad types or impossible values."""


# --- config sections ----------------------------------------------------------


def _parse_section(cls, data: Mapping[str, Any], path: str, aliases: Mapping[str, str] | None = None):
    """Build a section dataclass from a mapping, rejecting unknown keys.

    Unknown keys are configuration bugs and must fail loudly with the full
    dotted path, not be silently dropped.
    """

    if not isinstance(data, Mapping):
        raise ConfigError(f"{path} must be an object, got {type(data).__name__}")
    payload = dict(data)
    for json_key, field_name in (aliases or {}).items():
        if json_key in payload:
            payload[field_name] = payload.pop(json_key)
    known = {f.name for f in fields(cls)}
    for key in payload:
        if key not in known:
            raise ConfigError(f"unknown key {path}.{key}")
    try:
        return cls(**payload)
    except TypeError as exc:
        raise ConfigError(f"bad section {path}: {exc}") from exc


@dataclass(frozen=True)
class ModelSection:
    vocab: int = toylm.VOCAB_SIZE
    dim: int = toylm.HIDDEN_DIM
    experts: int = toylm.NUM_EXPERTS
    top_k: int = toylm.TOP_K
    replay_alpha: float = toylm.REPLAY_ALPHA

    def __post_init__(self) -> None:
        if self.vocab < VALUE_BASE + 1:
            raise ConfigError("model.vocab too small for the token grammar")
        if not 1 <= self.top_k <= self.experts:
            raise ConfigError("model.top_k must be in [1, experts]")


@dataclass(frozen=True)
class RewardSection:
    k: float = 0.01
    q: float = 0.5
    lam: float = 0.002
    mask_overlong: bool = False
    max_sequence_tokens: int = 4096
    behaviors: tuple[str, ...] = tuple(RUBRICS)

    def __post_init__(self) -> None:
        object.__setattr__(self, "behaviors", tuple(self.behaviors))
        for name in self.behaviors:
            if name not in RUBRICS:
                raise ConfigError(f"reward.behaviors: unknown rubric {name!r}")

    def penalty_config(self) -> PenaltyConfig:
        return PenaltyConfig(
            k=self.k,
            q=self.q,
            lam=self.lam,
            mask_overlong=self.mask_overlong,
            max_sequence_tokens=self.max_sequence_tokens,
        )


@dataclass(frozen=True)
class KLRegSection:
    beta: float = 0.1
    estimator: str = "k1"
    reference_version: int = 0

    def config(self) -> KLRegConfig:
        return KLRegConfig(
            beta=self.beta,
            reference_version=self.reference_version,
            estimator=EstimatorKind(self.estimator),
        )


@dataclass(frozen=True)
class StalenessSection:
    max_version_lag: int = 2
    max_inflight: int = 8

    def policy(self) -> StalenessPolicy:
        return StalenessPolicy(
            max_version_lag=self.max_version_lag, max_inflight=self.max_inflight
        )


@dataclass(frozen=True)
class PackingSection:
    ranks: int = 2
    token_budget: int = 2048
    alpha: float = 0.1
    beta: float = 1.0

    def cost_model(self) -> CostModel:
        return CostModel(alpha=self.alpha, beta=self.beta)


def _default_nodes() -> tuple[dict, ...]:
    return tuple(
        {"id": i, "capacity": {"cpu": 8.0, "mem": 8.0, "disk": 8.0}} for i in range(4)
    )


@dataclass(frozen=True)
class FleetSection:
    nodes: tuple[dict, ...] = field(default_factory=_default_nodes)
    warmup_ticks: int = envsim.WARMUP_TICKS
    burst_factor: float = envsim.BURST_FACTOR
    queue_when_full: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(dict(n) for n in self.nodes))
        if not self.nodes:
            raise ConfigError("fleet.nodes must be non-empty")

    def build(self) -> Fleet:
        return Fleet.from_config(
            {
                "nodes": [dict(n) for n in self.nodes],
                "warmup_ticks": self.warmup_ticks,
                "burst_factor": self.burst_factor,
                "queue_when_full": self.queue_when_full,
            }
        )


@dataclass(frozen=True)
class CurriculumSection:
    exponent: float = 0.0


@dataclass(frozen=True)
class RunSection:
    num_prompts: int = 200
    group_size: int = 4
    depths: tuple[int, ...] = (1, 2, 3)
    steps: int | None = None
    groups_per_step: int = 10
    max_tokens: int = 48
    segment_budget: int = 14
    summary_len: int = 3
    max_segments: int = 4
    final_len: int = 8
    value_space: int = 24
    best_of_k: int = 8
    clip_eps: float | None = 0.2
    rl_lr: float = 0.01
    bc_episodes: int = 240
    bc_epochs: int = 2
    bc_batch: int = 16
    bc_lr: float = 0.03
    teacher_noise: float = 0.15
    mtp_distill_steps: int = 8
    pod_cpu: float = 1.0
    pod_mem: float = 1.0
    pod_disk: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if self.num_prompts < 0:
            raise ConfigError("run.num_prompts must be >= 0")
        if self.group_size < 2:
            raise ConfigError("run.group_size must be >= 2 (advantages need a group)")
        if not self.depths or any(d < 1 for d in self.depths):
            raise ConfigError("run.depths must be non-empty positive ints")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("run.steps must be >= 0 or null")
        if self.groups_per_step < 1:
            raise ConfigError("run.groups_per_step must be >= 1")
        if self.best_of_k < 1:
            raise ConfigError("run.best_of_k must be >= 1")
        if not 0.0 <= self.teacher_noise < 1.0:
            raise ConfigError("run.teacher_noise must be in [0, 1)")
        if self.value_space < max(self.depths) + 1:
            raise ConfigError("run.value_space too small for the deepest chain")

    def pod_spec(self) -> PodSpec:
        return PodSpec(cpu=self.pod_cpu, mem=self.pod_mem, disk=self.pod_disk)


@dataclass(frozen=True)
class ReportSection:
    require_improvement: bool = True
    min_final_mean_reward: float = 0.0
    min_final_best_of_k: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    reward: RewardSection = field(default_factory=RewardSection)
    klreg: KLRegSection = field(default_factory=KLRegSection)
    staleness: StalenessSection = field(default_factory=StalenessSection)
    packing: PackingSection = field(default_factory=PackingSection)
    fleet: FleetSection = field(default_factory=FleetSection)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    run: RunSection = field(default_factory=RunSection)
    report: ReportSection = field(default_factory=ReportSection)

    _SECTIONS = {
        "model": (ModelSection, None),
        "reward": (RewardSection, {"lambda": "lam"}),
        "klreg": (KLRegSection, None),
        "staleness": (StalenessSection, None),
        "packing": (PackingSection, None),
        "fleet": (FleetSection, None),
        "curriculum": (CurriculumSection, None),
        "run": (RunSection, None),
        "report": (ReportSection, None),
    }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("config root must be an object")
        payload = dict(data)
        kwargs: dict[str, Any] = {}
        if "seed" in payload:
            seed = payload.pop("seed")
            if not isinstance(seed, int) or isinstance(seed, bool):
                raise ConfigError("seed must be an integer")
            kwargs["seed"] = seed
        for name, (section_cls, aliases) in cls._SECTIONS.items():
            if name in payload:
                kwargs[name] = _parse_section(section_cls, payload.pop(name), name, aliases)
        if payload:
            raise ConfigError(f"unknown key {sorted(payload)[0]}")
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["reward"]["lambda"] = d["reward"].pop("lam")
        d["fleet"]["nodes"] = [dict(n) for n in self.fleet.nodes]
        return d


# --- metrics ------------------------------------------------------------------

METRICS_HEADER = (
    "step",
    "mean_reward",
    "best_of_k",
    "mean_tokens",
    "clip_fraction",
    "kl_estimate",
    "staleness",
    "groups_trained",
)


@dataclass(frozen=True)
class MetricsRow:
    """One training step's summary: reward level, reward headroom (best-of-k),
    token spend, clipping and KL pressure, and how stale its groups were."""

    step: int
    mean_reward: float
    best_of_k: float
    mean_tokens: float
    clip_fraction: float
    kl_estimate: float
    staleness: dict[int, int]
    groups_trained: int

    def staleness_str(self) -> str:
        return ";".join(f"{lag}:{n}" for lag, n in sorted(self.staleness.items()))

    def to_csv_row(self) -> list[str]:
        # float() strips numpy scalar types, whose repr is not parseable
        return [
            str(self.step),
            repr(float(self.mean_reward)),
            repr(float(self.best_of_k)),
            repr(float(self.mean_tokens)),
            repr(float(self.clip_fraction)),
            repr(float(self.kl_estimate)),
            self.staleness_str(),
            str(self.groups_trained),
        ]

    @classmethod
    def from_csv_row(cls, row: Sequence[str]) -> "MetricsRow":
        staleness: dict[int, int] = {}
        if row[6]:
            for part in row[6].split(";"):
                lag, n = part.split(":")
                staleness[int(lag)] = int(n)
        return cls(
            step=int(row[0]),
            mean_reward=float(row[1]),
            best_of_k=float(row[2]),
            mean_tokens=float(row[3]),
            clip_fraction=float(row[4]),
            kl_estimate=float(row[5]),
            staleness=staleness,
            groups_trained=int(row[7]),
        )


def write_metrics_csv(rows: Sequence[MetricsRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(row.to_csv_row())


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(METRICS_HEADER):
            raise ConfigError(f"unexpected metrics header in {path}: {header}")
        try:
            return [MetricsRow.from_csv_row(row) for row in reader]
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"malformed metrics row in {path}: {exc}") from exc


def best_of_k(rewards: np.ndarray | Sequence[Sequence[float]], k: int) -> float:
    """Expected best reward over k rollouts drawn without replacement.

    Exact over all C(G, k) subsets rather than a sampled estimate: with the
    group sorted ascending, the i-th order statistic (1-based) is the subset
    maximum in C(i-1, k-1) of them. Rows are prompts; the result averages
    the per-prompt expectation.
    """

    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim == 1:
        r = r[None, :]
    if r.ndim != 2 or r.shape[1] == 0:
        raise ValueError("rewards must be a non-empty matrix of group rewards")
    g = r.shape[1]
    if not 1 <= k <= g:
        raise ValueError(f"k must be in [1, {g}], got {k}")
    weights = np.array(
        [math.comb(i - 1, k - 1) for i in range(1, g + 1)], dtype=np.float64
    ) / math.comb(g, k)
    ordered = np.sort(r, axis=1)
    return float((ordered @ weights).mean())


# --- scripted demonstrator ----------------------------------------------------


@dataclass(frozen=True)
class TeacherConfig:
    """Shapes the demonstration corpus; mirrors the sampler's segmentation
    rules so cloned behavior transfers to the real rollout loop."""

    segment_budget: int = 14
    summary_len: int = 3
    max_segments: int = 4
    noise: float = 0.15
    value_space: int = 24
    max_steps: int = 512


def _noise_token(rng: np.random.Generator, cfg: TeacherConfig, vocab: int) -> int:
    # Filler drawn from outside the value range so it never mimics a key;
    # SEP is always available even when the value range touches the vocab end.
    lo = VALUE_BASE + cfg.value_space
    spare = vocab - lo
    pick = int(rng.integers(spare + 1))
    return SEP if pick == spare else lo + pick


def teacher_episode(
    task: dict, rng: np.random.Generator, cfg: TeacherConfig, vocab: int = toylm.VOCAB_SIZE
) -> list[tuple[list[int], list[bool]]]:
    """Run the scripted demonstrator against a key-chain task.

    The script follows the chain with lookups, probing until a lookup fails
    (the terminus has no outgoing edge), then echoes the last good value as
    a thinking token and submits it. The echo puts the answer directly
    before the submit call, where the argument position can actually see
    it. With probability `noise` a decision point emits a filler token
    first, so the clone stays stochastic and leaves headroom for RL.

    Returns (tokens, trainable_mask) per segment, prompt included.
    """

    segments: list[tuple[list[int], list[bool]]] = []
    value = int(task["start"])
    tokens: list[int] = [BOS, VALUE_BASE + value]
    mask: list[bool] = [False, False]
    records = 0
    after_error = False
    done = False

    def emit(tok: int, trainable: bool = True) -> None:
        nonlocal records
        tokens.append(tok)
        mask.append(trainable)
        records += 1

    for _ in range(cfg.max_steps):
        if done:
            break
        if records >= cfg.segment_budget and len(segments) < cfg.max_segments - 1:
            summary = [VALUE_BASE + value] * cfg.summary_len
            for tok in summary:
                emit(tok)
            segments.append((tokens, mask))
            tokens = list(summary)
            mask = [False] * len(summary)
            records = 0
            after_error = False
            continue
        if rng.random() < cfg.noise:
            emit(_noise_token(rng, cfg, vocab))
            continue
        if after_error:
            emit(VALUE_BASE + value)  # echo the answer next to the submit
            emit(TOK_SUBMIT)
            emit(VALUE_BASE + value)
            envsim.apply_tool(task, "submit", value)
            emit(toylm.TOK_RESULT, trainable=False)
            emit(EOS)
            done = True
            continue
        emit(TOK_LOOKUP)
        emit(VALUE_BASE + value)
        result = envsim.apply_tool(task, "lookup", value)
        if result.ok:
            emit(toylm.TOK_RESULT, trainable=False)
            emit(VALUE_BASE + int(result.value), trainable=False)
            value = int(result.value)
        else:
            emit(TOK_ERR, trainable=False)
            after_error = True
    segments.append((tokens, mask))
    return segments


def build_teacher_corpus(
    cfg: RunConfig, rng: np.random.Generator
) -> list[tuple[list[int], list[bool]]]:
    teacher = TeacherConfig(
        segment_budget=cfg.run.segment_budget,
        summary_len=cfg.run.summary_len,
        max_segments=cfg.run.max_segments,
        noise=cfg.run.teacher_noise,
        value_space=cfg.run.value_space,
    )
    segments: list[tuple[list[int], list[bool]]] = []
    for i in range(cfg.run.bc_episodes):
        depth = cfg.run.depths[i % len(cfg.run.depths)]
        task = envsim.make_keychain_task(depth, rng, value_space=cfg.run.value_space)
        segments.extend(teacher_episode(task, rng, teacher, vocab=cfg.model.vocab))
    return segments


def behavior_clone(
    params: ToyMoEParams,
    corpus: Sequence[tuple[list[int], list[bool]]],
    rng: np.random.Generator,
    *,
    epochs: int,
    batch: int,
    lr: float,
) -> float:
    """A few epochs of masked cross-entropy on the demonstration corpus.

    Deliberately undertrained: the point is a policy that succeeds often
    enough to produce reward variance within groups, not one that is
    already optimal.
    """

    opt = toylm.Adam(lr=lr)
    last = 0.0
    for _ in range(epochs):
        order = rng.permutation(len(corpus))
        for lo in range(0, len(order), batch):
            chunk = [corpus[i] for i in order[lo : lo + batch]]
            last, grads = toylm.ce_loss_and_grad(params, chunk)
            opt.step(params, grads)
    return last


# --- the run itself -----------------------------------------------------------


@dataclass(frozen=True)
class _Prompt:
    slot_id: int
    prompt_id: str
    depth: int


class _PodEnv:
    """Binds the sampler's tool channel to one forked pod."""

    def __init__(self, fleet: Fleet, pod_id: int) -> None:
        self.fleet = fleet
        self.pod_id = pod_id

    def call(self, tool: str, arg: int | None) -> envsim.ToolResult:
        return self.fleet.call_tool(self.pod_id, tool, arg)


class _Runner:
    def __init__(self, cfg: RunConfig, out_dir: str | Path) -> None:
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        # a leftover store would shift version numbering and break the
        # deterministic-per-seed contract, so never run on top of one
        for leftover in ("metrics.csv", "weights", "groups.jsonl", "audit.jsonl"):
            if (self.out / leftover).exists():
                raise ConfigError(
                    f"out_dir {self.out} already holds run artifacts ({leftover}); "
                    "use a fresh directory"
                )
        self.rng = np.random.Generator(np.random.Philox(cfg.seed))
        self.fleet = cfg.fleet.build()
        self.store = sync.LocalDirStore(self.out / "weights")
        self.publisher = sync.WeightPublisher(self.store)
        self.params = toylm.init_params(
            cfg.seed,
            vocab=cfg.model.vocab,
            dim=cfg.model.dim,
            num_experts=cfg.model.experts,
            top_k=cfg.model.top_k,
        )
        self.version = 0
        self.ref_params: ToyMoEParams | None = None
        self.engine: SamplerEngine | None = None
        self.opt = toylm.Adam(lr=cfg.run.rl_lr)
        self.policy = cfg.staleness.policy()
        self.penalty = cfg.reward.penalty_config()
        self.klcfg = cfg.klreg.config()
        self.groups_path = self.out / "groups.jsonl"
        self.audit_path = self.out / "audit.jsonl"
        self.metrics_path = self.out / "metrics.csv"
        self.rows: list[MetricsRow] = []
        self.history: list[reconciler.GroupObservation] = []
        self.buckets = tuple(sorted(set(cfg.run.depths)))
        self.trained: set[str] = set()
        self.step = 0

    # -- warm start --

    def warm_start(self) -> None:
        corpus = build_teacher_corpus(self.cfg, self.rng)
        if corpus:
            behavior_clone(
                self.params,
                corpus,
                self.rng,
                epochs=self.cfg.run.bc_epochs,
                batch=self.cfg.run.bc_batch,
                lr=self.cfg.run.bc_lr,
            )
            if self.cfg.run.mtp_distill_steps > 0:
                distill_opt = toylm.Adam(lr=self.cfg.run.bc_lr)
                batches = [tokens for tokens, _ in corpus[: self.cfg.run.bc_batch]]
                for _ in range(self.cfg.run.mtp_distill_steps):
                    _, grads = toylm.distill_loss_and_grad(self.params, batches)
                    distill_opt.step(self.params, grads)
        self.publisher.publish(0, params_to_shards(self.params), force_full=True)
        self.ref_params = self.params.copy()
        self.engine = SamplerEngine(0, self.params.copy())

    # -- sampling plumbing --

    def _params_for(self, version: int) -> ToyMoEParams:
        assert self.engine is not None
        if version == self.engine.version:
            return self.engine.params
        return params_from_shards(
            sync.reconstruct(self.store, version), top_k=self.cfg.model.top_k
        )

    def _rollout_group(self, prompt: _Prompt) -> Group | None:
        cfg = self.cfg
        task = envsim.make_keychain_task(
            prompt.depth, self.rng, value_space=cfg.run.value_space
        )
        master = self.fleet.create_pod(cfg.run.pod_spec(), task=task)
        self.fleet.settle()
        rollouts = []
        breakdowns = []
        try:
            for _ in range(cfg.run.group_size):
                child = self.fleet.fork_pod(master)
                ref = self.fleet.snapshot(child)
                env = _PodEnv(self.fleet, child)
                try:
                    rollout = toylm.sample(
                        self._params_for,
                        [BOS, VALUE_BASE + int(task["start"])],
                        env,
                        cfg.run.max_tokens,
                        lambda: self.engine.version,
                        rng=self.rng,
                        segment_budget=cfg.run.segment_budget,
                        summary_len=cfg.run.summary_len,
                        max_segments=cfg.run.max_segments,
                        final_len=cfg.run.final_len,
                        env_snapshot_ref=ref,
                    )
                except RolloutFailure:
                    return None
                child_task = self.fleet.pods[child].task
                task_reward = envsim.verify_task(child_task)
                behaviors = evaluate_behaviors(
                    list(cfg.reward.behaviors), rollout, child_task
                )
                overlong = rollout.generated_tokens() >= min(
                    cfg.run.max_tokens, cfg.reward.max_sequence_tokens
                )
                breakdown = composite_reward(
                    task_reward,
                    behaviors,
                    rollout_cost_features(rollout),
                    self.penalty,
                    overlong=overlong,
                )
                rollouts.append(dataclasses.replace(rollout, final_reward=breakdown))
                breakdowns.append(breakdown)
                self.fleet.terminate(child)
        finally:
            self.fleet.terminate(master)
        totals = [b.total for b in breakdowns]
        versions = {
            rec.policy_version for r in rollouts for rec in r.iter_records()
        }
        return Group(
            prompt_id=prompt.prompt_id,
            rollouts=tuple(rollouts),
            rewards=tuple(totals),
            advantages=tuple(group_advantages(totals)),
            policy_versions=tuple(versions),
        )

    # -- scheduling --

    def _pick_dispatch(
        self, dispatchable: Sequence[int], prompts: Mapping[int, _Prompt]
    ) -> int:
        """Curriculum-weighted choice of the next slot among the ones the
        scheduler allows. Falls back to the first candidate when the drawn
        bucket has nothing pending."""

        if len(dispatchable) == 1:
            return dispatchable[0]
        weights = reconciler.curriculum_weights(
            self.history, list(self.buckets), exponent=self.cfg.curriculum.exponent
        )
        probs = [weights[b] for b in self.buckets]
        drawn = self.buckets[
            int(np.searchsorted(np.cumsum(probs), self.rng.random(), side="right"))
            % len(self.buckets)
        ]
        for sid in dispatchable:
            if prompts[sid].depth == drawn:
                return sid
        return dispatchable[0]

    # -- training --

    def _train_step(self, batch: list[tuple[int, Group]], slots: dict[int, SampleSlot]) -> None:
        cfg = self.cfg
        kept: list[tuple[int, Group]] = []
        for sid, group in batch:
            if reconciler.within_staleness_bound(group, self.version, self.policy):
                slots[sid] = reconciler.advance(slots[sid], SlotEvent.PACK)
                kept.append((sid, group))
            else:
                slots[sid] = reconciler.advance(slots[sid], SlotEvent.FAIL)
                reconciler.audit_append(
                    self.audit_path, group.prompt_id, SlotState.FAILED, self.step
                )
        if not kept:
            return
        seqs = []
        seq_group: list[int] = []
        for gi, (_, group) in enumerate(kept):
            for seq in group_training_sequences(group):
                seqs.append(seq)
                seq_group.append(gi)
        lengths = [len(s.tokens) for s in seqs]
        plan = pack(lengths, cfg.packing.ranks, cfg.packing.cost_model(), cfg.packing.token_budget)
        order = sorted(range(len(seqs)), key=lambda i: (plan.assignment[i], i))
        batch_seqs = [seqs[i] for i in order]
        _, grads, metrics = toylm.loss_and_grad(
            self.params,
            batch_seqs,
            self.klcfg if self.klcfg.beta > 0 else None,
            clip_eps=cfg.run.clip_eps,
            ref_params=self.ref_params,
            alpha=cfg.model.replay_alpha,
        )
        self.opt.step(self.params, grads)
        trained_version = self.version
        self.version += 1
        self.publisher.publish(self.version, params_to_shards(self.params))
        sync.poll_and_hotload(self.engine, self.store)

        staleness: dict[int, int] = {}
        rewards_matrix = []
        token_counts = []
        for sid, group in kept:
            slots[sid] = reconciler.advance(slots[sid], SlotEvent.TRAIN)
            reconciler.audit_append(
                self.audit_path, group.prompt_id, SlotState.TRAINED, self.step
            )
            self.trained.add(group.prompt_id)
            lag = trained_version - min(group.policy_versions)
            staleness[lag] = staleness.get(lag, 0) + 1
            rewards_matrix.append(list(group.rewards))
            token_counts.extend(r.generated_tokens() for r in group.rollouts)
        k_eff = min(cfg.run.best_of_k, cfg.run.group_size)
        row = MetricsRow(
            step=self.step,
            mean_reward=float(np.mean([r for row_ in rewards_matrix for r in row_])),
            best_of_k=best_of_k(np.asarray(rewards_matrix), k_eff),
            mean_tokens=float(np.mean(token_counts)),
            clip_fraction=float(metrics["clip_fraction"]),
            kl_estimate=float(metrics["kl_estimate"]),
            staleness=staleness,
            groups_trained=len(kept),
        )
        self.rows.append(row)
        write_metrics_csv(self.rows, self.metrics_path)
        self.step += 1

    # -- main loop --

    def run(self) -> list[MetricsRow]:
        cfg = self.cfg
        self.warm_start()
        write_metrics_csv(self.rows, self.metrics_path)
        with open(self.out / "run_config.json", "w", encoding="utf-8") as fh:
            json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

        prompts: dict[int, _Prompt] = {}
        slots: dict[int, SampleSlot] = {}
        for i in range(cfg.run.num_prompts):
            prompt = _Prompt(
                slot_id=i,
                prompt_id=self.rng.bytes(16).hex(),
                depth=cfg.run.depths[i % len(cfg.run.depths)],
            )
            prompts[i] = prompt
            slots[i] = SampleSlot(slot_id=i, prompt_id=prompt.prompt_id)

        max_steps = cfg.run.steps
        while max_steps is None or self.step < max_steps:
            batch: list[tuple[int, Group]] = []
            while len(batch) < cfg.run.groups_per_step:
                plan = reconciler.schedule(
                    list(slots.values()), self.trained, self.version, self.policy
                )
                for sid in plan.requeue:
                    slots[sid] = reconciler.advance(slots[sid], SlotEvent.FAIL)
                    slots[sid] = reconciler.advance(slots[sid], SlotEvent.RETRY)
                if not plan.dispatch:
                    break
                sid = self._pick_dispatch(plan.dispatch, prompts)
                slots[sid] = reconciler.advance(
                    slots[sid], SlotEvent.DISPATCH, version=self.version
                )
                group = self._rollout_group(prompts[sid])
                if group is None:
                    slots[sid] = reconciler.advance(slots[sid], SlotEvent.FAIL)
                    reconciler.audit_append(
                        self.audit_path, prompts[sid].prompt_id, SlotState.FAILED, self.step
                    )
                    continue
                slots[sid] = reconciler.advance(slots[sid], SlotEvent.FINISH_ROLLOUT)
                slots[sid] = reconciler.advance(slots[sid], SlotEvent.SCORE)
                reconciler.checkpoint_group(group, self.groups_path)
                slots[sid] = reconciler.advance(slots[sid], SlotEvent.GROUP_COMPLETE)
                self.history.append(
                    reconciler.observe_group(prompts[sid].depth, group)
                )
                batch.append((sid, group))
            if not batch:
                break
            self._train_step(batch, slots)

        with open(self.out / "run_state.json", "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "final_version": self.version,
                    "steps": self.step,
                    "prompts_trained": len(self.trained),
                    "prompts_total": cfg.run.num_prompts,
                },
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")
        return self.rows


def run_rl(cfg: RunConfig, out_dir: str | Path) -> list[MetricsRow]:
    """Execute a full desk run; returns the per-step metrics.

    Artifacts land in out_dir: metrics.csv, groups.jsonl (scored groups,
    checksummed), audit.jsonl (terminal slot states), weights/ (the
    manifest store with every published version), run_config.json and
    run_state.json. A zero-step run still produces all of them.
    """

    return _Runner(cfg, out_dir).run()


# --- reporting ----------------------------------------------------------------


def emit_report(
    rows: Sequence[MetricsRow] | str | Path,
    report: ReportSection,
    out_dir: str | Path,
) -> tuple[dict, int]:
    """Summarize a run and judge it against the report thresholds.

    Accepts the metrics rows directly or the path of a metrics CSV. Writes
    summary.json under out_dir. The exit code is 0 only when every
    configured threshold holds; each violated threshold is listed by name
    so a failing run says what failed.
    """

    if isinstance(rows, (str, Path)):
        rows = read_metrics_csv(rows)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failures: list[str] = []
    summary: dict[str, Any] = {"steps": len(rows)}
    if not rows:
        failures.append("no_metrics")
    else:
        first, last = rows[0], rows[-1]
        summary.update(
            {
                "first_mean_reward": first.mean_reward,
                "final_mean_reward": last.mean_reward,
                "first_best_of_k": first.best_of_k,
                "final_best_of_k": last.best_of_k,
                "final_mean_tokens": last.mean_tokens,
                "final_kl_estimate": last.kl_estimate,
                "groups_trained": sum(r.groups_trained for r in rows),
            }
        )
        if report.require_improvement:
            if not last.mean_reward > first.mean_reward:
                failures.append("mean_reward_not_improved")
            if not last.best_of_k > first.best_of_k:
                failures.append("best_of_k_not_improved")
        if last.mean_reward < report.min_final_mean_reward:
            failures.append("final_mean_reward_below_min")
        if last.best_of_k < report.min_final_best_of_k:
            failures.append("final_best_of_k_below_min")
    summary["failures"] = failures
    summary["ok"] = not failures
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary, (0 if not failures else 1)
