"""Tiny mixture-of-experts policy: routing, replay, losses, sampling.

The model is deliberately small and attention-free. Position i mixes its own
embedding, the previous token's embedding, and the running prefix mean, so
every hidden state depends only on its prefix (causal by construction) while
gradients still couple positions. A router picks top_k of E experts per
position; combine weights are a softmax over the selected gate logits, so
gradients always flow through the router even when the selection is replayed
from a rollout trace rather than recomputed.

Everything numeric is plain numpy. Losses run in float64 regardless of the
float32 master weights: the analytic gradients here are checked against
central finite differences, which float32 cannot support.

Token-id layout for the sampler grammar (vocabulary defaults to 64):
    0 PAD, 1 BOS, 2 SEP, 3 EOS, 4 lookup, 5 submit, 6 todo,
    7 RESULT, 8 ERR, 10.. value tokens (value v <-> token 10+v).
Sampling never masks the distribution: every emitted token's logprob is the
plain full-vocabulary log-softmax value, which keeps importance ratios in
the loss exact. The grammar only decides what a sampled token *does*.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import (
    Category,
    ChainedRollout,
    RouterTrace,
    Segment,
    TokenRecord,
    TraceSource,
    TrainingSequence,
)
from .klmath import EstimatorKind

VOCAB_SIZE = 64
HIDDEN_DIM = 32
NUM_EXPERTS = 8
TOP_K = 2
REPLAY_ALPHA = 0.5

MIX_SELF = 0.5
MIX_PREV = 0.3
MIX_PREFIX = 0.2

PAD, BOS, SEP, EOS = 0, 1, 2, 3
TOK_LOOKUP, TOK_SUBMIT, TOK_TODO = 4, 5, 6
TOK_RESULT, TOK_ERR = 7, 8
VALUE_BASE = 10

TOOL_TOKENS = {TOK_LOOKUP: "lookup", TOK_SUBMIT: "submit", TOK_TODO: "todo"}


class ToyLMError(ValueError):
    pass


class RolloutFailure(RuntimeError):
    """The environment failed mid-rollout; the rollout is unusable."""


@dataclass(frozen=True)
class KLRegConfig:
    beta: float = 0.0
    reference_version: int = 0
    estimator: EstimatorKind = EstimatorKind.K1

    def __post_init__(self) -> None:
        object.__setattr__(self, "estimator", EstimatorKind(self.estimator))
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


@dataclass
class ToyMoEParams:
    embedding: np.ndarray  # [V, d]
    router: np.ndarray  # [d, E]
    experts: tuple[np.ndarray, ...]  # E of [d, d]
    output_head: np.ndarray  # [d, V]
    mtp_head: np.ndarray  # [d, V]
    top_k: int = TOP_K

    def __post_init__(self) -> None:
        self.experts = tuple(self.experts)
        if not 1 <= self.top_k <= len(self.experts):
            raise ToyLMError(f"top_k {self.top_k} out of range for {len(self.experts)} experts")
        for name, arr in self.to_dict().items():
            if not np.isfinite(arr).all():
                raise ToyLMError(f"non-finite values in {name}")

    @property
    def vocab(self) -> int:
        return self.embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def to_dict(self) -> dict[str, np.ndarray]:
        d = {"embedding": self.embedding, "router": self.router}
        for i, w in enumerate(self.experts):
            d[f"expert_{i}"] = w
        d["output_head"] = self.output_head
        d["mtp_head"] = self.mtp_head
        return d

    @classmethod
    def from_dict(cls, arrays: Mapping[str, np.ndarray], top_k: int = TOP_K) -> "ToyMoEParams":
        expert_names = sorted(
            (n for n in arrays if n.startswith("expert_")),
            key=lambda n: int(n.split("_")[1]),
        )
        return cls(
            embedding=arrays["embedding"],
            router=arrays["router"],
            experts=tuple(arrays[n] for n in expert_names),
            output_head=arrays["output_head"],
            mtp_head=arrays["mtp_head"],
            top_k=top_k,
        )

    def copy(self) -> "ToyMoEParams":
        return ToyMoEParams.from_dict(
            {k: v.copy() for k, v in self.to_dict().items()}, top_k=self.top_k
        )

    def astype(self, dtype) -> "ToyMoEParams":
        return ToyMoEParams.from_dict(
            {k: v.astype(dtype) for k, v in self.to_dict().items()}, top_k=self.top_k
        )


def init_params(
    seed: int,
    vocab: int = VOCAB_SIZE,
    dim: int = HIDDEN_DIM,
    num_experts: int = NUM_EXPERTS,
    top_k: int = TOP_K,
) -> ToyMoEParams:
    rng = np.random.Generator(np.random.Philox(seed))
    s = 1.0 / np.sqrt(dim)
    return ToyMoEParams(
        embedding=rng.normal(size=(vocab, dim)).astype(np.float32),
        router=(rng.normal(size=(dim, num_experts)) * s).astype(np.float32),
        experts=tuple(
            (rng.normal(size=(dim, dim)) * s).astype(np.float32)
            for _ in range(num_experts)
        ),
        output_head=(rng.normal(size=(dim, vocab)) * s).astype(np.float32),
        mtp_head=(rng.normal(size=(dim, vocab)) * s).astype(np.float32),
        top_k=top_k,
    )


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def replay_filter(
    gates: np.ndarray, replayed: Sequence[int], k: int, alpha: float
) -> list[int]:
    """Plausibility-filter a replayed expert selection against fresh gates.

    ``gates`` are the current router's normalized scores (nonnegative), so
    alpha=0 disables the filter entirely. A replayed expert survives in its
    slot iff its score is at least alpha times the weakest fresh top-k
    score; evicted slots are refilled with the strongest experts outside
    the replayed set, in fresh-score order.
    """

    gates = np.asarray(gates, dtype=np.float64)
    replayed = [int(e) for e in replayed]
    if len(replayed) != k:
        raise ToyLMError(f"replayed selection has {len(replayed)} entries, expected {k}")
    if len(set(replayed)) != k:
        raise ToyLMError("replayed experts must be distinct")
    if any(e < 0 or e >= len(gates) for e in replayed):
        raise ToyLMError("replayed expert index out of range")
    order = np.argsort(-gates, kind="stable")
    threshold = alpha * gates[order[:k]].min()
    kept = {e for e in replayed if gates[e] >= threshold}
    used = set(replayed)
    candidates = (int(e) for e in order if int(e) not in used)
    out: list[int] = []
    for e in replayed:
        if e in kept:
            out.append(e)
        else:
            c = next(candidates)
            used.add(c)
            out.append(c)
    return out


@dataclass
class ForwardCache:
    tokens: np.ndarray  # [n]
    h: np.ndarray  # [n, d]
    gates: np.ndarray  # [n, E]
    probs: np.ndarray  # [n, E]
    selected: np.ndarray  # [n, k]
    combine: np.ndarray  # [n, k]
    u: np.ndarray  # [n, k, d]
    o: np.ndarray  # [n, d]
    logits: np.ndarray  # [n, V]
    mtp_logits: np.ndarray  # [n, V]
    traces: list[RouterTrace]


def _hidden(params: ToyMoEParams, tokens: np.ndarray, dtype) -> np.ndarray:
    emb = params.embedding.astype(dtype)[tokens]
    n = len(tokens)
    prev = emb[np.maximum(np.arange(n) - 1, 0)]
    prefix = np.cumsum(emb, axis=0) / np.arange(1, n + 1, dtype=dtype)[:, None]
    return MIX_SELF * emb + MIX_PREV * prev + MIX_PREFIX * prefix


def _forward_cache(
    params: ToyMoEParams,
    tokens: np.ndarray,
    replay: Sequence[RouterTrace | None] | None = None,
    *,
    alpha: float = REPLAY_ALPHA,
    dtype=np.float64,
) -> ForwardCache:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) == 0:
        raise ToyLMError("tokens must be a non-empty 1-d sequence")
    if (tokens < 0).any() or (tokens >= params.vocab).any():
        raise ToyLMError("token id out of vocabulary")
    if replay is not None and len(replay) != len(tokens):
        raise ToyLMError(
            f"replay has {len(replay)} traces for {len(tokens)} positions"
        )
    n, k = len(tokens), params.top_k
    h = _hidden(params, tokens, dtype)
    gates = h @ params.router.astype(dtype)
    probs = _softmax(gates)

    selected = np.empty((n, k), dtype=np.int64)
    traces: list[RouterTrace] = []
    for i in range(n):
        order = np.argsort(-gates[i], kind="stable")
        trace_in = replay[i] if replay is not None else None
        if trace_in is None:
            sel = order[:k].tolist()
            source = TraceSource.FRESH
        else:
            sel = replay_filter(probs[i], trace_in.selected, k, alpha)
            source = (
                TraceSource.REPLAYED
                if set(sel) == set(int(e) for e in trace_in.selected)
                else TraceSource.REPLACED
            )
        selected[i] = sel
        traces.append(
            RouterTrace(
                gate_scores=tuple(float(v) for v in probs[i].astype(np.float32)),
                selected=tuple(int(e) for e in sel),
                source=source,
            )
        )

    combine = _softmax(np.take_along_axis(gates, selected, axis=1))
    d = params.dim
    u = np.empty((n, k, d), dtype=dtype)
    for e in range(params.num_experts):
        rows, slots = np.nonzero(selected == e)
        if rows.size:
            u[rows, slots] = np.tanh(h[rows] @ params.experts[e].astype(dtype))
    o = (combine[:, :, None] * u).sum(axis=1)
    logits = o @ params.output_head.astype(dtype)
    mtp_logits = o @ params.mtp_head.astype(dtype)
    return ForwardCache(
        tokens=tokens,
        h=h,
        gates=gates,
        probs=probs,
        selected=selected,
        combine=combine,
        u=u,
        o=o,
        logits=logits,
        mtp_logits=mtp_logits,
        traces=traces,
    )


def forward(
    params: ToyMoEParams,
    tokens: Sequence[int],
    replay: Sequence[RouterTrace | None] | None = None,
    *,
    alpha: float = REPLAY_ALPHA,
) -> tuple[np.ndarray, list[RouterTrace]]:
    """Next-token logits per position plus the routing actually used.

    With ``replay`` given, expert selection is taken from the traces (after
    plausibility filtering); gate scores and combine weights are always
    computed fresh so the router receives gradients either way.
    """

    cache = _forward_cache(params, np.asarray(tokens), replay, alpha=alpha)
    return cache.logits, cache.traces


def _zero_grads(params: ToyMoEParams) -> dict[str, np.ndarray]:
    return {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.to_dict().items()}


def _backward(
    params: ToyMoEParams,
    cache: ForwardCache,
    dlogits: np.ndarray,
    grads: dict[str, np.ndarray],
    dmtp: np.ndarray | None = None,
) -> None:
    """Accumulate parameter gradients for d(loss)/d(logits) rows.

    ``dmtp`` (same shape, against mtp_logits) is treated stop-gradient on
    the trunk: it only touches the mtp head.
    """

    dtype = cache.h.dtype
    out_head = params.output_head.astype(dtype)
    router = params.router.astype(dtype)
    n = len(cache.tokens)

    grads["output_head"] += cache.o.T @ dlogits
    if dmtp is not None:
        grads["mtp_head"] += cache.o.T @ dmtp
    do = dlogits @ out_head.T

    dw = np.einsum("nd,nkd->nk", do, cache.u)
    du = cache.combine[:, :, None] * do[:, None, :]
    dz = (1.0 - cache.u**2) * du
    # softmax-over-selected backward
    dg_sel = cache.combine * (dw - (cache.combine * dw).sum(axis=1, keepdims=True))
    dg_full = np.zeros_like(cache.gates)
    dg_full[np.arange(n)[:, None], cache.selected] = dg_sel

    grads["router"] += cache.h.T @ dg_full
    dh = dg_full @ router.T
    for e in range(params.num_experts):
        rows, slots = np.nonzero(cache.selected == e)
        if rows.size == 0:
            continue
        dz_e = dz[rows, slots]
        grads[f"expert_{e}"] += cache.h[rows].T @ dz_e
        dh[rows] += dz_e @ params.experts[e].astype(dtype).T

    # hidden-state mixing backward; prefix term is a reverse cumsum of the
    # per-position contributions scaled by 1/(i+1)
    idx = np.arange(n)
    c = (MIX_PREFIX / (idx + 1))[:, None] * dh
    suffix = np.cumsum(c[::-1], axis=0)[::-1]
    np.add.at(grads["embedding"], cache.tokens, MIX_SELF * dh + suffix)
    np.add.at(grads["embedding"], cache.tokens[np.maximum(idx - 1, 0)], MIX_PREV * dh)


def _kl_values_and_dldl(
    ell: np.ndarray, ell_ref: np.ndarray, kind: EstimatorKind
) -> tuple[np.ndarray, np.ndarray]:
    """Per-token KL penalty value and its derivative w.r.t. ell.

    log r = ell_ref - ell with samples drawn from the policy side.
    """

    lr = ell_ref - ell
    if kind is EstimatorKind.K1:
        return -lr, np.ones_like(lr)
    if kind is EstimatorKind.K2:
        return 0.5 * lr * lr, -lr
    return np.expm1(lr) - lr, 1.0 - np.exp(lr)


def loss_and_grad(
    params: ToyMoEParams,
    batch: Sequence[TrainingSequence],
    klcfg: KLRegConfig | None = None,
    clip_eps: float | None = 0.2,
    ref_params: ToyMoEParams | None = None,
    *,
    alpha: float = REPLAY_ALPHA,
) -> tuple[float, dict[str, np.ndarray], dict[str, float]]:
    """Clipped importance-weighted policy loss plus optional KL penalty.

    Per trainable token t (predicted at position t-1):
        rho = exp(logprob_now - logprob_at_sampling)
        surrogate = min(rho * A, clip(rho, 1-eps, 1+eps) * A)
    loss = -mean(surrogate) + beta * mean(k_est), averaged over the count
    of trainable tokens in non-masked sequences. Router selections are
    replayed from the sequences' traces; the reference forward runs fresh.
    """

    if not batch:
        raise ToyLMError("empty batch")
    beta = klcfg.beta if klcfg is not None else 0.0
    kind = klcfg.estimator if klcfg is not None else EstimatorKind.K1
    if beta > 0 and ref_params is None:
        raise ToyLMError("KL penalty requires ref_params")

    p64 = params.astype(np.float64)
    ref64 = ref_params.astype(np.float64) if ref_params is not None else None
    seqs = [s for s in batch if not s.zero_loss_weight]
    n_tokens = sum(sum(s.trainable) for s in seqs)
    grads = _zero_grads(params)
    metrics = {
        "mean_ratio": 0.0,
        "clip_fraction": 0.0,
        "kl_estimate": 0.0,
        "n_tokens": float(n_tokens),
        "pg_loss": 0.0,
        "kl_loss": 0.0,
    }
    if n_tokens == 0:
        return 0.0, grads, metrics

    loss_pg = 0.0
    loss_kl = 0.0
    ratio_sum = 0.0
    clip_count = 0
    kl_sum = 0.0
    for seq in seqs:
        t_idx = np.flatnonzero(seq.trainable)
        if t_idx.size == 0:
            continue
        tokens = np.asarray(seq.tokens, dtype=np.int64)
        n = len(tokens)
        if any(seq.sampling_logprobs[t] is None for t in t_idx):
            raise ToyLMError("trainable token without sampling logprob")
        replay = [seq.traces[i + 1] for i in range(n - 1)] + [None]
        cache = _forward_cache(p64, tokens, replay, alpha=alpha)

        rows = t_idx - 1
        logp = _log_softmax(cache.logits[rows])
        pick = np.arange(t_idx.size)
        ell = logp[pick, tokens[t_idx]]
        b = np.asarray(seq.sampling_logprobs, dtype=np.float64)[t_idx]
        adv = np.asarray(seq.weights, dtype=np.float64)[t_idx]
        rho = np.exp(ell - b)

        unclipped = rho * adv
        if clip_eps is None:
            surr = unclipped
            active = np.ones_like(rho, dtype=bool)
        else:
            clipped = np.clip(rho, 1.0 - clip_eps, 1.0 + clip_eps) * adv
            surr = np.minimum(unclipped, clipped)
            active = unclipped <= clipped
        dsurr_dell = np.where(active, unclipped, 0.0)
        loss_pg -= surr.sum() / n_tokens
        ratio_sum += rho.sum()
        clip_count += int((~active).sum())

        dk_dell = np.zeros_like(ell)
        if ref64 is not None:
            ref_cache = _forward_cache(ref64, tokens, None)
            ell_ref = _log_softmax(ref_cache.logits[rows])[pick, tokens[t_idx]]
            kvals, dk_dell = _kl_values_and_dldl(ell, ell_ref, kind)
            kl_sum += kvals.sum()
            loss_kl += beta * kvals.sum() / n_tokens

        dell = (-dsurr_dell + beta * dk_dell) / n_tokens
        sm = np.exp(logp)
        drows = -dell[:, None] * sm
        drows[pick, tokens[t_idx]] += dell
        dlogits = np.zeros_like(cache.logits)
        dlogits[rows] = drows
        _backward(p64, cache, dlogits, grads)

    metrics["mean_ratio"] = ratio_sum / n_tokens
    metrics["clip_fraction"] = clip_count / n_tokens
    metrics["kl_estimate"] = kl_sum / n_tokens if ref64 is not None else 0.0
    metrics["pg_loss"] = loss_pg
    metrics["kl_loss"] = loss_kl
    return float(loss_pg + loss_kl), grads, metrics


def ce_loss_and_grad(
    params: ToyMoEParams,
    sequences: Sequence[tuple[Sequence[int], Sequence[bool]]],
) -> tuple[float, dict[str, np.ndarray]]:
    """Plain next-token cross-entropy over masked positions (fresh routing).

    Used for behavior-cloning warmup; sequences are (tokens, train_mask)
    pairs where mask[t] marks tokens that contribute loss.
    """

    p64 = params.astype(np.float64)
    grads = _zero_grads(params)
    n_tokens = sum(sum(bool(m) for m in mask[1:]) for _, mask in sequences)
    if n_tokens == 0:
        return 0.0, grads
    loss = 0.0
    for tokens_in, mask in sequences:
        tokens = np.asarray(tokens_in, dtype=np.int64)
        t_idx = np.flatnonzero([False] + [bool(m) for m in mask[1:]])
        if t_idx.size == 0:
            continue
        cache = _forward_cache(p64, tokens, None)
        rows = t_idx - 1
        logp = _log_softmax(cache.logits[rows])
        pick = np.arange(t_idx.size)
        loss -= logp[pick, tokens[t_idx]].sum() / n_tokens
        sm = np.exp(logp)
        drows = sm / n_tokens
        drows[pick, tokens[t_idx]] -= 1.0 / n_tokens
        dlogits = np.zeros_like(cache.logits)
        dlogits[rows] = drows
        _backward(p64, cache, dlogits, grads)
    return float(loss), grads


def mtp_distill_loss(main_logits: np.ndarray, mtp_logits: np.ndarray) -> float:
    """Mean KL(softmax(main) || softmax(mtp)) over aligned rows; the main
    side is a constant target."""

    main_logits = np.asarray(main_logits, dtype=np.float64)
    mtp_logits = np.asarray(mtp_logits, dtype=np.float64)
    if main_logits.shape != mtp_logits.shape:
        raise ToyLMError(
            f"shape mismatch {main_logits.shape} vs {mtp_logits.shape}"
        )
    if main_logits.ndim == 1:
        main_logits = main_logits[None, :]
        mtp_logits = mtp_logits[None, :]
    log_p = _log_softmax(main_logits)
    log_q = _log_softmax(mtp_logits)
    p = np.exp(log_p)
    return float((p * (log_p - log_q)).sum(axis=-1).mean())


def distill_loss_and_grad(
    params: ToyMoEParams, token_batches: Sequence[Sequence[int]]
) -> tuple[float, dict[str, np.ndarray]]:
    """Self-distillation of the main head into the mtp head.

    The mtp head at position i predicts token i+2, so its target is the
    main head's distribution at position i+1. Gradient reaches only the
    mtp head; trunk and main head are frozen targets.
    """

    p64 = params.astype(np.float64)
    grads = _zero_grads(params)
    total_rows = sum(max(len(t) - 1, 0) for t in token_batches)
    if total_rows == 0:
        return 0.0, grads
    loss = 0.0
    for tokens_in in token_batches:
        tokens = np.asarray(tokens_in, dtype=np.int64)
        if len(tokens) < 2:
            continue
        cache = _forward_cache(p64, tokens, None)
        log_p = _log_softmax(cache.logits[1:])
        log_q = _log_softmax(cache.mtp_logits[:-1])
        p = np.exp(log_p)
        loss += (p * (log_p - log_q)).sum() / total_rows
        dq = (np.exp(log_q) - p) / total_rows
        grads["mtp_head"] += cache.o[:-1].T @ dq
    return float(loss), grads


class Adam:
    """Standard Adam over the parameter dict, float64 moments, in-place
    float32 updates on the master copy."""

    def __init__(
        self,
        lr: float = 0.02,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: ToyMoEParams, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        pd = params.to_dict()
        for name, arr in pd.items():
            g = np.asarray(grads[name], dtype=np.float64)
            m = self._m.setdefault(name, np.zeros_like(g))
            v = self._v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**self.t)
            vhat = v / (1 - self.beta2**self.t)
            arr -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(arr.dtype)


# --- shard serialization ------------------------------------------------------


def serialize_shard(name: str, arr: np.ndarray) -> bytes:
    """One shard = JSON header line (name, shape, dtype, digest) + raw
    little-endian float32 bytes."""

    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    raw = arr32.tobytes()
    header = {
        "name": name,
        "shape": list(arr32.shape),
        "dtype": "<f4",
        "digest": hashlib.sha256(raw).hexdigest(),
    }
    return json.dumps(header).encode("utf-8") + b"\n" + raw


def deserialize_shard(data: bytes) -> tuple[str, np.ndarray]:
    nl = data.index(b"\n")
    header = json.loads(data[:nl].decode("utf-8"))
    raw = data[nl + 1 :]
    if hashlib.sha256(raw).hexdigest() != header["digest"]:
        raise ToyLMError(f"shard {header['name']!r} digest mismatch")
    arr = np.frombuffer(raw, dtype=header["dtype"]).reshape(header["shape"])
    return header["name"], arr.copy()


def params_to_shards(params: ToyMoEParams) -> dict[str, bytes]:
    return {name: serialize_shard(name, arr) for name, arr in params.to_dict().items()}


def params_from_shards(
    shards: Mapping[str, bytes], top_k: int = TOP_K
) -> ToyMoEParams:
    arrays: dict[str, np.ndarray] = {}
    for key, data in shards.items():
        name, arr = deserialize_shard(data)
        if name != key:
            raise ToyLMError(f"shard key {key!r} holds array named {name!r}")
        arrays[name] = arr
    return ToyMoEParams.from_dict(arrays, top_k=top_k)


class SamplerEngine:
    """Sampler-side parameter snapshot with the hotload contract: `version`
    plus `adopt(version, shards)`, the interface the manifest poller uses.
    Adoption replaces the whole snapshot at once."""

    def __init__(self, version: int, params: ToyMoEParams) -> None:
        self.version = int(version)
        self.params = params

    def adopt(self, version: int, shards: Mapping[str, bytes]) -> None:
        self.params = params_from_shards(shards, top_k=self.params.top_k)
        self.version = int(version)


# --- autoregressive sampling --------------------------------------------------


def _tool_output_runs(records: Sequence[TokenRecord]) -> int:
    runs = 0
    prev_out = False
    for rec in records:
        is_out = rec.category is Category.TOOL_OUTPUT
        if is_out and not prev_out:
            runs += 1
        prev_out = is_out
    return runs


def _build_segment(prompt: tuple[int, ...], records: list[TokenRecord]) -> Segment:
    n_tool = sum(1 for r in records if r.category is Category.TOOL_CALL)
    return Segment(
        prompt_tokens=prompt,
        records=tuple(records),
        tool_calls=n_tool // 2,
        turns=(1 if records else 0) + _tool_output_runs(records),
    )


def sample(
    params_provider: Callable[[int], ToyMoEParams],
    prompt: Sequence[int],
    env,
    max_tokens: int,
    version_feed: Callable[[], int],
    *,
    rng: np.random.Generator,
    segment_budget: int = 14,
    summary_len: int = 3,
    max_segments: int = 4,
    final_len: int = 8,
    env_snapshot_ref: str | None = None,
) -> ChainedRollout:
    """Roll the policy against an environment, chaining segments through
    self-summaries.

    version_feed is polled before every sampled token; a higher version is
    adopted via params_provider before the token is drawn, so a rollout can
    straddle weight publications and each TokenRecord carries the version
    that actually produced it. Tool calls are two sampled tokens (tool,
    arg); their injected output is non-trainable context. When a segment
    reaches segment_budget records the policy writes summary_len summary
    tokens and the next segment starts from exactly those tokens.

    env failures surface as RolloutFailure.
    """

    if max_tokens < 1:
        raise ToyLMError("max_tokens must be >= 1")
    version = int(version_feed())
    params = params_provider(version)

    segments: list[Segment] = []
    summaries: list[tuple[int, ...]] = []
    seg_prompt = tuple(int(t) for t in prompt)
    if not seg_prompt:
        raise ToyLMError("prompt must be non-empty")
    records: list[TokenRecord] = []
    context = list(seg_prompt)
    mode = "think"
    pending_tool: int | None = None
    summary_left = 0
    summary_tokens: list[int] = []
    final_count = 0
    generated = 0
    done = False

    while not done:
        v = int(version_feed())
        if v > version:
            version = v
            params = params_provider(v)

        if (
            mode == "think"
            and pending_tool is None
            and len(records) >= segment_budget
            and len(segments) < max_segments - 1
        ):
            mode = "summary"
            summary_left = summary_len
            summary_tokens = []

        cache = _forward_cache(params, np.asarray(context))
        logp = _log_softmax(cache.logits[-1])
        probs = np.exp(logp)
        tok = int(
            np.searchsorted(np.cumsum(probs), rng.random(), side="right")
        )
        tok = min(tok, params.vocab - 1)
        record = TokenRecord(
            token_id=tok,
            category=Category.THINKING,
            sampling_logprob=float(logp[tok]),
            policy_version=version,
            router_trace=cache.traces[-1],
        )

        if mode == "summary":
            record = replace(record, category=Category.SUMMARY)
            records.append(record)
            context.append(tok)
            summary_tokens.append(tok)
            summary_left -= 1
            generated += 1
            if summary_left == 0:
                if generated >= max_tokens:
                    done = True
                else:
                    segments.append(_build_segment(seg_prompt, records))
                    summaries.append(tuple(summary_tokens))
                    seg_prompt = tuple(summary_tokens)
                    records = []
                    context = list(seg_prompt)
                    mode = "think"
            elif generated >= max_tokens:
                done = True
            continue

        if mode == "arg":
            record = replace(record, category=Category.TOOL_CALL)
            records.append(record)
            context.append(tok)
            generated += 1
            tool_name = TOOL_TOKENS[pending_tool]
            arg = tok - VALUE_BASE if tok >= VALUE_BASE else None
            pending_tool = None
            try:
                result = env.call(tool_name, arg)
            except Exception as exc:
                raise RolloutFailure(f"env failure on {tool_name}: {exc}") from exc
            if result.ok and tool_name == "lookup":
                injected = [TOK_RESULT, VALUE_BASE + int(result.value)]
            elif result.ok:
                injected = [TOK_RESULT]
            else:
                injected = [TOK_ERR]
            for out_tok in injected:
                records.append(
                    TokenRecord(
                        token_id=out_tok,
                        category=Category.TOOL_OUTPUT,
                        sampling_logprob=0.0,
                        policy_version=version,
                    )
                )
                context.append(out_tok)
            mode = "final" if tool_name == "submit" and result.ok else "think"
            if generated >= max_tokens:
                done = True
            continue

        if mode == "final":
            record = replace(record, category=Category.FINAL_MESSAGE)
            records.append(record)
            context.append(tok)
            generated += 1
            final_count += 1
            if tok == EOS or final_count >= final_len or generated >= max_tokens:
                done = True
            continue

        # think mode
        if tok in TOOL_TOKENS:
            record = replace(record, category=Category.TOOL_CALL)
            records.append(record)
            context.append(tok)
            generated += 1
            pending_tool = tok
            mode = "arg"
            if generated >= max_tokens:
                # dangling tool token: no argument will follow
                records[-1] = replace(records[-1], category=Category.THINKING)
                pending_tool = None
                done = True
            continue
        records.append(record)
        context.append(tok)
        generated += 1
        if tok == EOS or generated >= max_tokens:
            done = True

    segments.append(_build_segment(seg_prompt, records))
    return ChainedRollout(
        segments=tuple(segments),
        summaries=tuple(summaries),
        env_snapshot_ref=env_snapshot_ref,
    )
