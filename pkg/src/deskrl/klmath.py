"""KL estimators over log-ratios, and the unit-variance Gaussian study.

Convention: r(x) = p(x)/q(x) with samples drawn from q, and the inputs here
are log r. KL(q||p) = E_q[-log r]. The three per-sample estimators:

    k1 = -log r                unbiased, variance Var_q(log r)
    k2 = (log r)^2 / 2         low variance, biased
    k3 = (r - 1) - log r       unbiased, nonnegative, but its variance
                               explodes once p and q are far apart

The study pits them against each other for q = N(0,1), p = N(delta,1),
where the analytic KL is delta^2/2. Each row draws from a counter-based
PRNG keyed by (seed, delta), so any row is reproducible in isolation.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np


class EstimatorKind(str, Enum):
    K1 = "k1"
    K2 = "k2"
    K3 = "k3"


@dataclass(frozen=True)
class EstimateStats:
    """Monte Carlo estimate: sample mean, sample variance, standard error."""

    kind: EstimatorKind
    n: int
    mean: float
    variance: float
    std_error: float


def per_sample_values(log_ratios: np.ndarray, kind: EstimatorKind) -> np.ndarray:
    """Pointwise estimator values in float64."""

    lr = np.asarray(log_ratios, dtype=np.float64)
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.K1:
        return -lr
    if kind is EstimatorKind.K2:
        return 0.5 * lr * lr
    # k3: (r - 1) - log r, computed via expm1 to keep small ratios accurate.
    return np.expm1(lr) - lr


def estimate_kl(log_ratios: np.ndarray, kind: EstimatorKind) -> EstimateStats:
    """Mean / variance / standard error of the chosen estimator.

    Variance is the unbiased sample variance (ddof=1), so at least two
    samples are required.
    """

    lr = np.asarray(log_ratios, dtype=np.float64)
    if lr.ndim != 1:
        raise ValueError(f"log_ratios must be 1-d, got shape {lr.shape}")
    if lr.size < 2:
        raise ValueError(f"need >= 2 samples, got {lr.size}")
    values = per_sample_values(lr, kind)
    mean = float(values.mean())
    variance = float(values.var(ddof=1))
    return EstimateStats(
        kind=EstimatorKind(kind),
        n=int(lr.size),
        mean=mean,
        variance=variance,
        std_error=math.sqrt(variance / lr.size),
    )


def gaussian_log_ratio(x: np.ndarray, mu_p: float, mu_q: float) -> np.ndarray:
    """log (p/q)(x) for unit-variance Gaussians p = N(mu_p,1), q = N(mu_q,1).

    log r(x) = (mu_p - mu_q) x + (mu_q^2 - mu_p^2)/2.
    """

    x = np.asarray(x, dtype=np.float64)
    return (mu_p - mu_q) * x + (mu_q * mu_q - mu_p * mu_p) / 2.0


def analytic_gaussian_kl(delta: float) -> float:
    """KL between unit-variance Gaussians whose means differ by delta."""

    return delta * delta / 2.0


def _row_rng(seed: int, delta: float) -> np.random.Generator:
    # Philox is counter-based: keying on (seed, bits of delta) makes every
    # row an independent, order-free stream.
    delta_bits = np.frombuffer(np.float64(delta).tobytes(), dtype=np.uint64)[0]
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), delta_bits], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class StudyRow:
    delta: float
    estimator: EstimatorKind
    mean: float
    variance: float
    analytic_kl: float


@dataclass(frozen=True)
class StudyTable:
    rows: tuple[StudyRow, ...]
    n: int
    seed: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["delta", "estimator", "mean", "variance", "analytic_kl"])
        for row in self.rows:
            writer.writerow(
                [
                    repr(row.delta),
                    row.estimator.value,
                    repr(row.mean),
                    repr(row.variance),
                    repr(row.analytic_kl),
                ]
            )
        return buf.getvalue()

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())

    def row(self, delta: float, kind: EstimatorKind) -> StudyRow:
        for r in self.rows:
            if r.delta == delta and r.estimator is EstimatorKind(kind):
                return r
        raise KeyError(f"no row for delta={delta}, estimator={kind}")


DEFAULT_DELTAS: tuple[float, ...] = (0.1, 0.5, 1.0, 2.0, 3.0)
DEFAULT_STUDY_N = 1_000_000


def kl_study(
    deltas: Sequence[float] = DEFAULT_DELTAS,
    n: int = DEFAULT_STUDY_N,
    seed: int = 0,
) -> StudyTable:
    """Mean and variance of k1/k2/k3 at each delta, n samples per row.

    Samples x ~ q = N(0,1); log r(x) = delta*x - delta^2/2. All three
    estimators share each row's draws so their variances are comparable.
    """

    if n < 10_000:
        raise ValueError(f"study needs n >= 10000 for stable variances, got {n}")
    rows: list[StudyRow] = []
    for delta in deltas:
        rng = _row_rng(seed, float(delta))
        x = rng.standard_normal(n)
        lr = gaussian_log_ratio(x, mu_p=float(delta), mu_q=0.0)
        kl = analytic_gaussian_kl(float(delta))
        for kind in EstimatorKind:
            stats = estimate_kl(lr, kind)
            rows.append(
                StudyRow(
                    delta=float(delta),
                    estimator=kind,
                    mean=stats.mean,
                    variance=stats.variance,
                    analytic_kl=kl,
                )
            )
    return StudyTable(rows=tuple(rows), n=n, seed=seed)
