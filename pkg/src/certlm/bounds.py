"""Finite-hypothesis and subsampled generalization bound calculus.

Unit discipline, used consistently across this module and asserted in the
field names: interval widths (``delta_bits``) and risks are in bits per
token (or are dimensionless fractions for error metrics, where the interval
width is exactly 1), while the complexity term (``prior_nats``) and all
``log 1/delta`` terms are in nats.  The radicands are ratios of nats to
sample counts, hence dimensionless, so scaling them by a width in bits
yields a bound in bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "BoundInputs",
    "MetricBound",
    "BoundReport",
    "AlphaSelection",
    "BernoulliMixtureClass",
    "delta_interval",
    "finite_hypothesis_bound",
    "subsampled_bound",
    "optimize_alpha",
    "vacuity_threshold",
    "dataset_compression",
    "mc_coverage",
    "audit_report",
]


def delta_interval(alpha: float, vocab_size: int) -> tuple[float, float, float]:
    """Certified range of the smoothed per-document bits-per-token risk.

    A predictor mixed with the uniform distribution at weight ``alpha`` has
    per-token probabilities in [alpha/V, (1-alpha) + alpha/V], so its
    per-document BPD lies in [log2(V/alpha) - delta, log2(V/alpha)] with

        delta = log2(1 + (1 - alpha) * V / alpha).

    Returns ``(delta, lower, upper)`` in bits.  ``alpha = 1`` collapses the
    interval to the single point log2(V).
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if vocab_size < 2:
        raise ValueError(f"vocab_size must be >= 2, got {vocab_size}")
    upper = math.log2(vocab_size / alpha)
    delta = math.log2(1.0 + (1.0 - alpha) * vocab_size / alpha)
    return delta, upper - delta, upper


def finite_hypothesis_bound(r_hat, delta_bits, prior_nats, m, delta):
    """High-probability bound on the expected risk from the full empirical risk.

    With probability at least 1 - delta over m i.i.d. samples,

        R <= r_hat + delta_bits * sqrt((prior_nats + ln(1/delta)) / (2m)).

    Accepts scalars or numpy arrays (broadcasting); ``delta = 1`` is allowed
    and gives zero slack from the confidence term.
    """
    if np.any(np.asarray(m) < 1):
        raise ValueError("m must be >= 1")
    d = np.asarray(delta, dtype=float)
    if np.any(d <= 0.0) or np.any(d > 1.0):
        raise ValueError("delta must be in (0, 1]")
    slack = delta_bits * np.sqrt((prior_nats + np.log(1.0 / d)) / (2.0 * m))
    out = r_hat + slack
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class BoundInputs:
    """Everything the subsampled bound consumes.

    r_hat_hat   empirical risk on the n-point subsample (bits/token, or an
                error fraction in [0, 1])
    delta_bits  per-sample interval width (bits; exactly 1.0 for error metrics)
    prior_nats  complexity term log 1/P(h), in nats
    m           population sample count
    n           subsample size (drawn with replacement)
    delta       total failure probability in (0, 1]
    """

    r_hat_hat: float
    delta_bits: float
    prior_nats: float
    m: int
    n: int
    delta: float = 0.05

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be >= 1")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must be in (0, 1]")
        if self.delta_bits < 0.0:
            raise ValueError("delta_bits must be >= 0")
        if self.prior_nats < 0.0:
            raise ValueError("prior_nats must be >= 0")

    @property
    def s(self) -> float:
        """Failure-probability split s = n / (n + m), optimal for the combined radical."""
        return self.n / (self.n + self.m)


def subsampled_bound(inputs: BoundInputs) -> float:
    """Bound on the expected risk when the empirical risk uses only n of m samples.

    Splitting the failure probability as delta_1 = s*delta for the population
    term and delta_2 = (1-s)*delta for the subsampling term, with
    s = n/(n+m):

        R <= r_hat_hat
             + delta_bits * sqrt((prior_nats + ln(1/(s*delta))) / (2m))
             + delta_bits * sqrt(ln(1/((1-s)*delta)) / (2n)).
    """
    s = inputs.s
    t1 = inputs.delta_bits * math.sqrt(
        (inputs.prior_nats + math.log(1.0 / (s * inputs.delta))) / (2.0 * inputs.m)
    )
    t2 = inputs.delta_bits * math.sqrt(
        math.log(1.0 / ((1.0 - s) * inputs.delta)) / (2.0 * inputs.n)
    )
    return inputs.r_hat_hat + t1 + t2


@dataclass(frozen=True)
class AlphaSelection:
    """Result of optimizing the smoothing weight over a declared grid."""

    alpha: float
    bound: float
    delta_bits: float
    r_hat_hat: float
    # one row per grid alpha: (alpha, delta_bits, r_hat_hat, bound)
    table: tuple[tuple[float, float, float, float], ...]


def smoothed_bpd_from_cache(
    token_logprobs: Sequence[np.ndarray], alpha: float, vocab_size: int
) -> float:
    """Mean per-document smoothed BPD from cached base-model log probabilities.

    ``token_logprobs[i]`` holds, for sampled document i, the base-2 log
    probability the base model assigns to each true token.  Re-mixing with
    the uniform distribution needs only these values, so sweeping alpha does
    not re-run the model.
    """
    per_doc = np.empty(len(token_logprobs))
    for i, lp in enumerate(token_logprobs):
        p = np.exp2(np.asarray(lp, dtype=np.float64))
        per_doc[i] = -np.mean(np.log2((1.0 - alpha) * p + alpha / vocab_size))
    return float(np.mean(per_doc))


def optimize_alpha(
    token_logprobs: Sequence[np.ndarray],
    vocab_size: int,
    prior_nats: float,
    m: int,
    n: int,
    delta: float,
    alpha_grid: Sequence[float],
) -> AlphaSelection:
    """Pick the grid alpha minimizing the subsampled BPD bound.

    The grid must be declared up front (its size is charged to the
    compressed size elsewhere).  Ties are broken toward the smaller alpha.
    """
    if len(alpha_grid) == 0:
        raise ValueError("alpha_grid must be non-empty")
    best: AlphaSelection | None = None
    rows = []
    for alpha in sorted(alpha_grid):
        d_bits, _, _ = delta_interval(alpha, vocab_size)
        rhh = smoothed_bpd_from_cache(token_logprobs, alpha, vocab_size)
        b = subsampled_bound(
            BoundInputs(rhh, d_bits, prior_nats, m=m, n=n, delta=delta)
        )
        rows.append((alpha, d_bits, rhh, b))
        if best is None or b < best.bound:
            best = AlphaSelection(alpha, b, d_bits, rhh, ())
    assert best is not None
    return AlphaSelection(best.alpha, best.bound, best.delta_bits, best.r_hat_hat, tuple(rows))


def vacuity_threshold(metric: str, vocab_size: int, k: int | None = None) -> float:
    """Random-guess performance: log2(V) for BPD, 1 - k/V for top-k error."""
    if metric == "bpd":
        return math.log2(vocab_size)
    if metric.startswith("top"):
        kk = int(metric[3:]) if k is None else k
        if not 1 <= kk <= vocab_size:
            raise ValueError(f"k must be in [1, {vocab_size}], got {kk}")
        return 1.0 - kk / vocab_size
    raise ValueError(f"unknown metric {metric!r}")


def dataset_compression(c_h_bits: float, total_nll_bits: float) -> float:
    """Two-part code length for the training set: model bits plus data-given-model bits."""
    return c_h_bits + total_nll_bits


@dataclass(frozen=True)
class BernoulliMixtureClass:
    """Finite class of constant predictors with exactly computable true risk.

    Hypothesis k predicts the constant q_k in [0, 1]; the per-sample loss on
    x in {0, 1} is |q_k - x|, bounded in [0, 1].  Under Bernoulli(p) data the
    true risk is q_k * (1 - p) + (1 - q_k) * p, and the empirical risk is a
    function of the sample mean alone, which makes large Monte-Carlo trials
    cheap.
    """

    q: np.ndarray
    prior_nats: np.ndarray
    p: float

    def __post_init__(self):
        if self.q.shape != self.prior_nats.shape:
            raise ValueError("q and prior_nats must have matching shapes")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must be in [0, 1]")

    @classmethod
    def singleton(cls, q: float, p: float) -> "BernoulliMixtureClass":
        return cls(np.array([q]), np.array([0.0]), p)

    @classmethod
    def uniform(cls, size: int, p: float) -> "BernoulliMixtureClass":
        """``size`` hypotheses on a uniform grid, each charged ln(size) nats."""
        q = np.linspace(0.0, 1.0, size)
        return cls(q, np.full(size, math.log(size)), p)

    def true_risk(self) -> np.ndarray:
        return self.q * (1.0 - self.p) + (1.0 - self.q) * self.p

    def empirical_risk(self, sample_mean: np.ndarray) -> np.ndarray:
        """Empirical |q - x| risk for each (trial, hypothesis) pair."""
        xbar = np.asarray(sample_mean)[:, None]
        return self.q[None, :] * (1.0 - xbar) + (1.0 - self.q[None, :]) * xbar


def mc_coverage(
    bound_fn: Callable,
    hypothesis_class: BernoulliMixtureClass,
    trials: int,
    delta: float,
    m: int,
    seed: int = 0,
) -> float:
    """Empirical violation rate of ``bound_fn`` under repeated sampling.

    Each trial draws m Bernoulli samples, selects the hypothesis with the
    smallest bound (the data-dependent selection the union bound must cover),
    and checks whether its true risk exceeds its bound.  A sound bound keeps
    the violation fraction at or below delta up to binomial noise.
    """
    rng = np.random.default_rng(seed)
    sample_means = rng.binomial(m, hypothesis_class.p, size=trials) / m
    r_hat = hypothesis_class.empirical_risk(sample_means)  # (trials, H)
    bounds = bound_fn(r_hat, 1.0, hypothesis_class.prior_nats[None, :], m, delta)
    chosen = np.argmin(bounds, axis=1)
    true = hypothesis_class.true_risk()[chosen]
    chosen_bound = bounds[np.arange(trials), chosen]
    return float(np.mean(true > chosen_bound))


@dataclass
class MetricBound:
    """One certified metric: its inputs, the bound, and the vacuity verdict."""

    metric: str
    bound: float
    r_hat_hat: float
    delta_bits: float
    alpha: float | None
    threshold: float
    vacuous: bool


@dataclass
class BoundReport:
    """A complete, independently recomputable certificate.

    Contains every input of each certified bound plus a provenance block
    (grids, seeds, compressed-size breakdown, run configuration) so that
    ``audit_report`` can rebuild each number from the serialized form.
    """

    metrics: list[MetricBound]
    prior_nats: float
    c_h_bits: int
    size_breakdown: dict
    m: int
    n: int
    delta: float
    vocab_size: int
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BoundReport":
        d = dict(d)
        d["metrics"] = [MetricBound(**mb) for mb in d["metrics"]]
        return cls(**d)


def audit_report(report: BoundReport) -> float:
    """Recompute every certified bound from the report's own inputs.

    Returns the maximum absolute discrepancy across metrics.  Also rechecks
    the prior against the stored compressed size and each vacuity flag;
    any structural mismatch raises.
    """
    expected_prior = report.c_h_bits * math.log(2.0) + 2.0 * math.log(report.c_h_bits)
    if abs(expected_prior - report.prior_nats) > 1e-9 * max(1.0, expected_prior):
        raise ValueError("prior_nats does not match the stored compressed size")
    worst = 0.0
    for mb in report.metrics:
        recomputed = subsampled_bound(
            BoundInputs(
                mb.r_hat_hat,
                mb.delta_bits,
                report.prior_nats,
                m=report.m,
                n=report.n,
                delta=report.delta,
            )
        )
        worst = max(worst, abs(recomputed - mb.bound))
        if mb.vacuous != (mb.bound >= mb.threshold):
            raise ValueError(f"vacuous flag inconsistent for metric {mb.metric!r}")
    return worst
