"""Evaluation-side arithmetic: average task performance, merge gain,
per-task performance difference, and Pearson correlation with an exact
two-sided p-value from the Student t distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class MetricsError(ValueError):
    pass


@dataclass
class EvalResult:
    model_id: str
    task_scores: dict[str, float]
    timestamp: float | None = None

    def __post_init__(self):
        for task, score in self.task_scores.items():
            if not math.isfinite(score) or not 0.0 <= score <= 100.0:
                raise MetricsError(
                    f"{self.model_id}: score {score!r} for task {task!r} "
                    "outside [0, 100]")


def average_task_performance(result: EvalResult) -> float:
    """Mean benchmark score over the task group."""
    if not result.task_scores:
        raise MetricsError(f"{result.model_id}: empty task set")
    scores = list(result.task_scores.values())
    return sum(scores) / len(scores)


def merge_gain(merged_atp: float, parent_atps: list[float]) -> float:
    """Merged model's average minus the unweighted mean of its parents'."""
    if not parent_atps:
        raise MetricsError("merge gain needs at least one parent")
    return merged_atp - sum(parent_atps) / len(parent_atps)


def atpd(r1: EvalResult, r2: EvalResult) -> float:
    """Mean absolute per-task score difference between two models."""
    if set(r1.task_scores) != set(r2.task_scores):
        raise MetricsError(
            f"task sets differ: {sorted(r1.task_scores)} vs {sorted(r2.task_scores)}")
    if not r1.task_scores:
        raise MetricsError("empty task set")
    diffs = [abs(r1.task_scores[t] - r2.task_scores[t]) for t in r1.task_scores]
    return sum(diffs) / len(diffs)


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, dof: float) -> float:
    """Two-sided tail probability P(|T| >= t) for Student's t."""
    if not math.isfinite(t):
        return 0.0
    return betainc_reg(dof / 2.0, 0.5, dof / (dof + t * t))


def pearson_with_p(xs: list[float], ys: list[float]) -> tuple[float, float]:
    """Sample Pearson correlation and its exact two-sided p-value against
    the t distribution with n-2 degrees of freedom."""
    n = len(xs)
    if n != len(ys):
        raise MetricsError(f"length mismatch: {n} vs {len(ys)}")
    if n < 3:
        raise MetricsError("need at least 3 observations")
    mx = sum(xs) / n
    my = sum(ys) / n
    cov = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    vx = sum((x - mx) ** 2 for x in xs)
    vy = sum((y - my) ** 2 for y in ys)
    if vx == 0.0 or vy == 0.0:
        raise MetricsError("pearson undefined: zero variance")
    r = cov / math.sqrt(vx * vy)
    r = max(-1.0, min(1.0, r))
    dof = n - 2
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt(dof / (1.0 - r * r))
    return r, student_t_sf2(t, dof)
