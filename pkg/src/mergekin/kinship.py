"""Model kinship: similarity of weight deltas relative to a shared base.

Deltas are streamed tensor by tensor in canonical order; per-tensor sums
are accumulated in f64 and combined in name order, so results are
run-to-run identical and never require the whole vector in memory.

Metric orientation: for pcc and cs a larger value means more related; for
ed a smaller distance means more related.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensorstore import TensorMap, check_compatible

METRICS = ("pcc", "cs", "ed")


class KinshipError(ValueError):
    pass


@dataclass
class DeltaVector:
    """Flattened parameter difference theta - theta_base, materialized
    lazily: stream() yields per-tensor f32 chunks in canonical order."""

    model_id: str
    base_id: str
    dimension: int
    _chunks: "callable" = field(repr=False)

    def stream(self):
        return self._chunks()

    def comparable_with(self, other: "DeltaVector") -> bool:
        return self.base_id == other.base_id and self.dimension == other.dimension


def compute_delta(model: TensorMap, base: TensorMap,
                  model_id: str = "model", base_id: str = "base") -> DeltaVector:
    check_compatible([model, base])

    def chunks():
        for name, arr in model.items():
            yield (arr - base.get(name)).reshape(-1)

    return DeltaVector(model_id=model_id, base_id=base_id,
                       dimension=base.num_parameters, _chunks=chunks)


def delta_from_array(vec: np.ndarray, model_id: str = "model",
                     base_id: str = "base") -> DeltaVector:
    """Wrap an in-memory flat vector as a single-chunk delta."""
    flat = np.asarray(vec, dtype=np.float32).reshape(-1)
    return DeltaVector(model_id=model_id, base_id=base_id,
                       dimension=flat.size, _chunks=lambda: iter([flat]))


@dataclass
class _Accumulator:
    n: int = 0
    sx: float = 0.0
    sy: float = 0.0
    sxx: float = 0.0
    syy: float = 0.0
    sxy: float = 0.0
    sdiff2: float = 0.0
    xmin: float = math.inf
    xmax: float = -math.inf
    ymin: float = math.inf
    ymax: float = -math.inf

    def update(self, x: np.ndarray, y: np.ndarray) -> None:
        x64 = x.astype(np.float64)
        y64 = y.astype(np.float64)
        self.n += x64.size
        self.sx += float(x64.sum())
        self.sy += float(y64.sum())
        self.sxx += float(np.dot(x64, x64))
        self.syy += float(np.dot(y64, y64))
        self.sxy += float(np.dot(x64, y64))
        diff = x64 - y64
        self.sdiff2 += float(np.dot(diff, diff))
        if x64.size:
            self.xmin = min(self.xmin, float(x64.min()))
            self.xmax = max(self.xmax, float(x64.max()))
            self.ymin = min(self.ymin, float(y64.min()))
            self.ymax = max(self.ymax, float(y64.max()))


def _finish(acc: _Accumulator, metric: str) -> float:
    if metric == "ed":
        return math.sqrt(acc.sdiff2)
    if metric == "cs":
        if acc.sxx == 0.0 or acc.syy == 0.0:
            raise KinshipError("cosine similarity undefined: zero-norm delta")
        return max(-1.0, min(1.0, acc.sxy / math.sqrt(acc.sxx * acc.syy)))
    if metric == "pcc":
        if acc.xmin == acc.xmax or acc.ymin == acc.ymax:
            raise KinshipError("pearson correlation undefined: constant delta")
        n = acc.n
        cov = acc.sxy - acc.sx * acc.sy / n
        vx = acc.sxx - acc.sx * acc.sx / n
        vy = acc.syy - acc.sy * acc.sy / n
        if vx <= 0.0 or vy <= 0.0:
            raise KinshipError("pearson correlation undefined: zero variance")
        return max(-1.0, min(1.0, cov / math.sqrt(vx * vy)))
    raise KinshipError(f"unknown metric {metric!r}")


def sim_pair(d1: DeltaVector, d2: DeltaVector, metric: str) -> float:
    """Similarity of two deltas in a single streaming pass."""
    if metric not in METRICS:
        raise KinshipError(f"unknown metric {metric!r}")
    if not d1.comparable_with(d2):
        raise KinshipError(
            f"deltas not comparable: ({d1.base_id}, d={d1.dimension}) vs "
            f"({d2.base_id}, d={d2.dimension})")
    acc = _Accumulator()
    for x, y in zip(d1.stream(), d2.stream()):
        if x.size != y.size:
            raise KinshipError("delta streams disagree on chunk sizes")
        acc.update(x, y)
    if acc.n != d1.dimension:
        raise KinshipError("delta stream length does not match dimension")
    return _finish(acc, metric)


def kinship_group(deltas: list[DeltaVector], metric: str) -> float:
    """Mean similarity over all unordered pairs (the n-way kinship)."""
    n = len(deltas)
    if n < 2:
        raise KinshipError("group kinship needs at least 2 deltas")
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            try:
                total += sim_pair(deltas[i], deltas[j], metric)
            except KinshipError as exc:
                raise KinshipError(
                    f"pair ({deltas[i].model_id}, {deltas[j].model_id}): {exc}"
                ) from exc
    return total / (n * (n - 1) / 2)


@dataclass
class KinshipMatrix:
    model_ids: list[str]
    values: np.ndarray  # symmetric, diagonal = metric self-similarity
    metric: str

    def to_rows(self) -> list[dict]:
        rows = []
        for i, a in enumerate(self.model_ids):
            for j, b in enumerate(self.model_ids):
                if j > i:
                    rows.append({"model_a": a, "model_b": b,
                                 "kinship": float(self.values[i, j])})
        return rows


def kinship_matrix(models: list[tuple[str, TensorMap]], base: TensorMap,
                   metric: str) -> KinshipMatrix:
    """Pairwise kinship over a model group; each delta is materialized once
    and reused across pairs."""
    ids = [mid for mid, _ in models]
    deltas = []
    for mid, tmap in models:
        d = compute_delta(tmap, base, model_id=mid)
        flat = np.concatenate(list(d.stream())) if len(tmap) else np.empty(0, np.float32)
        deltas.append(delta_from_array(flat, model_id=mid))
    n = len(deltas)
    values = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        values[i, i] = 0.0 if metric == "ed" else 1.0
        for j in range(i + 1, n):
            values[i, j] = values[j, i] = sim_pair(deltas[i], deltas[j], metric)
    return KinshipMatrix(model_ids=ids, values=values, metric=metric)
