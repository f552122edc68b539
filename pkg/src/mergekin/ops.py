"""Merge operators over checkpoint tensor maps.

All operators are pure: given the same inputs (and seed, for the stochastic
drop step) they produce bit-identical outputs. Arithmetic runs in f32; the
merged map inherits per-tensor storage dtypes from the first parent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensorstore import TensorMap, check_compatible

SLERP_EPS = 1e-8

OPERATORS = ("linear", "slerp", "ties", "dare_ties")


class MergeError(ValueError):
    pass


@dataclass
class MergeRecipe:
    """Operator + hyperparameters + ordered parents; fully determines a
    merged artifact given its input checkpoints."""

    operator: str
    parents: list[str]
    base: str | None = None
    params: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.operator not in OPERATORS:
            raise MergeError(f"unknown operator {self.operator!r}")
        if self.operator == "slerp":
            if len(self.parents) != 2:
                raise MergeError("slerp requires exactly 2 parents")
            t = self.params.get("t", 0.5)
            if not 0.0 <= t <= 1.0:
                raise MergeError(f"slerp t={t} outside [0, 1]")
        if self.operator in ("ties", "dare_ties"):
            if self.base is None:
                raise MergeError(f"{self.operator} requires a base model")
            density = self.params.get("density", 1.0)
            if not 0.0 < density <= 1.0:
                raise MergeError(f"density={density} outside (0, 1]")
            if self.operator == "dare_ties" and "seed" not in self.params:
                raise MergeError("dare_ties requires a seed")
        if self.operator == "linear":
            weights = self.params.get("weights")
            if weights is not None and any(w <= 0 for w in weights):
                raise MergeError("linear weights must be positive")

    def to_dict(self) -> dict:
        return {"operator": self.operator, "parents": list(self.parents),
                "base": self.base, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "MergeRecipe":
        recipe = cls(operator=d["operator"], parents=list(d["parents"]),
                     base=d.get("base"), params=dict(d.get("params", {})))
        recipe.validate()
        return recipe


def _first_parent_dtypes(parent: TensorMap) -> dict[str, str]:
    return {m.name: m.dtype for m in parent.metas}


def merge_linear(parents: list[TensorMap], weights: list[float]) -> TensorMap:
    """Weighted average with weights normalized to sum to 1."""
    if len(weights) != len(parents):
        raise MergeError(f"{len(parents)} parents but {len(weights)} weights")
    if any(w <= 0 for w in weights):
        raise MergeError("linear weights must be positive")
    check_compatible(parents)
    total = float(sum(weights))
    norm = [w / total for w in weights]
    merged = {}
    for name in parents[0].names():
        acc = norm[0] * parents[0].get(name).astype(np.float64)
        for w, p in zip(norm[1:], parents[1:]):
            acc = acc + w * p.get(name).astype(np.float64)
        merged[name] = acc.astype(np.float32)
    return TensorMap.from_arrays(merged, _first_parent_dtypes(parents[0]))


def _slerp_tensor(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    av = a.reshape(-1).astype(np.float64)
    bv = b.reshape(-1).astype(np.float64)
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        return ((1.0 - t) * a + t * b).astype(np.float32)
    cos = float(np.dot(av, bv) / (na * nb))
    cos = max(-1.0, min(1.0, cos))
    omega = math.acos(cos)
    sin_omega = math.sin(omega)
    if abs(sin_omega) < SLERP_EPS:
        return ((1.0 - t) * a + t * b).astype(np.float32)
    s0 = np.float32(math.sin((1.0 - t) * omega) / sin_omega)
    s1 = np.float32(math.sin(t * omega) / sin_omega)
    return (s0 * a + s1 * b).astype(np.float32)


def merge_slerp(a: TensorMap, b: TensorMap, t: float) -> TensorMap:
    """Spherical linear interpolation along the arc between the two
    flattened tensors, computed per tensor; falls back to lerp for
    colinear or all-zero tensors."""
    if not 0.0 <= t <= 1.0:
        raise MergeError(f"slerp t={t} outside [0, 1]")
    check_compatible([a, b])
    merged = {name: _slerp_tensor(arr, b.get(name), t) for name, arr in a.items()}
    return TensorMap.from_arrays(merged, _first_parent_dtypes(a))


def _task_vectors(parents: list[TensorMap], base: TensorMap) -> tuple[list[np.ndarray], list[tuple[str, tuple[int, ...], int]]]:
    check_compatible(list(parents) + [base])
    layout = []
    offset = 0
    for name, arr in base.items():
        layout.append((name, arr.shape, offset))
        offset += arr.size
    base_flat = base.flatten()
    taus = [p.flatten() - base_flat for p in parents]
    return taus, layout


def _trim_top_magnitude(tau: np.ndarray, density: float) -> np.ndarray:
    """Keep the top ceil(density*d) entries by |value| over the whole
    flattened vector, zero the rest."""
    d = tau.size
    m = math.ceil(density * d)
    if m >= d:
        return tau.copy()
    keep = np.argpartition(np.abs(tau), d - m)[d - m:]
    out = np.zeros_like(tau)
    out[keep] = tau[keep]
    return out


def _elect_and_merge(taus: list[np.ndarray]) -> np.ndarray:
    """Per coordinate: elect the sign with larger summed magnitude (ties to
    positive), then average the kept entries agreeing with it."""
    stacked = np.stack(taus)
    pos = np.where(stacked > 0, stacked, 0.0).sum(axis=0)
    neg = np.where(stacked < 0, -stacked, 0.0).sum(axis=0)
    sign = np.where(pos >= neg, 1.0, -1.0).astype(np.float32)
    agree = (np.sign(stacked) == sign) & (stacked != 0)
    counts = agree.sum(axis=0)
    sums = np.where(agree, stacked, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore"):
        merged = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return merged.astype(np.float32)


def _reassemble(base: TensorMap, merged_tau: np.ndarray, weight: float,
                layout) -> TensorMap:
    out = {}
    for name, shape, offset in layout:
        size = int(np.prod(shape)) if shape else 1
        delta = merged_tau[offset:offset + size].reshape(shape)
        out[name] = base.get(name) + np.float32(weight) * delta
    return TensorMap.from_arrays(out, _first_parent_dtypes(base))


def merge_ties(parents: list[TensorMap], base: TensorMap,
               density: float, weight: float) -> TensorMap:
    """Trim each task vector to its largest-magnitude entries, elect a per
    coordinate sign, average agreeing entries, and scale back onto base."""
    if len(parents) < 2:
        raise MergeError("ties requires at least 2 parents")
    if not 0.0 < density <= 1.0:
        raise MergeError(f"density={density} outside (0, 1]")
    taus, layout = _task_vectors(parents, base)
    trimmed = [_trim_top_magnitude(tau, density) for tau in taus]
    merged_tau = _elect_and_merge(trimmed)
    return _reassemble(base, merged_tau, weight, layout)


def _dare_generator(seed: int, parent_index: int) -> np.random.Generator:
    # Philox 4x32-10 counter-based generator, keyed on (seed, parent index)
    # so each parent's drop mask is an independent deterministic stream.
    key = (int(seed) & 0xFFFFFFFFFFFFFFFF) | (parent_index << 64)
    return np.random.Generator(np.random.Philox(key=key))


def dare_drop(tau: np.ndarray, density: float, seed: int,
              parent_index: int) -> np.ndarray:
    """Zero each coordinate with probability 1-density, rescale survivors
    by 1/density; unbiased in expectation."""
    if not 0.0 < density <= 1.0:
        raise MergeError(f"density={density} outside (0, 1]")
    if density == 1.0:
        return tau.copy()
    rng = _dare_generator(seed, parent_index)
    keep = rng.random(tau.size) < density
    out = np.where(keep, tau / np.float32(density), np.float32(0.0))
    return out.astype(np.float32)


def merge_dare_ties(parents: list[TensorMap], base: TensorMap,
                    density: float, weight: float, seed: int) -> TensorMap:
    """Random-drop-and-rescale each task vector, then sign-elect and merge
    as in ties (no further trim)."""
    if len(parents) < 2:
        raise MergeError("dare_ties requires at least 2 parents")
    if not 0.0 < density <= 1.0:
        raise MergeError(f"density={density} outside (0, 1]")
    taus, layout = _task_vectors(parents, base)
    dropped = [dare_drop(tau, density, seed, i) for i, tau in enumerate(taus)]
    merged_tau = _elect_and_merge(dropped)
    return _reassemble(base, merged_tau, weight, layout)


def apply_recipe(recipe: MergeRecipe, parents: list[TensorMap],
                 base: TensorMap | None = None) -> TensorMap:
    """Dispatch a recipe against already-loaded parent maps (ordered as in
    recipe.parents)."""
    recipe.validate()
    op = recipe.operator
    if op == "linear":
        weights = recipe.params.get("weights") or [1.0] * len(parents)
        return merge_linear(parents, list(weights))
    if op == "slerp":
        return merge_slerp(parents[0], parents[1], recipe.params.get("t", 0.5))
    if base is None:
        raise MergeError(f"{op} requires a base model")
    density = recipe.params.get("density", 1.0)
    weight = recipe.params.get("weight", 1.0)
    if op == "ties":
        return merge_ties(parents, base, density, weight)
    return merge_dare_ties(parents, base, density, weight,
                           recipe.params["seed"])
