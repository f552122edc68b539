"""Evaluators: an external-process protocol adapter and a synthetic
weight-space evaluator for desk-scale runs.

External evaluators are spawned per model and must print a single JSON
object {"tasks": {name: score, ...}} on stdout. Results are cached by
content hash of the model file, so identical checkpoints are scored once.
"""

from __future__ import annotations

import hashlib
import json
import os
import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import EvalResult, MetricsError
from .tensorstore import TensorMap, check_compatible, load_tensor_map

CACHE_ENV_VAR = "MERGEKIN_CACHE_DIR"
DEFAULT_TIMEOUT = 3600.0


class EvaluatorError(RuntimeError):
    """Evaluator subprocess failure, timeout, or protocol violation."""


def file_content_hash(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _parse_eval_output(stdout: str, model_id: str,
                       expected_tasks: list[str] | None) -> EvalResult:
    try:
        payload = json.loads(stdout)
    except json.JSONDecodeError as exc:
        raise EvaluatorError(
            f"malformed evaluator JSON: {exc}; output was: {stdout[:500]!r}") from exc
    tasks = payload.get("tasks") if isinstance(payload, dict) else None
    if not isinstance(tasks, dict):
        raise EvaluatorError(f"evaluator output missing 'tasks' object: {stdout[:500]!r}")
    if expected_tasks is not None and set(tasks) != set(expected_tasks):
        raise EvaluatorError(
            f"task set mismatch: expected {sorted(expected_tasks)}, got {sorted(tasks)}")
    try:
        return EvalResult(model_id=model_id,
                          task_scores={k: float(v) for k, v in tasks.items()})
    except (TypeError, ValueError, MetricsError) as exc:
        raise EvaluatorError(f"invalid evaluator scores: {exc}") from exc


@dataclass
class ExternalEvaluator:
    """Runs `command` with {model} substituted by the checkpoint path."""

    command: str
    tasks: list[str] | None = None
    timeout: float = DEFAULT_TIMEOUT
    cache_dir: Path | None = None

    def __post_init__(self):
        if "{model}" not in self.command:
            raise EvaluatorError("evaluator command must contain a {model} placeholder")
        if self.cache_dir is None and os.environ.get(CACHE_ENV_VAR):
            self.cache_dir = Path(os.environ[CACHE_ENV_VAR])
        self._memory_cache: dict[str, dict] = {}
        self.invocations = 0

    def _cache_lookup(self, key: str) -> dict | None:
        if key in self._memory_cache:
            return self._memory_cache[key]
        if self.cache_dir is not None:
            path = self.cache_dir / f"{key}.json"
            if path.exists():
                return json.loads(path.read_text())
        return None

    def _cache_store(self, key: str, scores: dict) -> None:
        self._memory_cache[key] = scores
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            (self.cache_dir / f"{key}.json").write_text(
                json.dumps(scores, sort_keys=True))

    def evaluate(self, model_path: str | Path, model_id: str) -> EvalResult:
        key = file_content_hash(model_path)
        cached = self._cache_lookup(key)
        if cached is not None:
            return EvalResult(model_id=model_id, task_scores=dict(cached))

        argv = [arg.replace("{model}", str(model_path))
                for arg in shlex.split(self.command)]
        self.invocations += 1
        try:
            proc = subprocess.run(argv, capture_output=True, text=True,
                                  timeout=self.timeout)
        except subprocess.TimeoutExpired as exc:
            raise EvaluatorError(
                f"evaluator timed out after {self.timeout}s: {argv}") from exc
        except OSError as exc:
            raise EvaluatorError(f"failed to spawn evaluator {argv}: {exc}") from exc
        if proc.returncode != 0:
            raise EvaluatorError(
                f"evaluator exited {proc.returncode}; stderr: {proc.stderr[:1000]!r}")
        result = _parse_eval_output(proc.stdout, model_id, self.tasks)
        self._cache_store(key, result.task_scores)
        return result


@dataclass
class SyntheticTask:
    name: str
    target: TensorMap
    scale: float


class SyntheticEvaluator:
    """Scores a checkpoint by weight-space distance to per-task targets:
    score = 100 * exp(-||theta - target||^2 / scale^2), clamped to [0, 100].
    """

    def __init__(self, tasks: list[SyntheticTask]):
        if not tasks:
            raise EvaluatorError("synthetic evaluator needs at least one task")
        self.tasks = tasks
        self.invocations = 0
        self._cache: dict[str, dict] = {}

    @classmethod
    def from_spec(cls, spec: dict, root: Path | None = None) -> "SyntheticEvaluator":
        tasks = []
        for entry in spec["tasks"]:
            target_path = Path(entry["target"])
            if root is not None and not target_path.is_absolute():
                target_path = root / target_path
            tasks.append(SyntheticTask(name=entry["name"],
                                       target=load_tensor_map(target_path),
                                       scale=float(entry["scale"])))
        return cls(tasks)

    def score_map(self, model: TensorMap, model_id: str) -> EvalResult:
        check_compatible([model] + [t.target for t in self.tasks])
        scores = {}
        for task in self.tasks:
            dist2 = 0.0
            for name, arr in model.items():
                diff = arr.astype(np.float64) - task.target.get(name).astype(np.float64)
                dist2 += float(np.dot(diff.reshape(-1), diff.reshape(-1)))
            score = 100.0 * np.exp(-dist2 / (task.scale * task.scale))
            scores[task.name] = float(min(100.0, max(0.0, score)))
        return EvalResult(model_id=model_id, task_scores=scores)

    def evaluate(self, model_path: str | Path, model_id: str) -> EvalResult:
        key = file_content_hash(model_path)
        if key not in self._cache:
            self.invocations += 1
            result = self.score_map(load_tensor_map(model_path), model_id)
            self._cache[key] = result.task_scores
        return EvalResult(model_id=model_id, task_scores=dict(self._cache[key]))


def evaluator_from_config(cfg: dict, root: Path | None = None):
    kind = cfg.get("kind")
    if kind == "external":
        return ExternalEvaluator(command=cfg["command"],
                                 tasks=cfg.get("tasks"),
                                 timeout=float(cfg.get("timeout", DEFAULT_TIMEOUT)))
    if kind == "synthetic":
        spec = cfg.get("spec")
        if isinstance(spec, str):
            spec_path = Path(spec)
            if root is not None and not spec_path.is_absolute():
                spec_path = root / spec_path
            spec = json.loads(spec_path.read_text())
        return SyntheticEvaluator.from_spec(spec, root=root)
    raise EvaluatorError(f"unknown evaluator kind {kind!r}")
