"""Iterative merging engine: model pool, selection strategies, stopping
criteria, and the evolution log the family tree is derived from.

Strategies follow the same loop: build a first generation, keep the top-k
set S of the pool, and iterate until S stabilizes (or another criterion
fires). The kinship-guided variant additionally merges the current best
model with its least-related recent child each iteration.

Runs are deterministic: pair enumeration is fixed by (ATP desc, id asc),
random pair selection is seeded, and the log is an append-only sequence of
JSON-serializable events.
"""

from __future__ import annotations

import json
import random
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kinship import (KinshipError, compute_delta, delta_from_array, sim_pair)
from .metrics import EvalResult, average_task_performance
from .ops import MergeRecipe, apply_recipe
from .tensorstore import TensorMap, check_compatible, load_tensor_map, save_tensor_map

DEGENERATE_EPS = 1e-7

STRATEGIES = ("topk_greedy", "topk_greedy_kinship", "random")
STOP_KINDS = ("topk_stable", "high_kinship", "max_generations")


class EvolutionError(ValueError):
    pass


@dataclass
class ModelRecord:
    id: str
    path: Path | None = None
    generation: int = 0
    parents: list[str] = field(default_factory=list)
    recipe: MergeRecipe | None = None
    eval_result: EvalResult | None = None
    atp: float | None = None


@dataclass
class StopCriterion:
    kind: str = "topk_stable"
    kinship_threshold: float = 0.9

    def __post_init__(self):
        if self.kind not in STOP_KINDS:
            raise EvolutionError(f"unknown stop criterion {self.kind!r}")
        if not -1.0 < self.kinship_threshold <= 1.0:
            raise EvolutionError(
                f"kinship threshold {self.kinship_threshold} outside (-1, 1]")


@dataclass
class StrategyConfig:
    kind: str
    k: int
    merge_operator: MergeRecipe
    metric: str = "pcc"
    stop: StopCriterion = field(default_factory=StopCriterion)
    max_generations: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise EvolutionError(f"unknown strategy {self.kind!r}")
        if self.k < 1:
            raise EvolutionError("k must be positive")
        if self.max_generations < 1:
            raise EvolutionError("max_generations must be positive")


class Pool:
    """Id-keyed model records sharing one pre-trained ancestor. The base
    record is held in the pool but never merged or selected."""

    def __init__(self, base: ModelRecord, foundations: list[ModelRecord]):
        self.base_id = base.id
        self.records: dict[str, ModelRecord] = {}
        for record in [base] + foundations:
            if record.id in self.records:
                raise EvolutionError(f"duplicate model id {record.id!r}")
            self.records[record.id] = record
        if len(foundations) < 2:
            raise EvolutionError("need at least 2 foundation models")

    @property
    def base(self) -> ModelRecord:
        return self.records[self.base_id]

    def candidates(self) -> list[ModelRecord]:
        return [r for r in self.records.values() if r.id != self.base_id]

    def add(self, record: ModelRecord) -> None:
        if record.id in self.records:
            raise EvolutionError(f"duplicate model id {record.id!r}")
        self.records[record.id] = record


class EvolutionLog:
    """Append-only ordered event record; replaying it reconstructs the
    family tree exactly."""

    def __init__(self, events: list[dict] | None = None):
        self.events = list(events or [])

    def append(self, event: str, **fields) -> None:
        self.events.append({"seq": len(self.events), "event": event, **fields})

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    @classmethod
    def from_jsonl(cls, text: str) -> "EvolutionLog":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])

    def stop_reason(self) -> str | None:
        for event in reversed(self.events):
            if event["event"] == "stopped":
                return event["reason"]
        return None

    def best(self) -> tuple[str, float] | None:
        """(model id, atp) with the highest ATP ever evaluated."""
        best = None
        for event in self.events:
            if event["event"] == "evaluated":
                if best is None or event["atp"] > best[1]:
                    best = (event["model"], event["atp"])
        return best


def select_exploration_partner(kinships: dict[str, float], metric: str) -> str:
    """Least-related candidate: argmin for pcc/cs, argmax distance for ed;
    ties resolve to the lowest id."""
    if not kinships:
        raise EvolutionError("no exploration candidates")
    sign = -1.0 if metric == "ed" else 1.0
    return min(sorted(kinships), key=lambda mid: sign * kinships[mid])


def check_early_stop(top_models: list[ModelRecord], base: ModelRecord,
                     threshold: float) -> bool:
    """True iff every unordered pair of top models has pcc kinship above
    the threshold."""
    if len(top_models) < 2:
        raise EvolutionError("early stop check needs at least 2 top models")
    base_map = load_tensor_map(base.path)
    deltas = [compute_delta(load_tensor_map(r.path), base_map, model_id=r.id)
              for r in top_models]
    for i in range(len(deltas)):
        for j in range(i + 1, len(deltas)):
            if sim_pair(deltas[i], deltas[j], "pcc") <= threshold:
                return False
    return True


class _Runner:
    def __init__(self, pool: Pool, cfg: StrategyConfig, evaluator,
                 workdir: Path):
        self.pool = pool
        self.cfg = cfg
        self.evaluator = evaluator
        self.workdir = workdir
        self.log = EvolutionLog()
        self.maps: dict[str, TensorMap] = {}
        self.deltas: dict[str, np.ndarray] = {}
        self.ordinals: dict[int, int] = {}
        self.rng = random.Random(cfg.rng_seed)
        (self.workdir / "models").mkdir(parents=True, exist_ok=True)

    # -- model access ------------------------------------------------------

    def tensor_map(self, model_id: str) -> TensorMap:
        if model_id not in self.maps:
            record = self.pool.records[model_id]
            self.maps[model_id] = load_tensor_map(record.path)
        return self.maps[model_id]

    def delta(self, model_id: str) -> np.ndarray:
        if model_id not in self.deltas:
            d = compute_delta(self.tensor_map(model_id),
                              self.tensor_map(self.pool.base_id),
                              model_id=model_id, base_id=self.pool.base_id)
            self.deltas[model_id] = np.concatenate(list(d.stream()))
        return self.deltas[model_id]

    def parent_kinship(self, a: str, b: str) -> float | None:
        try:
            return sim_pair(delta_from_array(self.delta(a), model_id=a),
                            delta_from_array(self.delta(b), model_id=b),
                            self.cfg.metric)
        except KinshipError:
            return None

    # -- evaluation and selection ------------------------------------------

    def evaluate(self, record: ModelRecord) -> None:
        if record.atp is not None:
            return
        result = self.evaluator.evaluate(record.path, record.id)
        record.eval_result = result
        record.atp = average_task_performance(result)
        self.log.append("evaluated", model=record.id, atp=record.atp,
                        scores=dict(sorted(result.task_scores.items())))

    def ranked(self) -> list[ModelRecord]:
        return sorted(self.pool.candidates(),
                      key=lambda r: (-r.atp, r.id))

    def topk(self) -> list[ModelRecord]:
        return self.ranked()[:self.cfg.k]

    def pool_best_atp(self) -> float:
        return max(r.atp for r in self.pool.candidates() if r.atp is not None)

    # -- merging -----------------------------------------------------------

    def merge_pair(self, a: ModelRecord, b: ModelRecord,
                   exploration: bool = False) -> ModelRecord:
        generation = 1 + max(a.generation, b.generation)
        self.ordinals[generation] = self.ordinals.get(generation, 0) + 1
        child_id = f"model-{generation}-{self.ordinals[generation]}"
        template = self.cfg.merge_operator
        recipe = MergeRecipe(operator=template.operator,
                             parents=[a.id, b.id],
                             base=self.pool.base_id,
                             params=dict(template.params))
        self.log.append("pair_selected", parents=[a.id, b.id],
                        exploration=exploration)
        merged = apply_recipe(recipe, [self.tensor_map(a.id), self.tensor_map(b.id)],
                              base=self.tensor_map(self.pool.base_id))
        degenerate = any(
            all(float(np.max(np.abs(merged.get(n) - self.tensor_map(p.id).get(n))))
                < DEGENERATE_EPS for n in merged.names())
            for p in (a, b))
        path = self.workdir / "models" / f"{child_id}.safetensors"
        save_tensor_map(merged, path)
        self.maps[child_id] = merged
        record = ModelRecord(id=child_id, path=path, generation=generation,
                             parents=[a.id, b.id], recipe=recipe)
        self.pool.add(record)
        self.log.append("merged", child=child_id, generation=generation,
                        recipe=recipe.to_dict(), degenerate=degenerate,
                        parent_kinship=self.parent_kinship(a.id, b.id))
        return record

    def merge_all_pairs(self, members: list[ModelRecord]) -> list[ModelRecord]:
        children = []
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                children.append(self.merge_pair(members[i], members[j]))
        return children

    def random_pairs(self, count: int) -> list[tuple[ModelRecord, ModelRecord]]:
        members = sorted(self.pool.candidates(), key=lambda r: r.id)
        pairs = [(members[i], members[j])
                 for i in range(len(members)) for j in range(i + 1, len(members))]
        return self.rng.sample(pairs, min(count, len(pairs)))

    def exploration_merge(self, topk: list[ModelRecord],
                          prev_children: list[ModelRecord]) -> ModelRecord | None:
        best = topk[0]
        candidates = [r for r in prev_children if r.id != best.id]
        if not candidates:
            candidates = [r for r in topk[1:]]
        kinships = {}
        for cand in candidates:
            value = self.parent_kinship(cand.id, best.id)
            if value is not None:
                kinships[cand.id] = value
        if not kinships:
            self.log.append("exploration_skipped",
                            reason="kinship undefined for all candidates")
            return None
        partner_id = select_exploration_partner(kinships, self.cfg.metric)
        self.log.append("exploration_merge", best=best.id, partner=partner_id,
                        kinship=kinships[partner_id])
        return self.merge_pair(best, self.pool.records[partner_id],
                               exploration=True)

    # -- main loop ---------------------------------------------------------

    def run(self) -> EvolutionLog:
        strategy = self.cfg.kind
        for record in sorted(self.pool.candidates(), key=lambda r: r.id):
            self.evaluate(record)
        check_compatible([self.tensor_map(r.id) for r in self.pool.candidates()]
                         + [self.tensor_map(self.pool.base_id)])

        iteration = 1
        self.log.append("generation_started", generation=iteration,
                        pool_best_before=self.pool_best_atp())
        if strategy == "random":
            children = [self.merge_pair(a, b)
                        for a, b in self.random_pairs(self.cfg.k)]
        else:
            foundations = sorted(self.pool.candidates(),
                                 key=lambda r: (-r.atp, r.id))
            children = self.merge_all_pairs(foundations)
        for child in children:
            self.evaluate(child)

        topk = self.topk()
        self.log.append("topk_updated", topk=[r.id for r in topk])
        prev_topk_ids: list[str] | None = None

        while True:
            topk_ids = [r.id for r in topk]
            if topk_ids == prev_topk_ids:
                self.log.append("stopped", reason="topk_stable",
                                generation=iteration)
                break
            if (self.cfg.stop.kind == "high_kinship" and len(topk) >= 2
                    and self._topk_high_kinship(topk)):
                self.log.append("stopped", reason="high_kinship",
                                generation=iteration)
                break
            if iteration >= self.cfg.max_generations:
                self.log.append("stopped", reason="max_generations",
                                generation=iteration)
                break

            prev_topk_ids = topk_ids
            prev_children = children
            iteration += 1
            self.log.append("generation_started", generation=iteration,
                            pool_best_before=self.pool_best_atp())
            if strategy == "random":
                children = [self.merge_pair(a, b)
                            for a, b in self.random_pairs(self.cfg.k)]
            else:
                children = self.merge_all_pairs(topk)
            for child in children:
                self.evaluate(child)
            if strategy == "topk_greedy_kinship":
                explored = self.exploration_merge(topk, prev_children)
                if explored is not None:
                    self.evaluate(explored)
                    children = children + [explored]
            topk = self.topk()
            self.log.append("topk_updated", topk=[r.id for r in topk])

        return self.log

    def _topk_high_kinship(self, topk: list[ModelRecord]) -> bool:
        threshold = self.cfg.stop.kinship_threshold
        for i in range(len(topk)):
            for j in range(i + 1, len(topk)):
                try:
                    value = sim_pair(
                        delta_from_array(self.delta(topk[i].id)),
                        delta_from_array(self.delta(topk[j].id)), "pcc")
                except KinshipError:
                    return False
                if value <= threshold:
                    return False
        return True


def _run(pool: Pool, cfg: StrategyConfig, evaluator,
         workdir: Path | None) -> EvolutionLog:
    if workdir is None:
        with tempfile.TemporaryDirectory() as tmp:
            return _Runner(pool, cfg, evaluator, Path(tmp)).run()
    return _Runner(pool, cfg, evaluator, Path(workdir)).run()


def run_topk_greedy(pool: Pool, cfg: StrategyConfig, evaluator,
                    workdir: Path | None = None) -> EvolutionLog:
    """Merge every pair of the current top-k set each generation until the
    set stabilizes."""
    cfg = _with_kind(cfg, "topk_greedy")
    return _run(pool, cfg, evaluator, workdir)


def run_topk_greedy_kinship(pool: Pool, cfg: StrategyConfig, evaluator,
                            workdir: Path | None = None) -> EvolutionLog:
    """Greedy loop plus a per-generation exploration merge of the best
    model with its least-related recent child."""
    cfg = _with_kind(cfg, "topk_greedy_kinship")
    return _run(pool, cfg, evaluator, workdir)


def run_random(pool: Pool, cfg: StrategyConfig, evaluator,
               workdir: Path | None = None) -> EvolutionLog:
    """Merge k randomly drawn distinct pairs from the whole pool each
    generation."""
    cfg = _with_kind(cfg, "random")
    return _run(pool, cfg, evaluator, workdir)


def _with_kind(cfg: StrategyConfig, kind: str) -> StrategyConfig:
    if cfg.kind != kind:
        cfg = StrategyConfig(kind=kind, k=cfg.k, merge_operator=cfg.merge_operator,
                             metric=cfg.metric, stop=cfg.stop,
                             max_generations=cfg.max_generations,
                             rng_seed=cfg.rng_seed)
    return cfg


# -- family tree and reports ----------------------------------------------


def family_tree(log: EvolutionLog) -> tuple[list[dict], list[dict]]:
    """Nodes (id, generation, atp) and parent->child edges with operator,
    replayed from the log."""
    atps = {}
    for event in log.events:
        if event["event"] == "evaluated":
            atps[event["model"]] = event["atp"]
    nodes = {}
    edges = []
    for event in log.events:
        if event["event"] != "merged":
            continue
        child = event["child"]
        recipe = event["recipe"]
        nodes[child] = {"id": child, "generation": event["generation"],
                        "atp": atps.get(child)}
        for parent in recipe["parents"]:
            if parent not in nodes:
                nodes[parent] = {"id": parent, "generation": 0,
                                 "atp": atps.get(parent)}
            edges.append({"parent": parent, "child": child,
                          "operator": recipe["operator"]})
    generations = {n["id"]: n["generation"] for n in nodes.values()}
    for event in log.events:
        if event["event"] == "merged":
            for parent in event["recipe"]["parents"]:
                if parent in generations and generations[parent] >= event["generation"]:
                    raise EvolutionError("cyclic ancestry in log")
    ordered = sorted(nodes.values(), key=lambda n: (n["generation"], n["id"]))
    return ordered, edges


def export_family_tree(log: EvolutionLog, fmt: str = "json") -> str:
    nodes, edges = family_tree(log)
    if fmt == "json":
        return json.dumps({"nodes": nodes, "edges": edges},
                          indent=2, sort_keys=True) + "\n"
    if fmt == "dot":
        lines = ["digraph family_tree {", "  rankdir=TB;"]
        for node in nodes:
            atp = "n/a" if node["atp"] is None else f"{node['atp']:.2f}"
            lines.append(
                f'  "{node["id"]}" [label="{node["id"]}\\ngen {node["generation"]}'
                f'\\natp {atp}"];')
        for edge in edges:
            lines.append(
                f'  "{edge["parent"]}" -> "{edge["child"]}" '
                f'[label="{edge["operator"]}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"
    raise EvolutionError(f"unknown tree format {fmt!r}")


def generation_report(log: EvolutionLog) -> list[dict]:
    """Rows (model, avg, gain, delta_to_top, kinship) for every model in
    the order it entered the pool."""
    atps = {}
    scores_seen = []
    for event in log.events:
        if event["event"] == "evaluated" and event["model"] not in atps:
            atps[event["model"]] = event["atp"]
            scores_seen.append(event["model"])
    merged = {e["child"]: e for e in log.events if e["event"] == "merged"}
    pool_best = {}
    current_best = None
    for event in log.events:
        if event["event"] == "generation_started":
            current_best = event["pool_best_before"]
        elif event["event"] == "merged":
            pool_best[event["child"]] = current_best

    rows = []
    for model in scores_seen:
        atp = atps[model]
        if model in merged:
            parents = merged[model]["recipe"]["parents"]
            parent_mean = sum(atps[p] for p in parents) / len(parents)
            rows.append({
                "model": model,
                "avg": round(atp, 6),
                "gain": round(atp - parent_mean, 6),
                "delta_to_top": round(atp - pool_best[model], 6),
                "kinship": (None if merged[model]["parent_kinship"] is None
                            else round(merged[model]["parent_kinship"], 6)),
            })
        else:
            rows.append({"model": model, "avg": round(atp, 6), "gain": None,
                         "delta_to_top": None, "kinship": None})
    return rows


def report_to_csv(rows: list[dict]) -> str:
    lines = ["model,avg,gain,delta_to_top,kinship"]
    for row in rows:
        cells = [row["model"]]
        for key in ("avg", "gain", "delta_to_top", "kinship"):
            cells.append("" if row[key] is None else repr(row[key]))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
