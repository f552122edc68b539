#!/usr/bin/env python3
"""Regenerate the synthetic escape-pool fixture.

Builds a tiny 3-foundation pool over a 4-parameter weight space where the
plain top-k greedy strategy stalls (top-k stabilizes after generation 2)
while the kinship-guided variant escapes to a strictly better model. The
geometry was found by a randomized search over foundation positions and
synthetic task targets; the winning draw (seed 411 below) is reproduced
deterministically here, and the resulting event logs are frozen next to
the pool so regressions are byte-exact.

Run from the repository root: python3 scripts/make_escape_fixture.py
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from mergekin import (MergeRecipe, ModelRecord, Pool, StopCriterion,
                      StrategyConfig, SyntheticEvaluator, SyntheticTask,
                      TensorMap, run_random, run_topk_greedy,
                      run_topk_greedy_kinship, save_tensor_map)

SEARCH_SEED = 411
OUT = Path(__file__).resolve().parent.parent / "fixtures" / "escape_pool"


def draw_geometry(seed: int):
    """The randomized draw the fixture search iterated over."""
    rng = np.random.default_rng(seed)
    f = {f"f{i+1}": rng.uniform(0, 2, size=2) for i in range(3)}
    keys = list(f)
    mids = [(f[a] + f[b]) / 2 for a in keys for b in keys if a < b]
    quarter = [(f[a] + 3 * f[b]) / 4 for a in keys for b in keys if a != b]
    cands = (list(f.values()) + mids + quarter
             + [rng.uniform(0, 2, size=2) for _ in range(4)])
    tasks = []
    for _ in range(3):
        t = cands[rng.integers(len(cands))]
        s = rng.uniform(0.3, 1.2)
        tasks.append((t, s))
    noise = {m: (rng.normal() * 1e-3, rng.normal() * 1e-3)
             for m in ("f1", "f2", "f3")}
    return f, tasks, noise


def point_map(x: float, y: float, n1: float = 0.0, n2: float = 0.0) -> TensorMap:
    return TensorMap.from_arrays(
        {"w": np.array([x, y, n1, n2], dtype=np.float32)})


def strategy_config(kind: str, rng_seed: int = 0) -> StrategyConfig:
    return StrategyConfig(
        kind=kind, k=2,
        merge_operator=MergeRecipe(operator="linear", parents=[], params={}),
        metric="pcc", stop=StopCriterion(kind="topk_stable"),
        max_generations=6, rng_seed=rng_seed)


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "expected").mkdir(exist_ok=True)

    foundations, tasks, noise = draw_geometry(SEARCH_SEED)
    save_tensor_map(point_map(0.0, 0.0), OUT / "base.safetensors")
    for mid, (x, y) in foundations.items():
        n1, n2 = noise[mid]
        save_tensor_map(point_map(x, y, n1, n2), OUT / f"{mid}.safetensors")

    spec = {"tasks": []}
    for j, (t, s) in enumerate(tasks):
        name = f"task{j+1}"
        save_tensor_map(point_map(t[0], t[1]), OUT / f"{name}.safetensors")
        spec["tasks"].append({"name": name,
                              "target": f"{name}.safetensors",
                              "scale": float(s)})
    (OUT / "synth_spec.json").write_text(json.dumps(spec, indent=2) + "\n")

    for kind, fname, rng_seed in (("topk_greedy", "greedy.json", 0),
                                  ("topk_greedy_kinship", "kinship.json", 0),
                                  ("random", "random.json", 7)):
        cfg = {
            "base": "base.safetensors",
            "foundations": {m: f"{m}.safetensors" for m in ("f1", "f2", "f3")},
            "strategy": {"kind": kind, "k": 2, "metric": "pcc",
                         "max_generations": 6, "rng_seed": rng_seed,
                         "stop": {"kind": "topk_stable"}},
            "merge": {"operator": "linear", "params": {}},
            "evaluator": {"kind": "synthetic", "spec": "synth_spec.json"},
        }
        (OUT / fname).write_text(json.dumps(cfg, indent=2) + "\n")

    def run(kind, fn, rng_seed=0):
        evaluator = SyntheticEvaluator(
            [SyntheticTask(name=e["name"],
                           target=point_map(tasks[j][0][0], tasks[j][0][1]),
                           scale=float(e["scale"]))
             for j, e in enumerate(spec["tasks"])])
        pool = Pool(
            base=ModelRecord(id="base", path=OUT / "base.safetensors"),
            foundations=[ModelRecord(id=m, path=OUT / f"{m}.safetensors")
                         for m in ("f1", "f2", "f3")])
        with tempfile.TemporaryDirectory() as tmp:
            return fn(pool, strategy_config(kind, rng_seed), evaluator,
                      workdir=Path(tmp))

    greedy = run("topk_greedy", run_topk_greedy)
    kin = run("topk_greedy_kinship", run_topk_greedy_kinship)
    rand = run("random", run_random, rng_seed=7)

    assert greedy.stop_reason() == "topk_stable", greedy.stop_reason()
    assert kin.best()[1] > greedy.best()[1] + 0.5, (kin.best(), greedy.best())
    assert any(e["event"] == "exploration_merge" for e in kin.events)

    (OUT / "expected" / "greedy_log.jsonl").write_text(greedy.to_jsonl())
    (OUT / "expected" / "kinship_log.jsonl").write_text(kin.to_jsonl())
    (OUT / "expected" / "random_log.jsonl").write_text(rand.to_jsonl())
    print(f"greedy best {greedy.best()}, kinship best {kin.best()}, "
          f"random best {rand.best()}")
    print(f"fixture written to {OUT}")


if __name__ == "__main__":
    main()
