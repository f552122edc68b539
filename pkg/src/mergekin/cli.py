"""Command-line surface.

Subcommands: merge, kinship, matrix, metrics, analyze, evolve, export-tree.
Report paths write delimited output plus rendered figures next to it.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 evaluator failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from . import evolution, kinship, metrics, ops, plots
from .evaluators import EvaluatorError, evaluator_from_config
from .tensorstore import load_tensor_map, save_tensor_map

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_EVALUATOR = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mergekin",
                     description="Model merging, kinship and evolution toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", help="Apply a merge recipe to checkpoints.")
    p.add_argument("parents", nargs="*", help="Parent checkpoint files, in order.")
    p.add_argument("--recipe", help="Recipe JSON file (parents/base are paths).")
    p.add_argument("--operator", choices=ops.OPERATORS)
    p.add_argument("--base", help="Base checkpoint (ties/dare_ties).")
    p.add_argument("--weights", help="Comma-separated linear weights.")
    p.add_argument("--t", type=float, default=0.5, help="SLERP parameter.")
    p.add_argument("--density", type=float, default=0.5)
    p.add_argument("--weight", type=float, default=1.0,
                   help="Scale for the merged task vector.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("kinship", help="Kinship of 2+ models against a base.")
    p.add_argument("models", nargs="+")
    p.add_argument("--base", required=True)
    p.add_argument("--metric", choices=kinship.METRICS, default="pcc")
    p.add_argument("--json", action="store_true", dest="as_json")

    p = sub.add_parser("matrix", help="Pairwise kinship matrix for a model group.")
    p.add_argument("models", nargs="+", help="Checkpoint files; ids are stem names.")
    p.add_argument("--base", required=True)
    p.add_argument("--metric", choices=kinship.METRICS, default="pcc")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("metrics", help="ATP/gain/ATPD report from an eval CSV.")
    p.add_argument("eval_csv", help="Columns: model[,parents]; remaining columns "
                                    "are task scores. parents is ';'-separated.")
    p.add_argument("--out", help="Report CSV path (default: stdout).")
    p.add_argument("--atpd", action="store_true",
                   help="Also emit a pairwise ATPD matrix CSV next to --out.")

    p = sub.add_parser("analyze", help="Kinship/gain correlation report.")
    p.add_argument("rows_csv", help="Columns: gain plus kinship_<metric> columns.")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("evolve", help="Run an iterative merging strategy.")
    p.add_argument("config", help="Run configuration JSON.")
    p.add_argument("--out", help="Output directory (overrides config).")

    p = sub.add_parser("export-tree", help="Family tree from an evolution log.")
    p.add_argument("log", help="Evolution log (JSON lines).")
    p.add_argument("--format", choices=("dot", "json"), default="json")
    p.add_argument("--out", help="Output path (default: stdout).")

    return parser


# -- subcommand implementations --------------------------------------------


def _cmd_merge(args) -> int:
    if args.recipe:
        recipe = ops.MergeRecipe.from_dict(json.loads(Path(args.recipe).read_text()))
    else:
        if not args.operator:
            raise _UsageError("either --recipe or --operator is required")
        params = {}
        if args.operator == "linear" and args.weights:
            params["weights"] = [float(w) for w in args.weights.split(",")]
        elif args.operator == "slerp":
            params["t"] = args.t
        elif args.operator in ("ties", "dare_ties"):
            params.update(density=args.density, weight=args.weight)
            if args.operator == "dare_ties":
                params["seed"] = args.seed
        recipe = ops.MergeRecipe(operator=args.operator, parents=list(args.parents),
                                 base=args.base, params=params)
        recipe.validate()
    if not recipe.parents:
        raise _UsageError("no parent checkpoints given")
    parents = [load_tensor_map(p) for p in recipe.parents]
    base = load_tensor_map(recipe.base) if recipe.base else None
    merged = ops.apply_recipe(recipe, parents, base=base)
    save_tensor_map(merged, args.out)
    print(f"wrote {args.out} ({merged.num_parameters} parameters)")
    return EXIT_OK


def _load_deltas(model_paths: list[str], base_path: str):
    base = load_tensor_map(base_path)
    deltas = []
    for path in model_paths:
        model_id = Path(path).stem
        deltas.append(kinship.compute_delta(load_tensor_map(path), base,
                                            model_id=model_id))
    return deltas


def _cmd_kinship(args) -> int:
    deltas = _load_deltas(args.models, args.base)
    if len(deltas) == 2:
        value = kinship.sim_pair(deltas[0], deltas[1], args.metric)
    else:
        value = kinship.kinship_group(deltas, args.metric)
    if args.as_json:
        print(json.dumps({"metric": args.metric, "n": len(deltas),
                          "kinship": value}, sort_keys=True))
    else:
        print(f"{value:.6g}")
    return EXIT_OK


def _cmd_matrix(args) -> int:
    base = load_tensor_map(args.base)
    models = [(Path(p).stem, load_tensor_map(p)) for p in args.models]
    matrix = kinship.kinship_matrix(models, base, args.metric)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    csv_path = out_dir / "kinship_matrix.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model"] + matrix.model_ids)
        for i, mid in enumerate(matrix.model_ids):
            writer.writerow([mid] + [repr(float(v)) for v in matrix.values[i]])
    json_path = out_dir / "kinship_matrix.json"
    json_path.write_text(json.dumps(
        {"metric": matrix.metric, "model_ids": matrix.model_ids,
         "values": [[float(v) for v in row] for row in matrix.values]},
        indent=2, sort_keys=True) + "\n")
    plots.plot_kinship_matrix(matrix, out_dir / "kinship_matrix.png")
    print(f"wrote {csv_path}, {json_path} and kinship_matrix.png")
    return EXIT_OK


def _read_eval_csv(path: str):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        task_cols = [c for c in fields if c not in ("model", "parents")]
        rows = []
        for raw in reader:
            scores = {c: float(raw[c]) for c in task_cols if raw[c] not in ("", None)}
            parents = [p for p in (raw.get("parents") or "").split(";") if p]
            rows.append({"model": raw["model"], "parents": parents,
                         "result": metrics.EvalResult(raw["model"], scores)})
    return rows


def _cmd_metrics(args) -> int:
    rows = _read_eval_csv(args.eval_csv)
    atps = {r["model"]: metrics.average_task_performance(r["result"]) for r in rows}
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["model", "avg", "gain"])
    for row in rows:
        gain = ""
        if row["parents"]:
            missing = [p for p in row["parents"] if p not in atps]
            if missing:
                raise metrics.MetricsError(
                    f"{row['model']}: unknown parents {missing}")
            gain = repr(metrics.merge_gain(
                atps[row["model"]], [atps[p] for p in row["parents"]]))
        writer.writerow([row["model"], repr(atps[row["model"]]), gain])
    text = out.getvalue()
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    if args.atpd:
        pair_out = io.StringIO()
        writer = csv.writer(pair_out)
        writer.writerow(["model_a", "model_b", "atpd"])
        for i, a in enumerate(rows):
            for b in rows[i + 1:]:
                writer.writerow([a["model"], b["model"],
                                 repr(metrics.atpd(a["result"], b["result"]))])
        if args.out:
            atpd_path = Path(args.out).with_name(Path(args.out).stem + "_atpd.csv")
            atpd_path.write_text(pair_out.getvalue())
            print(f"wrote {atpd_path}")
        else:
            sys.stdout.write(pair_out.getvalue())
    return EXIT_OK


def _cmd_analyze(args) -> int:
    with open(args.rows_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise metrics.MetricsError("no data rows in input")
    present = [m for m in kinship.METRICS if f"kinship_{m}" in rows[0]]
    if not present or "gain" not in rows[0]:
        raise metrics.MetricsError(
            "input needs a 'gain' column and at least one kinship_<metric> column")
    data = [{**{k: float(row[k]) for k in ["gain"] + [f"kinship_{m}" for m in present]}}
            for row in rows]
    gains = [row["gain"] for row in data]
    report = {"n": len(data), "metrics": {}}
    for m in present:
        kin = [row[f"kinship_{m}"] for row in data]
        r_signed, p_signed = metrics.pearson_with_p(kin, gains)
        r_abs, p_abs = metrics.pearson_with_p(kin, [abs(g) for g in gains])
        report["metrics"][m] = {"r_signed": r_signed, "p_signed": p_signed,
                                "r_abs": r_abs, "p_abs": p_abs}
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "correlation_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    with (out_dir / "correlation_report.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "r_signed", "p_signed", "r_abs", "p_abs"])
        for m in present:
            entry = report["metrics"][m]
            writer.writerow([m] + [repr(entry[k]) for k in
                                   ("r_signed", "p_signed", "r_abs", "p_abs")])
    for m in present:
        plots.plot_kinship_vs_gain(data, m, out_dir / f"scatter_{m}.png")
    print(f"wrote correlation report and figures to {out_dir}")
    return EXIT_OK


def load_run_config(path: Path) -> dict:
    cfg = json.loads(path.read_text())
    root = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else root / p

    cfg["base"] = str(resolve(cfg["base"]))
    cfg["foundations"] = {mid: str(resolve(p))
                          for mid, p in cfg["foundations"].items()}
    cfg["_root"] = str(root)
    return cfg


def _cmd_evolve(args) -> int:
    cfg = load_run_config(Path(args.config))
    out_dir = Path(args.out or cfg.get("output_dir", "evolve-out"))
    if not out_dir.is_absolute() and not args.out:
        out_dir = Path(cfg["_root"]) / out_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    strategy_cfg = cfg["strategy"]
    stop_cfg = strategy_cfg.get("stop", {})
    merge_cfg = cfg.get("merge", {"operator": "slerp", "params": {"t": 0.5}})
    template = ops.MergeRecipe(operator=merge_cfg["operator"], parents=[],
                               params=dict(merge_cfg.get("params", {})))
    strategy = evolution.StrategyConfig(
        kind=strategy_cfg["kind"],
        k=int(strategy_cfg["k"]),
        merge_operator=template,
        metric=strategy_cfg.get("metric", "pcc"),
        stop=evolution.StopCriterion(
            kind=stop_cfg.get("kind", "topk_stable"),
            kinship_threshold=float(stop_cfg.get("kinship_threshold", 0.9))),
        max_generations=int(strategy_cfg.get("max_generations", 10)),
        rng_seed=int(strategy_cfg.get("rng_seed", 0)))

    pool = evolution.Pool(
        base=evolution.ModelRecord(id=cfg.get("base_id", "base"),
                                   path=Path(cfg["base"])),
        foundations=[evolution.ModelRecord(id=mid, path=Path(p))
                     for mid, p in sorted(cfg["foundations"].items())])
    evaluator = evaluator_from_config(cfg["evaluator"], root=Path(cfg["_root"]))

    run = {"topk_greedy": evolution.run_topk_greedy,
           "topk_greedy_kinship": evolution.run_topk_greedy_kinship,
           "random": evolution.run_random}[strategy.kind]
    log = run(pool, strategy, evaluator, workdir=out_dir)

    (out_dir / "log.jsonl").write_text(log.to_jsonl())
    (out_dir / "tree.json").write_text(evolution.export_family_tree(log, "json"))
    (out_dir / "tree.dot").write_text(evolution.export_family_tree(log, "dot"))
    rows = evolution.generation_report(log)
    (out_dir / "report.csv").write_text(evolution.report_to_csv(rows))
    figures = out_dir / "figures"
    figures.mkdir(exist_ok=True)
    plots.plot_atp_trajectory(rows, figures / "atp_trajectory.png")

    best = log.best()
    print(f"stopped: {log.stop_reason()}; best: {best[0]} atp={best[1]:.4f}")
    print(f"outputs in {out_dir}")
    return EXIT_OK


def _cmd_export_tree(args) -> int:
    log = evolution.EvolutionLog.from_jsonl(Path(args.log).read_text())
    doc = evolution.export_family_tree(log, args.format)
    if args.out:
        Path(args.out).write_text(doc)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(doc)
    return EXIT_OK


_COMMANDS = {
    "merge": _cmd_merge,
    "kinship": _cmd_kinship,
    "matrix": _cmd_matrix,
    "metrics": _cmd_metrics,
    "analyze": _cmd_analyze,
    "evolve": _cmd_evolve,
    "export-tree": _cmd_export_tree,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EvaluatorError as exc:
        print(f"evaluator failure: {exc}", file=sys.stderr)
        return EXIT_EVALUATOR
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
