"""``npgnn`` command line: train, experiment, gradcheck, synth, inspect.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import data
from .errors import NPGNNError
from .graph import TASKS, Graph, make_split
from .model import DECODER_OUTPUTS, ACTIVATIONS, load_params, save_params
from .training import MODELS, TrainConfig, TrainingDiverged, toy_gradcheck, train

log = logging.getLogger("npgnn")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

DATASET_ITERATIONS = {"cora": 500, "citeseer": 500, "pubmed": 4000, "sbm": 200}
LONG_RUNNING = frozenset({"pubmed"})
FEWSHOT_FRACTIONS = (0.3, 0.5, 0.7)
DISPLAY = {"cora": "Cora", "citeseer": "Citeseer", "pubmed": "PubMed", "sbm": "SBM"}

# Named table presets: (dataset, task, train_node_frac) rows; models run per row.
TABLE_PRESETS = {
    "transductive": [(d, "transductive", None) for d in ("cora", "citeseer", "pubmed")],
    "inductive": [(d, "inductive", None) for d in ("cora", "citeseer", "pubmed")],
    # pubmed is deliberately absent: too slow on a CPU at these graph sizes
    "fewshot": [(d, "fewshot", f) for d in ("cora", "citeseer") for f in FEWSHOT_FRACTIONS],
}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# shared plumbing


def load_graph(name: str, data_dir=None) -> Graph:
    if name == "sbm":
        return data.sbm_fixture(0)
    content, cites = data.find_dataset(name, data_dir)
    ds = data.read_content_cites(content, cites)
    log.info("loaded %s: %d nodes, %d edges (%s)", name, ds.graph.num_nodes, ds.graph.num_edges, ds.audit.as_dict())
    return ds.graph


def split_fractions(task: str, train_node_frac: Optional[float]) -> dict:
    if task == "fewshot":
        if train_node_frac is None:
            raise UsageError("the fewshot task requires --train-node-frac")
        return {"train_node_frac": train_node_frac}
    if train_node_frac is not None:
        raise UsageError("--train-node-frac only applies to the fewshot task")
    return {}


def _parse_override(text: str):
    if "=" not in text:
        raise UsageError(f"--set expects KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().replace("-", "_"), value


def build_config(args, dataset: str) -> TrainConfig:
    """Preset defaults, then the config file, then explicit flags."""
    doc = {"iterations": DATASET_ITERATIONS.get(dataset, 500)}
    if args.config:
        file_doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        file_doc.pop("schema_version", None)
        doc.update(file_doc)
    if getattr(args, "model", None):
        doc["model"] = args.model
    for flag, key in (
        ("iterations", "iterations"),
        ("encoder_activation", "encoder_output_activation"),
        ("decoder_output", "decoder_output_activation"),
        ("learning_rate", "learning_rate"),
        ("eval_every", "eval_every"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            doc[key] = value
    for item in getattr(args, "set", None) or []:
        key, value = _parse_override(item)
        doc[key] = value
    return data.config_from_json(doc)


@dataclass
class RunSpec:
    graph: Graph
    task: str
    fractions: dict
    config: TrainConfig


@dataclass
class RunOutcome:
    seed_result: data.SeedResult
    history: list


def run_seed(spec: RunSpec, seed: int) -> RunOutcome:
    """One isolated run: split and training are both driven by ``seed``."""
    t0 = time.perf_counter()
    config = spec.config.replace(seed=seed)
    try:
        split = make_split(spec.graph, spec.task, np.random.default_rng(seed), **spec.fractions)
        _, report = train(split, config)
    except TrainingDiverged as exc:
        res = data.SeedResult(seed, "failed", seconds=time.perf_counter() - t0, error=str(exc))
        return RunOutcome(res, exc.history)
    except (NPGNNError, ArithmeticError, ValueError) as exc:
        res = data.SeedResult(seed, "failed", seconds=time.perf_counter() - t0, error=f"{type(exc).__name__}: {exc}")
        return RunOutcome(res, [])
    auc = report.auc[0] if report.auc else None
    ap = report.ap[0] if report.ap else None
    status = "ok" if auc is not None else "failed"
    err = None if auc is not None else "no test pairs"
    res = data.SeedResult(seed, status, auc, ap, time.perf_counter() - t0, err)
    return RunOutcome(res, report.history[0])


def _run_seed_job(job):
    return run_seed(*job)


def run_seeds(spec: RunSpec, seeds, workers: int = 1) -> list[RunOutcome]:
    """Run seeds serially or on a bounded process pool; results keep seed order."""
    jobs = [(spec, s) for s in seeds]
    if workers <= 1 or len(jobs) <= 1:
        return [run_seed(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_seed_job, jobs))


def _seed_list(args) -> list[int]:
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
        if not seeds:
            raise UsageError("--seeds is empty")
        if len(set(seeds)) != len(seeds):
            raise UsageError("--seeds contains duplicates")
        return seeds
    if args.runs < 1:
        raise UsageError("--runs must be at least 1")
    return list(range(args.seed, args.seed + args.runs))


def _settings(dataset, task, fractions, args) -> dict:
    return {
        "dataset": dataset,
        "task": task,
        **fractions,
        "long_running": dataset in LONG_RUNNING,
        "data_dir": str(args.data_dir) if getattr(args, "data_dir", None) else os.environ.get(data.DATA_DIR_ENV),
    }


def _write_histories(out: Path, outcomes) -> None:
    for o in outcomes:
        data.write_history(o.history, out / f"history_seed{o.seed_result.seed}.jsonl")


def _plot_histories(out: Path, outcomes, title: str) -> Optional[Path]:
    from .plotting import plot_history

    hists = [o.history for o in outcomes if o.history]
    if not hists:
        return None
    return plot_history(hists, out / "history.png", title)


def _row(result: data.ExperimentResult, frac) -> dict:
    agg = result.aggregate
    return {
        "method": result.model.upper(),
        "dataset": DISPLAY.get(result.dataset, result.dataset),
        "task": result.task,
        "train_node_frac": "" if frac is None else frac,
        "runs": agg["runs"],
        "failed": agg["failed"],
        "auc_mean": agg["auc_mean"],
        "auc_se": agg["auc_se"],
        "ap_mean": agg["ap_mean"],
        "ap_se": agg["ap_se"],
    }


CSV_FIELDS = ("method", "dataset", "task", "train_node_frac", "runs", "failed", "auc_mean", "auc_se", "ap_mean", "ap_se")


def write_table_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _pct(mean, se) -> str:
    if not np.isfinite(mean):
        return "n/a"
    return f"{100 * mean:.1f} ± {100 * se:.1f}"


def format_table(rows) -> str:
    """Methods as rows, one AUC and one AP column per dataset (and fraction)."""
    cols = []
    for r in rows:
        key = (r["dataset"], r["train_node_frac"])
        if key not in cols:
            cols.append(key)
    methods = []
    for r in rows:
        if r["method"] not in methods:
            methods.append(r["method"])
    header = ["Method"]
    for d, f in cols:
        tag = d if f == "" else f"{d} {int(round(100 * float(f)))}%"
        header += [f"{tag} AUC", f"{tag} AP"]
    lines = [header]
    for m in methods:
        line = [m]
        for d, f in cols:
            match = [r for r in rows if r["method"] == m and r["dataset"] == d and r["train_node_frac"] == f]
            if match:
                line += [_pct(match[0]["auc_mean"], match[0]["auc_se"]), _pct(match[0]["ap_mean"], match[0]["ap_se"])]
            else:
                line += ["", ""]
        lines.append(line)
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    fmt = lambda row: " | ".join(c.ljust(w) for c, w in zip(row, widths))  # noqa: E731
    return "\n".join([fmt(lines[0]), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in lines[1:]])


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    fractions = split_fractions(args.task, args.train_node_frac)
    config = build_config(args, args.dataset).replace(seed=args.seed)
    graph = load_graph(args.dataset, args.data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    split = make_split(graph, args.task, np.random.default_rng(args.seed), **fractions)
    log.info("split: %s", split.stats())
    t0 = time.perf_counter()
    try:
        params, report = train(split, config)
    except TrainingDiverged as exc:
        data.write_history(exc.history, out / "history.jsonl")
        raise
    seconds = time.perf_counter() - t0
    if not report.auc:
        print("error: split produced no test pairs", file=sys.stderr)
        return EXIT_FAILURE
    run = data.SeedResult(args.seed, "ok", report.auc[0], report.ap[0], seconds)
    settings = {**_settings(args.dataset, args.task, fractions, args), "split": split.stats()}
    result = data.ExperimentResult(args.dataset, args.task, config.model, data.config_to_json(config), [run], settings)
    data.write_result(result, out / "result.json")
    data.write_history(report.history[0], out / "history.jsonl")
    save_params(out / "params.json", params, data.config_to_json(config))
    if not args.no_plots:
        from .plotting import plot_history

        plot_history(report.history, out / "history.png", f"{config.model} {args.dataset} {args.task}")
    print(f"test AUC {run.auc:.4f}  AP {run.ap:.4f}  ({seconds:.1f}s, results in {out})")
    return EXIT_OK


def _experiment_rows(args):
    if args.table:
        rows = TABLE_PRESETS[args.table]
        if not args.include_long:
            rows = [r for r in rows if r[0] not in LONG_RUNNING]
        if args.dataset:
            rows = [r for r in rows if r[0] == args.dataset]
        if not rows:
            raise UsageError("no preset rows left after filtering")
        return rows
    if not args.dataset:
        raise UsageError("experiment needs --dataset or --table")
    if args.task == "fewshot" and args.train_node_frac is None:
        return [(args.dataset, "fewshot", f) for f in FEWSHOT_FRACTIONS]
    split_fractions(args.task, args.train_node_frac)
    return [(args.dataset, args.task, args.train_node_frac)]


def cmd_experiment(args) -> int:
    seeds = _seed_list(args)
    rows = _experiment_rows(args)
    models = [args.model] if args.model else list(MODELS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if any(d in LONG_RUNNING for d, _, _ in rows):
        print("warning: the pubmed preset is long-running (dense n^2 reconstruction)", file=sys.stderr)

    graphs: dict = {}
    table_rows, any_ok, any_failed = [], False, False
    for dataset, task, frac in rows:
        if dataset not in graphs:
            graphs[dataset] = load_graph(dataset, args.data_dir)
        fractions = split_fractions(task, frac)
        for model in models:
            args.model = model
            config = build_config(args, dataset)
            spec = RunSpec(graphs[dataset], task, fractions, config)
            tag = f"{dataset}_{task}" + (f"_{int(round(100 * frac))}" if frac is not None else "") + f"_{model}"
            print(f"[{tag}] {len(seeds)} seed(s), {config.iterations} iterations", flush=True)
            outcomes = run_seeds(spec, seeds, args.workers)
            for o in outcomes:
                r = o.seed_result
                if r.status == "ok":
                    print(f"  seed {r.seed}: AUC {r.auc:.4f} AP {r.ap:.4f} ({r.seconds:.1f}s)", flush=True)
                else:
                    print(f"  seed {r.seed}: FAILED {r.error}", flush=True)
            result = data.ExperimentResult(
                dataset, task, model, data.config_to_json(config), [o.seed_result for o in outcomes],
                _settings(dataset, task, fractions, args),
            )
            agg = result.aggregate
            if agg["failed"]:
                any_failed = True
                print(f"warning: {agg['failed']} of {len(seeds)} seed(s) failed; aggregate uses successes only",
                      file=sys.stderr)
            any_ok = any_ok or agg["runs"] > 0
            run_dir = out / tag
            run_dir.mkdir(exist_ok=True)
            data.write_result(result, run_dir / "result.json")
            _write_histories(run_dir, outcomes)
            if not args.no_plots:
                _plot_histories(run_dir, outcomes, tag)
            table_rows.append(_row(result, frac))

    write_table_csv(table_rows, out / "summary.csv")
    (out / "summary.json").write_text(json.dumps(table_rows, indent=2), encoding="utf-8")
    if not args.no_plots:
        from .plotting import plot_summary

        labels = [
            {**r, "label": f"{r['method']} {r['dataset']}" + (f" {int(round(100 * r['train_node_frac']))}%"
                                                           if r["train_node_frac"] != "" else "")}
            for r in table_rows
        ]
        plot_summary(labels, out / "summary.png", args.table or "")
    print()
    print(format_table(table_rows))
    if not any_ok:
        print("error: every run failed", file=sys.stderr)
        return EXIT_FAILURE
    if any_failed:
        log.warning("partial failure recorded in the per-seed results")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = toy_gradcheck(
        args.model or "npgnn", args.seed, args.h, args.tol, args.encoder_activation, args.decoder_output or "sigmoid"
    )
    for line in report.lines():
        print(line)
    print(f"max relative error {report.max_error:.3e} (tolerance {args.tol:g})")
    if not report.passed:
        print(f"gradient check failed for: {', '.join(report.failing())}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    g = data.generate_sbm(args.nodes, args.blocks, args.p_in, args.p_out, args.features, rng, args.noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = [str(b) for b in data.sbm_blocks(args.nodes, args.blocks)]
    content, cites = out / f"{args.name}.content", out / f"{args.name}.cites"
    data.write_content_cites(g, content, cites, labels)
    print(f"wrote {content} and {cites}: {g.num_nodes} nodes, {g.num_edges} edges")
    return EXIT_OK


def cmd_inspect(args) -> int:
    target = Path(args.target)
    if target.is_file() and target.suffix == ".json":
        doc = json.loads(target.read_text(encoding="utf-8"))
        if doc.get("schema") == "npgnn-checkpoint":
            params, config = load_params(target)
            print(f"checkpoint: {params.kind}, encoder output {params.activation}, decoder output {params.decoder_output}")
            for k, v in params.blocks.items():
                print(f"  {k:<8} {v.shape}")
            return EXIT_OK
        result = data.ExperimentResult.from_json(doc)
        print(json.dumps({"dataset": result.dataset, "task": result.task, "model": result.model,
                          "aggregate": result.aggregate}, indent=2))
        return EXIT_OK
    graph = load_graph(args.target, args.data_dir)
    print(json.dumps({"nodes": graph.num_nodes, "edges": graph.num_edges, "features": graph.num_features}))
    if args.task:
        fractions = split_fractions(args.task, args.train_node_frac)
        split = make_split(graph, args.task, np.random.default_rng(args.seed), **fractions)
        print(json.dumps(split.stats()))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _frac(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError("fraction must lie in (0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npgnn", description="Neural-process GNN link prediction.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def model_flags(sp, default_model=None):
        sp.add_argument("--model", choices=MODELS, default=default_model)
        sp.add_argument("--config", help="JSON config file (keys of TrainConfig)")
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--learning-rate", type=float)
        sp.add_argument("--eval-every", type=int)
        sp.add_argument("--encoder-activation", choices=ACTIVATIONS)
        sp.add_argument("--decoder-output", choices=DECODER_OUTPUTS)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    def data_flags(sp, required=True):
        sp.add_argument("--dataset", required=required, help="cora, citeseer, pubmed, sbm or a file stem")
        sp.add_argument("--data-dir", help=f"directory with <name>.content/.cites (default ${data.DATA_DIR_ENV})")
        sp.add_argument("--task", choices=TASKS, default="transductive")
        sp.add_argument("--train-node-frac", type=_frac)

    t = sub.add_parser("train", help="train and evaluate one run")
    data_flags(t)
    model_flags(t, "npgnn")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default="runs/train")
    t.add_argument("--no-plots", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("experiment", help="multi-seed runs with mean and standard error")
    data_flags(e, required=False)
    model_flags(e)
    e.add_argument("--table", choices=sorted(TABLE_PRESETS), help="run a whole results-table preset")
    e.add_argument("--include-long", action="store_true", help="keep long-running (pubmed) preset rows")
    e.add_argument("--runs", type=int, default=10)
    e.add_argument("--seed", type=int, default=0, help="first seed when --seeds is absent")
    e.add_argument("--seeds", help="comma-separated explicit seeds")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", default="runs/experiment")
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(func=cmd_experiment)

    g = sub.add_parser("gradcheck", help="finite-difference check on a built-in toy graph")
    g.add_argument("--model", choices=MODELS, default="npgnn")
    g.add_argument("--encoder-activation", choices=ACTIVATIONS)
    g.add_argument("--decoder-output", choices=DECODER_OUTPUTS)
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--h", type=float, default=1e-6)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a stochastic-block-model graph as content/cites files")
    s.add_argument("--nodes", type=int, default=200)
    s.add_argument("--blocks", type=int, default=4)
    s.add_argument("--p-in", type=float, default=0.1)
    s.add_argument("--p-out", type=float, default=0.005)
    s.add_argument("--features", type=int, default=16)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--name", default="sbm")
    s.add_argument("--out", default="data")
    s.set_defaults(func=cmd_synth)

    i = sub.add_parser("inspect", help="summarise a result, checkpoint or dataset")
    i.add_argument("target", help="result/checkpoint JSON file, or a dataset name")
    i.add_argument("--data-dir")
    i.add_argument("--task", choices=TASKS)
    i.add_argument("--train-node-frac", type=_frac)
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"npgnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NPGNNError, ArithmeticError, ValueError, OSError, KeyError) as exc:
        print(f"npgnn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
