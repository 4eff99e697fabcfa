"""Command line entry point tying the offline tuner to the online executor.

Subcommands:
  generate   materialize the workload's database snapshot
  tune       partition, select cuts, materialize views, persist artifacts
  run        execute runtime batches against tuned artifacts, emit metrics
  bench      run one of the declared experiment sweeps, one CSV line per cell
  calibrate  fit the per-tuple cost constants on this machine
  oracle     query-at-a-time reference results, engine and solver checks

Every command is deterministic apart from timing fields once the seed and
flags are fixed.  Artifacts live under --out; a run without them falls back
to work sharing alone and says so on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import bench
from .config import ENV_PREFIX, EngineConfig, config_from_env
from .errors import ConfigError, DataError, InternalError, StarshareError
from .executor import execute_batch
from .materializer import (build_workload_graph, load_views, materialize,
                           save_views, solve, solve_exhaustive)
from .oracle import diff_results, normalize, run_batch
from .partitioner import derive_clustering, tune_storage
from .storage import (PartitionTree, build_fact_store, generate_database,
                      load_database, reorganize, save_database,
                      single_leaf_tree)
from .workload import (WorkloadSpec, dump_access_matrix, enumerate_subqueries,
                       load_workload, record_access_matrix, sample_rows)

METRICS_VERSION = 1
METRICS_FIELDS = ("version", "batch", "wall_ns", "scan_rows",
                  "skipped_blocks", "skipped_filters", "view_rows",
                  "base_rows", "miss_rate", "results")

DB_FILE = "db.bin"
TREE_FILE = "tree.txt"
VIEWS_FILE = "views.bin"
CONFIG_FILE = "config.json"
SELECTION_FILE = "selection.json"
METRICS_FILE = "metrics.csv"

EXHAUSTIVE_CUT_LIMIT = 18


# ---------------------------------------------------------------------------
# flag plumbing


def add_common(p: argparse.ArgumentParser, workload: bool) -> None:
    if workload:
        p.add_argument("--workload", required=True,
                       help="workload file (schema, templates, batches)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the engine seed")
    p.add_argument("--budget", default=None,
                   help="view budget: bytes, or a percentage like 40%%")
    p.add_argument("--solver", choices=("gr", "isk"), default="gr")
    p.add_argument("--psmin", type=int, default=None,
                   help="minimum estimated rows per partition")
    p.add_argument("--sample-rate", type=float, default=None,
                   help="tuning sample fraction")
    p.add_argument("--threads", type=int, default=None,
                   help="partition worker count, 0 means all cores")
    p.add_argument("--no-skip", action="store_true",
                   help="disable zone map skipping on base data and views")
    p.add_argument("--no-reuse", action="store_true",
                   help="disable view injection (work sharing only)")
    p.add_argument("--naive-reuse", action="store_true",
                   help="eager view injection with view skipping disabled")
    p.add_argument("--no-partition", action="store_true",
                   help="tune with a single partition")
    p.add_argument("--out", default="starshare-out",
                   help="artifact directory")


def make_config(args) -> EngineConfig:
    cfg = config_from_env(EngineConfig())
    if args.no_reuse and args.naive_reuse:
        raise ConfigError("--no-reuse and --naive-reuse are mutually exclusive")
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.psmin is not None:
        over["ps_min"] = args.psmin
    if args.sample_rate is not None:
        over["sample_rate"] = args.sample_rate
    if args.threads is not None:
        over["threads"] = args.threads
    if args.no_skip:
        over["skip_enabled"] = False
        over["view_skip_enabled"] = False
    if args.no_reuse:
        over["reuse_mode"] = "off"
    if args.naive_reuse:
        over["reuse_mode"] = "eager"
        over["view_skip_enabled"] = False
    if args.no_partition:
        over["partition_enabled"] = False
    return dataclasses.replace(cfg, **over) if over else cfg


def parse_budget(raw: str | None, full_bytes: int) -> int:
    """Bytes, or a percentage of the full-coverage footprint."""
    if raw is None:
        return 1 << 62
    text = raw.strip()
    try:
        if text.endswith("%"):
            pct = float(text[:-1])
            if not 0.0 <= pct <= 100.0:
                raise ValueError
            return int(full_bytes * pct / 100.0)
        val = int(text)
        if val < 0:
            raise ValueError
        return val
    except ValueError:
        raise ConfigError("budget must be nonnegative bytes or 'N%%', got %r"
                          % raw) from None


def load_spec(args, cfg: EngineConfig) -> WorkloadSpec:
    return load_workload(args.workload, cfg.max_queries)


# ---------------------------------------------------------------------------
# artifact formats


def format_results(results: dict[int, object]) -> str:
    """q3:41;q7:2=10|5=31 with queries and groups in ascending order."""
    parts = []
    for qid in sorted(results):
        val = results[qid]
        if isinstance(val, dict):
            body = "|".join("%d=%d" % (g, val[g]) for g in sorted(val))
        else:
            body = "%d" % val
        parts.append("q%d:%s" % (qid, body))
    return ";".join(parts)


def metrics_row(name: str, res, wall_ns: int) -> dict:
    m = res.metrics
    return {"version": METRICS_VERSION, "batch": name, "wall_ns": wall_ns,
            "scan_rows": m.base_rows + m.view_rows,
            "skipped_blocks": m.blocks_skipped,
            "skipped_filters": m.filters_skipped,
            "view_rows": m.view_rows, "base_rows": m.base_rows,
            "miss_rate": round(res.miss_rate, 6),
            "results": format_results(normalize(res.results))}


def write_metrics(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        w.writeheader()
        w.writerows(rows)


def selection_report(graph, selection, tuning, store, budget: int) -> dict:
    cuts = []
    for cut_id in selection.cuts:
        c = graph.cut(cut_id)
        plan = graph.components[c.cid].plan
        cuts.append({
            "cut": c.cut_id,
            "component": c.cid,
            "nodes": sorted(c.nodes),
            "anchor": c.anchor,
            "eliminated": sorted(c.bc),
            "views": [[k[0], list(k[1])] for k in sorted(c.keys)],
            "bytes": graph.budget_of(c.keys),
            "gain": sum(plan.node(n).cost for n in c.bc),
        })
    report = {
        "solver": selection.solver,
        "budget": None if budget >= 1 << 62 else budget,
        "reduction": selection.reduction,
        "bytes": selection.bytes,
        "truncated": selection.truncated,
        "chosen": selection.chosen,
        "partitions": len(store.partitions),
        "cuts": cuts,
    }
    if tuning is not None:
        report["homogeneity"] = {"root": tuning.h_root,
                                 "leaves": tuning.h_leaves,
                                 "samples": tuning.n_samples}
    return report


def tuned_config(cfg: EngineConfig, schema, sort_attrs, boundaries,
                 solver: str, budget: int) -> dict:
    return {
        "version": METRICS_VERSION,
        "engine": dataclasses.asdict(cfg),
        "solver": solver,
        "budget": None if budget >= 1 << 62 else budget,
        "schema_hash": schema.schema_hash(),
        "clustering": {
            "sort_attrs": list(sort_attrs),
            "boundaries": {a: [int(v) for v in b]
                           for a, b in boundaries.items()},
        },
    }


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = make_config(args)
    spec = load_spec(args, cfg)
    db = generate_database(spec.schema, cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, DB_FILE)
    save_database(db, path)
    print("wrote %s: fact %d rows, %d dimensions" %
          (path, db.fact.n_rows, len(spec.schema.dims)))
    return 0


def tune_artifacts(spec: WorkloadSpec, cfg: EngineConfig, solver: str,
                   raw_budget: str | None):
    """Shared by cmd_tune and the oracle's engine check."""
    if not spec.tuning:
        raise ConfigError("workload declares no tuning batch")
    db = generate_database(spec.schema, cfg.seed)
    if cfg.partition_enabled:
        tuning, db, store = tune_storage(db, spec.tuning, cfg)
        tree, sort_attrs, boundaries = \
            tuning.tree, tuning.sort_attrs, tuning.boundaries
    else:
        tuning = None
        sort_attrs, boundaries = derive_clustering(spec.schema, spec.tuning)
        tree = single_leaf_tree()
        db, store = reorganize(db, tree, boundaries, sort_attrs,
                               cfg.block_min_avg)
    graph = build_workload_graph(db, store, spec.tuning, cfg)
    unlimited = solve(graph, 1 << 62, cfg, solver)
    budget = parse_budget(raw_budget, unlimited.bytes)
    selection = unlimited if budget >= unlimited.bytes \
        else solve(graph, budget, cfg, solver)
    views = materialize(db, store, selection, spec.tuning, cfg, budget)
    return db, store, tree, sort_attrs, boundaries, graph, selection, \
        views, tuning, budget


def cmd_tune(args) -> int:
    cfg = make_config(args)
    spec = load_spec(args, cfg)
    db, store, tree, sort_attrs, boundaries, graph, selection, views, \
        tuning, budget = tune_artifacts(spec, cfg, args.solver, args.budget)
    os.makedirs(args.out, exist_ok=True)
    save_database(db, os.path.join(args.out, DB_FILE))
    with open(os.path.join(args.out, TREE_FILE), "w") as fh:
        fh.write(tree.to_text([p.n_rows for p in store.partitions]))
    save_views(views, os.path.join(args.out, VIEWS_FILE))
    with open(os.path.join(args.out, SELECTION_FILE), "w") as fh:
        json.dump(selection_report(graph, selection, tuning, store, budget),
                  fh, indent=2)
        fh.write("\n")
    with open(os.path.join(args.out, CONFIG_FILE), "w") as fh:
        json.dump(tuned_config(cfg, spec.schema, sort_attrs, boundaries,
                               args.solver, budget), fh, indent=2)
        fh.write("\n")
    if args.dump_access_matrix:
        catalog = enumerate_subqueries(spec.tuning)
        rows = sample_rows(db.fact.n_rows, cfg.sample_rate, cfg.seed)
        w = record_access_matrix(db, spec.tuning, catalog, rows)
        with open(os.path.join(args.out, "access_matrix.txt"), "w") as fh:
            fh.write(dump_access_matrix(w))
    print("tuned %s: %d partitions, %d views, %d bytes, reduction %.1f" %
          (args.out, len(store.partitions), len(views.slabs),
           views.total_bytes, selection.reduction))
    return 0


def load_artifacts(spec: WorkloadSpec, out: str):
    """Rebuild the tuned store and views, or None when artifacts are absent."""
    paths = {name: os.path.join(out, name)
             for name in (DB_FILE, TREE_FILE, VIEWS_FILE, CONFIG_FILE)}
    if not all(os.path.exists(p) for p in paths.values()):
        return None
    with open(paths[CONFIG_FILE]) as fh:
        try:
            meta = json.load(fh)
        except ValueError as exc:
            raise DataError("unreadable %s: %s" % (paths[CONFIG_FILE], exc)) \
                from None
    if meta.get("schema_hash") != spec.schema.schema_hash():
        raise DataError("artifacts under %s were tuned for a different schema"
                        % out)
    db = load_database(paths[DB_FILE], spec.schema)
    with open(paths[TREE_FILE]) as fh:
        tree = PartitionTree.from_text(fh.read())
    clustering = meta["clustering"]
    boundaries = {a: np.array(b, dtype=np.int64)
                  for a, b in clustering["boundaries"].items()}
    store = build_fact_store(db.fact, tree, boundaries,
                             list(clustering["sort_attrs"]),
                             int(meta["engine"]["block_min_avg"]))
    views = load_views(paths[VIEWS_FILE])
    return db, store, views


def cmd_run(args) -> int:
    cfg = make_config(args)
    spec = load_spec(args, cfg)
    if not spec.runtime:
        raise ConfigError("workload declares no runtime batch")
    loaded = load_artifacts(spec, args.out)
    if loaded is None:
        print("warning: no artifacts under %s, running work sharing only"
              % args.out, file=sys.stderr)
        db = generate_database(spec.schema, cfg.seed)
        sort_attrs, boundaries = derive_clustering(
            spec.schema, spec.tuning + spec.runtime)
        db, store = reorganize(db, single_leaf_tree(), boundaries, sort_attrs,
                               cfg.block_min_avg)
        views = None
    else:
        db, store, views = loaded
    rows = []
    for b in spec.runtime:
        t0 = time.perf_counter_ns()
        res = execute_batch(db, store, b.queries, cfg, views)
        wall = time.perf_counter_ns() - t0
        rows.append(metrics_row(b.name, res, wall))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, METRICS_FILE)
    write_metrics(path, rows)
    for row in rows:
        print("batch %s: %.1f ms, %d rows scanned, miss %.3f" %
              (row["batch"], row["wall_ns"] / 1e6, row["scan_rows"],
               row["miss_rate"]))
    print("wrote %s" % path)
    return 0


SWEEPS = {
    "filters": bench.sweep_filters,
    "missrate": bench.sweep_missrate,
    "budget": bench.sweep_budget,
    "selectivity": bench.sweep_selectivity,
}


def cmd_bench(args) -> int:
    names = list(SWEEPS) if args.sweep == "all" else [args.sweep]
    kwargs: dict = {}
    if args.rows is not None:
        kwargs["fact_rows"] = args.rows
    if args.queries is not None:
        kwargs["n_queries"] = args.queries
    if args.repeats is not None:
        kwargs["repeats"] = args.repeats
    rows: list[dict] = []
    for name in names:
        rows.extend(SWEEPS[name](**kwargs))
    for row in rows:
        row["version"] = METRICS_VERSION
    fields = ["version"]
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "bench.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, restval="")
        w.writeheader()
        w.writerows(rows)
    print("wrote %s: %d cells over %s" % (path, len(rows), ", ".join(names)))
    return 0


def cmd_calibrate(args) -> int:
    kwargs: dict = {}
    if args.rows is not None:
        kwargs["fact_rows"] = args.rows
    if args.repeats is not None:
        kwargs["repeats"] = args.repeats
    fit = bench.calibrate(**kwargs)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "calibration.json")
    with open(path, "w") as fh:
        json.dump(fit, fh, indent=2)
        fh.write("\n")
    consts = fit["constants"]
    print("wrote %s: %s" %
          (path, " ".join("%s=%.2f" % (k, consts[k]) for k in sorted(consts))))
    return 0


def cmd_oracle(args) -> int:
    cfg = make_config(args)
    spec = load_spec(args, cfg)
    db = generate_database(spec.schema, cfg.seed)
    batches = spec.tuning + spec.runtime
    if not batches:
        raise ConfigError("workload declares no batch")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "oracle.csv")
    expected = {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch", "results"])
        for b in batches:
            expected[b.name] = normalize(run_batch(db, b.queries))
            w.writerow([b.name, format_results(expected[b.name])])
    print("wrote %s: %d batches" % (path, len(batches)))
    if args.verify:
        tuned = tune_artifacts(spec, cfg, args.solver, args.budget)
        tdb, store, views = tuned[0], tuned[1], tuned[7]
        for b in batches:
            res = execute_batch(tdb, store, b.queries, cfg, views)
            lines = diff_results(expected[b.name], normalize(res.results))
            if lines:
                raise InternalError("engine diverges from the oracle on "
                                    "batch %s: %s" % (b.name, "; ".join(lines)))
        print("verify: engine matches the oracle on %d batches" % len(batches))
    if args.exhaustive:
        ex_db = generate_database(spec.schema, cfg.seed)
        sort_attrs, boundaries = derive_clustering(spec.schema, batches)
        ex_db, store = reorganize(ex_db, single_leaf_tree(), boundaries,
                                  sort_attrs, cfg.block_min_avg)
        graph = build_workload_graph(ex_db, store, batches, cfg)
        if len(graph.cuts) > EXHAUSTIVE_CUT_LIMIT:
            raise ConfigError(
                "exhaustive check wants at most %d cuts, workload has %d"
                % (EXHAUSTIVE_CUT_LIMIT, len(graph.cuts)))
        budget = parse_budget(args.budget, solve(graph, 1 << 62, cfg).bytes)
        best = solve_exhaustive(graph, budget)
        for solver in ("gr", "isk"):
            got = solve(graph, budget, cfg, solver)
            if got.reduction > best.reduction + 1e-9:
                raise InternalError(
                    "%s beat the exhaustive optimum: %.3f > %.3f"
                    % (solver, got.reduction, best.reduction))
            print("exhaustive: %s reduction %.3f vs optimum %.3f" %
                  (solver, got.reduction, best.reduction))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="starshare",
        description="shared execution of query batches over a star schema; "
                    "config fields also read %s* environment overrides"
                    % ENV_PREFIX)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the workload's database")
    add_common(p, workload=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("tune", help="partition, pick cuts, materialize views")
    add_common(p, workload=True)
    p.add_argument("--dump-access-matrix", action="store_true",
                   help="also write the sampled row/subquery matrix")
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("run", help="execute runtime batches, emit metrics")
    add_common(p, workload=True)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("bench", help="experiment sweeps, one CSV line per cell")
    add_common(p, workload=False)
    p.add_argument("--sweep", choices=sorted(SWEEPS) + ["all"],
                   default="all")
    p.add_argument("--rows", type=int, default=None,
                   help="fact rows per sweep cell")
    p.add_argument("--queries", type=int, default=None,
                   help="queries per batch")
    p.add_argument("--repeats", type=int, default=None,
                   help="timing repeats per cell")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("calibrate", help="fit per-tuple cost constants")
    add_common(p, workload=False)
    p.add_argument("--rows", type=int, default=None)
    p.add_argument("--repeats", type=int, default=None)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("oracle", help="reference results and solver checks")
    add_common(p, workload=True)
    p.add_argument("--verify", action="store_true",
                   help="tune and execute, then compare against the oracle")
    p.add_argument("--exhaustive", action="store_true",
                   help="compare gr and isk against the exhaustive optimum")
    p.set_defaults(fn=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except StarshareError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
