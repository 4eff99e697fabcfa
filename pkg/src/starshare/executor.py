"""Batch runtime: skipping analysis, reuse rewriting, partitioned execution.

A batch runs in two phases.  Phase one builds state shared by every
partition: dimension bit tables and the predicate index for the fact table.
Phase two walks the partitions; each one gets a skipping analysis, a shared
baseline plan for its surviving queries, an optimal rewrite against the
available views, and a vectorized execution whose partials merge into the
final per-query results.
"""

from __future__ import annotations

import dataclasses
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import EngineConfig
from .engine import (ExecMetrics, FilterIndex, SourceBlocks,
                     build_dimension_state, execute_plan, fact_filter_index,
                     merge_partials)
from .errors import ConfigError, DataError, InternalError
from .materializer import (ViewStore, _partition_stats, partition_envelope, view_key)
from .plan import (PROBE, SCAN, VIEWSCAN, CostModel, GlobalPlan, PlanNode,
                   annotate_costs, build_global_plan, plan_cost)
from .queryset import mask_to_words, words_for
from .storage import Database, FactStore, classify_blocks
from .workload import Query


# ---------------------------------------------------------------------------
# skipping analysis


@dataclasses.dataclass
class SkipAnalysis:
    """Survivor masks and filter ambivalence for one partition's sources."""
    pid: int
    alive: int                          # union of per-block query masks
    base: SourceBlocks
    views: dict[tuple, SourceBlocks]
    rf: dict[tuple, int]                # view key -> runtime filter count
    sizes: dict[tuple, int]             # view key -> stored rows
    covered: int = 0                    # queries some view could serve


def _source_masks(preds: dict[str, list[tuple[int, int, int]]], zone_min, zone_max,
                  n_blocks: int, eligible: int, skip: bool):
    """Per-block alive masks plus per-key ambivalence flags.

    A query loses a block when any of its predicates is always false there; a
    key needs runtime filtering on a block when some surviving query's
    predicate is ambivalent.  With skipping off everything stays alive and
    every predicate is treated as ambivalent.
    """
    amb = {key: np.ones(n_blocks, dtype=bool) for key in preds}
    if not skip:
        return [eligible] * n_blocks, amb
    # the word space must cover every qid the predicate list writes, not
    # just the eligible ones; a query dead on arrival still has entries
    top = max((qid for plist in preds.values() for qid, _, _ in plist),
              default=0)
    n_words = max(1, (eligible.bit_length() + 63) // 64, top // 64 + 1)
    alive = np.tile(mask_to_words(eligible, n_words), (n_blocks, 1))
    amb_by_query: dict[str, dict[int, np.ndarray]] = {}
    for key, plist in preds.items():
        for qid, lo, hi in plist:
            mins = zone_min.get(key)
            if mins is None:
                continue
            af, at = classify_blocks(lo, hi, mins, zone_max[key])
            word, bit = divmod(qid, 64)
            alive[af, word] &= np.uint64(((1 << 64) - 1) ^ (1 << bit))
            slot = amb_by_query.setdefault(key, {})
            cur = ~af & ~at
            slot[qid] = slot.get(qid, np.zeros(n_blocks, dtype=bool)) | cur
    for key in preds:
        if zone_min.get(key) is None:
            continue
        flags = np.zeros(n_blocks, dtype=bool)
        for qid, ambq in amb_by_query.get(key, {}).items():
            word, bit = divmod(qid, 64)
            still = (alive[:, word] & np.uint64(1 << bit)) != 0
            flags |= ambq & still
        amb[key] = flags
    masks = []
    for b in range(n_blocks):
        m = 0
        for w in range(n_words):
            m |= int(alive[b, w]) << (64 * w)
        masks.append(m)
    return masks, amb


def view_filter_index(schema, queries: list[Query], tables, n_queries: int,
                      n_words: int) -> FilterIndex:
    """Runtime filters a view must apply: the consuming queries' fact
    predicates plus their predicates on the folded-in dimensions."""
    tset = frozenset(tables)
    keyed: dict[str, list[tuple[int, int, int]]] = {}
    for q in queries:
        if not tset <= q.joins:
            continue
        for p in q.fact_filters(schema):
            keyed.setdefault(p.attr, []).append((q.qid, p.lo, p.hi))
        for di in sorted(tset):
            dname = schema.dims[di].name
            for p in q.dim_filters(dname):
                keyed.setdefault(dname + "." + p.attr, []).append((q.qid, p.lo, p.hi))
    return FilterIndex.build(queries, keyed, n_queries, n_words)


def analyze_partition(store: FactStore, part, queries: list[Query], fidx: FilterIndex,
                      vfidx: dict[tuple, FilterIndex], views: ViewStore | None,
                      cfg: EngineConfig) -> SkipAnalysis:
    all_bits = (1 << len(queries)) - 1
    base_alive, base_amb = _source_masks(
        fidx.preds, part.zone_min, part.zone_max, part.n_blocks, all_bits,
        cfg.skip_enabled)
    base = SourceBlocks("p%d" % part.pid, store.table.columns, part.block_starts,
                        part.block_ends, base_alive, base_amb, fidx)
    alive = 0
    for m in base_alive:
        alive |= m
    vsources: dict[tuple, SourceBlocks] = {}
    rf: dict[tuple, int] = {}
    sizes: dict[tuple, int] = {}
    covered = 0
    if views is not None and cfg.reuse_mode != "off":
        for key, slab in views.slabs.items():
            if key[0] != part.pid:
                continue
            if slab.n_rows != part.n_rows:
                raise DataError("view %s holds %d rows but partition %d holds %d"
                                % (key, slab.n_rows, part.pid, part.n_rows))
            idx = vfidx[key[1]]
            consuming = 0
            for q in queries:
                if frozenset(key[1]) <= q.joins:
                    consuming |= 1 << q.qid
            covered |= consuming
            v_alive, v_amb = _source_masks(
                idx.preds, slab.zone_min, slab.zone_max, slab.n_blocks,
                consuming & alive, cfg.view_skip_enabled)
            vsources[key] = SourceBlocks("view%s" % (key,), slab.columns,
                                         slab.block_starts, slab.block_ends,
                                         v_alive, v_amb, idx, is_view=True)
            rf[key] = sum(1 for key2 in idx.preds if v_amb[key2].any())
            sizes[key] = slab.n_rows
    return SkipAnalysis(part.pid, alive, base, vsources, rf, sizes, covered)


# ---------------------------------------------------------------------------
# reuse phase


@dataclasses.dataclass
class RewriteResult:
    plan: GlobalPlan
    rewrites: dict[int, tuple]          # baseline probe nid -> view key
    baseline_cost: float
    cost: float


def reuse_phase(baseline: GlobalPlan, pid: int, analysis: SkipAnalysis,
                cfg: EngineConfig, model: CostModel) -> RewriteResult:
    """Optimal view injection over one partition's baseline plan.

    Post-order from the scan; each node merges the pending cuts of the
    successors that still need it, considers its own materialization, and
    rewrites as soon as the benefit is nonnegative.  Eliminated nodes between
    a cut and its anchor disappear; the cut's nodes become view scans.
    """
    base_cost = plan_cost(baseline)
    if cfg.reuse_mode == "off" or not analysis.views:
        return RewriteResult(baseline, {}, base_cost, base_cost)
    eager = cfg.reuse_mode == "eager"
    parent = {n.nid: (n.inputs[0] if n.inputs else None) for n in baseline.topological()}
    key_of = {n.nid: view_key(pid, n.table_set) for n in baseline.topological()
              if n.kind == PROBE}

    def overhead(key: tuple) -> float:
        return model.c_view_filter * analysis.rf[key] * analysis.sizes[key]

    def benefit(cut: frozenset, anchor: int) -> float:
        bc: set[int] = set()
        for v in cut:
            cur: int | None = v
            while cur != anchor:
                bc.add(cur)
                cur = parent[cur]
            bc.add(anchor)
        gain = sum(baseline.node(n).cost for n in bc)
        return gain - sum(overhead(key_of[v]) for v in cut)

    best_plan: dict[int, set[int]] = {}
    best_cut: dict[int, frozenset | None] = {}
    rewrites: dict[int, tuple] = {}

    def rec(v: int) -> None:
        succ = baseline.consumers(v)
        bp: set[int] = set()
        bc: frozenset | None = frozenset() if succ else None
        at_least_one = not succ
        for s in succ:
            rec(s)
            bp |= best_plan[s]
            if s in best_plan[s]:
                at_least_one = True
                if bc is not None:
                    bc = None if best_cut[s] is None else bc | best_cut[s]
        if at_least_one:
            bp.add(v)
            key = key_of.get(v)
            if key is not None and key in analysis.views:
                mine = frozenset((v,))
                if bc is None or (not eager and benefit(bc, v) < benefit(mine, v)):
                    bc = mine
            if bc is not None and (eager or benefit(bc, v) >= 0):
                removed: set[int] = set()
                for c in bc:
                    cur: int | None = c
                    while cur != v:
                        removed.add(cur)
                        cur = parent[cur]
                    removed.add(v)
                    rewrites[c] = key_of[c]
                bp -= removed
                bc = None
        best_plan[v] = bp
        best_cut[v] = bc

    roots = baseline.sources()
    if len(roots) != 1 or roots[0].kind != SCAN:
        raise InternalError("baseline plan must have a single scan source")
    rec(roots[0].nid)
    survivors = best_plan[roots[0].nid]

    nodes: list[PlanNode] = []
    next_id = max(baseline.nodes) + 1
    scan_ids: dict[int, int] = {}
    for c in sorted(rewrites):
        key = rewrites[c]
        origin = baseline.node(c)
        vs = PlanNode(next_id, VIEWSCAN, origin.query_set, origin.table_set,
                      view_key=key, rf_count=analysis.rf[key],
                      view_rows=analysis.sizes[key])
        vs.card = float(vs.view_rows)
        vs.cost = model.node_cost(vs)
        scan_ids[c] = next_id
        next_id += 1
        nodes.append(vs)
    for n in baseline.topological():
        if n.nid not in survivors:
            continue
        kept = dataclasses.replace(n)
        if kept.inputs:
            src = kept.inputs[0]
            if src in scan_ids:
                kept.inputs = (scan_ids[src],)
            elif src not in survivors:
                raise InternalError("node %d lost its input %d" % (n.nid, src))
        nodes.append(kept)
    plan = GlobalPlan(nodes)
    return RewriteResult(plan, rewrites, base_cost, plan_cost(plan))


# ---------------------------------------------------------------------------
# batch execution


@dataclasses.dataclass
class PartitionRun:
    pid: int
    alive: int
    rewrite: RewriteResult


@dataclasses.dataclass
class BatchResult:
    results: dict[int, object]
    metrics: ExecMetrics
    runs: list[PartitionRun]
    timings: dict[str, float]

    @property
    def miss_rate(self) -> float:
        seen = self.metrics.base_rows + self.metrics.view_rows
        return self.metrics.miss_rows / seen if seen else 0.0


def execute_batch(db: Database, store: FactStore, queries: list[Query],
                  cfg: EngineConfig, views: ViewStore | None = None,
                  model: CostModel | None = None) -> BatchResult:
    t0 = time.perf_counter()
    if len(queries) > cfg.max_queries:
        raise ConfigError("batch has %d queries, config allows %d"
                          % (len(queries), cfg.max_queries))
    metrics = ExecMetrics()
    if not queries:
        return BatchResult({}, metrics, [], {"phase1": 0.0, "phase2": 0.0})
    if model is None:
        model = CostModel.from_config(cfg)
    schema = db.schema
    n_queries = len(queries)
    n_words = words_for(cfg.max_queries)
    dim_state = build_dimension_state(db, queries, n_words)
    fidx = fact_filter_index(schema, queries, n_queries, n_words)
    vfidx: dict[tuple, FilterIndex] = {}
    if views is not None and cfg.reuse_mode != "off":
        for key in views.keys():
            if key[1] not in vfidx:
                vfidx[key[1]] = view_filter_index(schema, queries, key[1],
                                                  n_queries, n_words)
    t1 = time.perf_counter()

    def run_partition(part):
        part_metrics = ExecMetrics()
        analysis = analyze_partition(store, part, queries, fidx, vfidx, views, cfg)
        if analysis.alive == 0:
            part_metrics.blocks_skipped += part.n_blocks
            return None, part_metrics, None
        baseline = build_global_plan(schema, queries, analysis.alive)
        env = partition_envelope(part)
        stats = _partition_stats(schema, queries, analysis.alive, env,
                                 part.n_rows, dim_state.density)
        annotate_costs(baseline, model, stats)
        rewrite = reuse_phase(baseline, part.pid, analysis, cfg, model)
        uncovered = ((1 << len(queries)) - 1) & ~analysis.covered
        partials, exec_metrics = execute_plan(
            rewrite.plan, queries, analysis.base, analysis.views, dim_state,
            cfg.vector_size, uncovered)
        part_metrics.merge(exec_metrics)
        return partials, part_metrics, PartitionRun(part.pid, analysis.alive, rewrite)

    parts = [p for p in store.partitions if p.n_rows]
    workers = cfg.worker_count(max(1, len(parts)))
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_partition, parts))
    else:
        outcomes = [run_partition(p) for p in parts]

    results: dict[int, object] = {}
    runs: list[PartitionRun] = []
    for partials, part_metrics, run in outcomes:
        metrics.merge(part_metrics)
        if partials:
            merge_partials(results, partials)
        if run is not None:
            runs.append(run)
    t2 = time.perf_counter()
    timings = {"phase1": t1 - t0, "phase2": t2 - t1}
    return BatchResult(results, metrics, runs, timings)
