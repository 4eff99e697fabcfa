"""Materialization tuning: what to precompute, within a byte budget.

The tuner replays the tuning batches against the partitioned store and builds
one plan component per (batch, partition) that survives data skipping.  Cuts
of those components describe groups of join subexpressions that, stored as
views, let the executor drop every operator between the cut and its anchor.
Cut selection maximizes the total eliminated cost under a storage budget; two
solvers are provided, a plain greedy and an iterative prefix-and-ratio search.

Views are identified by (partition id, joined dimension set).  The same view
serves every batch, so byte costs are charged once per key no matter how many
cuts mention it.
"""

from __future__ import annotations

import dataclasses
import io
import itertools
import math
import struct

import numpy as np

from .config import EngineConfig
from .engine import build_dimension_state
from .errors import DataError, InternalError
from .plan import AGG, PROBE, SCAN, CostModel, GlobalPlan, PlanStats, annotate_costs, build_global_plan
from .queryset import words_for
from .storage import (ColumnarTable, Database, FactStore, build_zone_maps,
                      cluster_rows, read_table, write_table)
from .workload import Batch, SubqueryCatalog, enumerate_subqueries

VALUE_BYTES = 8
VIEW_MAGIC = b"SSVW"
VIEW_VERSION = 1


def view_key(pid: int, tables) -> tuple:
    return (pid, tuple(sorted(tables)))


def view_columns(schema, batches: list[Batch], tables) -> list[str]:
    """Columns a view for *tables* must store to answer every consuming query.

    Dimension attributes appear as "dim.attr"; remaining foreign keys stay so
    deeper joins can still run on top of the view.
    """
    tset = frozenset(tables)
    cols: set[str] = set()
    for b in batches:
        for q in b.queries:
            if not tset <= q.joins:
                continue
            cols.add(q.agg_col)
            if q.group_col is not None:
                cols.add(q.group_col)
            for p in q.fact_filters(schema):
                cols.add(p.attr)
            for di in sorted(q.joins - tset):
                cols.add(schema.dims[di].fk_column)
            for di in sorted(tset):
                dname = schema.dims[di].name
                for p in q.dim_filters(dname):
                    cols.add(dname + "." + p.attr)
    if not cols:
        raise InternalError("view %s has no consuming query" % sorted(tset))
    return sorted(cols)


# ---------------------------------------------------------------------------
# historical workload graph


@dataclasses.dataclass
class Component:
    """One tuning batch restricted to one partition, as a costed shared plan."""
    cid: int
    pid: int
    batch: str
    plan: GlobalPlan
    node_key: dict[int, tuple]      # probe nid -> view key


@dataclasses.dataclass(frozen=True)
class Cut:
    cut_id: int
    cid: int
    nodes: tuple[int, ...]          # antichain of probe nids
    anchor: int                     # minimal anchor nid
    bc: frozenset[int]              # eliminated nids, cut and anchor inclusive
    keys: frozenset                 # view keys the cut materializes


class WorkloadGraph:
    """Components, their cuts, and per-view byte budgets for one tuning run."""

    def __init__(self, components: list[Component], cuts: list[Cut],
                 budgets: dict[tuple, int], truncated: bool):
        self.components = components
        self.cuts = cuts
        self.budgets = budgets
        self.truncated = truncated
        self._by_id = {c.cut_id: c for c in cuts}

    def cut(self, cut_id: int) -> Cut:
        return self._by_id[cut_id]

    def domain(self, cut_ids) -> frozenset:
        keys: set = set()
        for i in cut_ids:
            keys |= self._by_id[i].keys
        return frozenset(keys)

    def budget_of(self, keys) -> int:
        return sum(self.budgets[k] for k in keys)

    def enrichment(self, keys) -> list[int]:
        keyset = frozenset(keys)
        return [c.cut_id for c in self.cuts if c.keys <= keyset]

    def reduction(self, cut_ids) -> float:
        per_cid: dict[int, set] = {}
        for i in cut_ids:
            c = self._by_id[i]
            per_cid.setdefault(c.cid, set()).update(c.bc)
        total = 0.0
        for cid, nids in per_cid.items():
            plan = self.components[cid].plan
            total += sum(plan.node(n).cost for n in nids)
        return total

    def eliminated(self, cut_ids) -> dict[int, frozenset]:
        per_cid: dict[int, set] = {}
        for i in cut_ids:
            c = self._by_id[i]
            per_cid.setdefault(c.cid, set()).update(c.bc)
        return {cid: frozenset(v) for cid, v in per_cid.items()}

    def reduced_nodes(self, cut_ids) -> dict[int, list[int]]:
        """Surviving nids per component after removing every covered operator."""
        gone = self.eliminated(cut_ids)
        out = {}
        for comp in self.components:
            dead = gone.get(comp.cid, frozenset())
            out[comp.cid] = [n.nid for n in comp.plan.topological() if n.nid not in dead]
        return out


def partition_envelope(part) -> dict[str, tuple[int, int]]:
    env = {}
    for attr, mins in part.zone_min.items():
        if len(mins) == 0:
            continue
        env[attr] = (int(mins.min()), int(part.zone_max[attr].max()))
    return env


def _query_alive(schema, q, env) -> bool:
    for p in q.fact_filters(schema):
        if p.hi <= p.lo:
            return False
        bounds = env.get(p.attr)
        if bounds is None:
            continue
        mn, mx = bounds
        if mx < p.lo or mn >= p.hi:
            return False
    return True


def _partition_stats(schema, queries, alive: int, env, n_rows: int,
                     density: dict[int, dict[int, float]]) -> PlanStats:
    retention: dict[str, float] = {}
    amb: dict[str, int] = {}
    attrs = {p.attr for i, q in enumerate(queries) if alive >> i & 1
             for p in q.fact_filters(schema)}
    for attr in attrs:
        mn, mx = env.get(attr, (0, 0))
        width = max(1, mx - mn + 1)
        total = 0.0
        open_query = False
        ranges = set()
        for i, q in enumerate(queries):
            if not alive >> i & 1:
                continue
            preds = [p for p in q.fact_filters(schema) if p.attr == attr]
            if not preds:
                open_query = True
                continue
            lo = max(p.lo for p in preds)
            hi = min(p.hi for p in preds)
            total += max(0, min(hi, mx + 1) - max(lo, mn)) / width
            if not (lo <= mn and mx < hi):
                ranges.add((lo, hi))
        retention[attr] = 1.0 if open_query else min(1.0, total)
        amb[attr] = len(ranges)
    return PlanStats(scan_rows=float(n_rows), filter_retention=retention,
                     filter_amb=amb, probe_density=density)


def build_workload_graph(db: Database, store: FactStore, batches: list[Batch],
                         cfg: EngineConfig, catalog: SubqueryCatalog | None = None,
                         model: CostModel | None = None) -> WorkloadGraph:
    if catalog is None:
        catalog = enumerate_subqueries(batches)
    if model is None:
        model = CostModel.from_config(cfg)
    n_words = words_for(cfg.max_queries)
    schema = db.schema
    components: list[Component] = []
    cuts: list[Cut] = []
    budgets: dict[tuple, int] = {}
    truncated = False
    for b in batches:
        density = build_dimension_state(db, b.queries, n_words).density
        for part in store.partitions:
            if part.n_rows == 0:
                continue
            env = partition_envelope(part)
            alive = 0
            for i, q in enumerate(b.queries):
                if _query_alive(schema, q, env):
                    alive |= 1 << i
            if not alive:
                continue
            plan = build_global_plan(schema, b.queries, alive)
            stats = _partition_stats(schema, b.queries, alive, env, part.n_rows, density)
            annotate_costs(plan, model, stats)
            node_key = {}
            for node in plan.nodes.values():
                if node.kind == PROBE:
                    node.subquery = catalog.sid(b.name, node.table_set)
                    key = view_key(part.pid, node.table_set)
                    node_key[node.nid] = key
                    if key not in budgets:
                        ncols = len(view_columns(schema, batches, key[1]))
                        budgets[key] = part.n_rows * VALUE_BYTES * ncols
            comp = Component(len(components), part.pid, b.name, plan, node_key)
            components.append(comp)
            new_cuts, trunc = enumerate_component_cuts(comp, cfg, len(cuts))
            cuts.extend(new_cuts)
            truncated = truncated or trunc
    return WorkloadGraph(components, cuts, budgets, truncated)


# ---------------------------------------------------------------------------
# cut enumeration


def enumerate_component_cuts(comp: Component, cfg: EngineConfig,
                             next_id: int) -> tuple[list[Cut], bool]:
    """All antichains of probe nodes that cover some subtree, capped.

    The per-node recursion yields, for node n, every capped-width antichain of
    materializable nodes such that each aggregate under n sits under exactly
    one antichain member.  Anchors and BC sets use the minimal anchor.
    """
    plan = comp.plan
    parent = {n.nid: (n.inputs[0] if n.inputs else None) for n in plan.nodes.values()}
    children = {nid: plan.consumers(nid) for nid in plan.nodes}
    aggs_below: dict[int, frozenset] = {}
    for node in reversed(plan.topological()):
        nid = node.nid
        if node.kind == AGG:
            aggs_below[nid] = frozenset((nid,))
        else:
            acc: set = set()
            for k in children[nid]:
                acc |= aggs_below[k]
            aggs_below[nid] = frozenset(acc)
    cap = cfg.antichain_cap
    limit = cfg.component_cut_cap
    truncated = False
    memo: dict[int, list[tuple[int, ...]]] = {}

    def covers(nid: int) -> list[tuple[int, ...]]:
        got = memo.get(nid)
        if got is not None:
            return got
        node = plan.node(nid)
        out: list[tuple[int, ...]] = []
        if node.kind == PROBE:
            out.append((nid,))
        if node.kind != AGG and children[nid]:
            parts = [covers(k) for k in children[nid]]
            if all(parts):
                combos: list[tuple[int, ...]] = [()]
                for options in parts:
                    nxt = []
                    for base in combos:
                        for opt in options:
                            if len(base) + len(opt) <= cap:
                                nxt.append(base + opt)
                    if len(nxt) > limit:
                        nonlocal truncated
                        truncated = True
                        nxt = nxt[:limit]
                    combos = nxt
                for c in combos:
                    if c:
                        out.append(tuple(sorted(c)))
        memo[nid] = out
        return out

    def minimal_anchor(nodes: tuple[int, ...]) -> int:
        chains = []
        for v in nodes:
            path = []
            cur: int | None = v
            while cur is not None:
                path.append(cur)
                cur = parent[cur]
            chains.append(path)
        common = set(chains[0])
        for path in chains[1:]:
            common &= set(path)
        a = next(n for n in chains[0] if n in common)
        covered = frozenset().union(*(aggs_below[v] for v in nodes))
        while parent[a] is not None and aggs_below[parent[a]] <= covered:
            a = parent[a]
        return a

    seen: set[frozenset] = set()
    cuts: list[Cut] = []
    for start in plan.topological():
        for nodes in covers(start.nid):
            fs = frozenset(nodes)
            if fs in seen:
                continue
            seen.add(fs)
            if len(cuts) >= limit:
                truncated = True
                break
            anchor = minimal_anchor(nodes)
            bc: set[int] = set()
            for v in nodes:
                cur: int | None = v
                while cur != anchor:
                    bc.add(cur)
                    cur = parent[cur]
                    if cur is None:
                        raise InternalError("anchor %d unreachable from %d" % (anchor, v))
                bc.add(anchor)
            keys = frozenset(comp.node_key[v] for v in nodes)
            cuts.append(Cut(next_id + len(cuts), comp.cid, nodes, anchor,
                            frozenset(bc), keys))
        if len(cuts) >= limit:
            break
    return cuts, truncated


def eliminated_by_domain(comp: Component, keys) -> frozenset:
    """Fixpoint elimination: a node dies when it produces a stored view or
    when it has successors and all of them are dead.  Used as an oracle for
    the enrichment identity and at execution time for full-partition checks."""
    keyset = frozenset(keys)
    children = {nid: comp.plan.consumers(nid) for nid in comp.plan.nodes}
    dead: set[int] = set()
    changed = True
    while changed:
        changed = False
        for nid in comp.plan.nodes:
            if nid in dead:
                continue
            if comp.node_key.get(nid) in keyset:
                dead.add(nid)
                changed = True
            elif children[nid] and all(k in dead for k in children[nid]):
                dead.add(nid)
                changed = True
    return frozenset(dead)


# ---------------------------------------------------------------------------
# cut selection


@dataclasses.dataclass
class CutSelection:
    solver: str
    chosen: list[int]               # picks in solver order, pre enrichment
    cuts: list[int]                 # enriched closure, ascending cut id
    domain: list[tuple]             # view keys, sorted
    reduction: float
    bytes: int
    truncated: bool


class _SelState:
    """Incremental R̄/B̄ bookkeeping for one growing selection."""

    __slots__ = ("graph", "ids", "keys", "bytes", "elim", "total")

    def __init__(self, graph: WorkloadGraph):
        self.graph = graph
        self.ids: set[int] = set()
        self.keys: set = set()
        self.bytes = 0
        self.elim: dict[int, set] = {}
        self.total = 0.0

    def copy(self) -> "_SelState":
        other = _SelState.__new__(_SelState)
        other.graph = self.graph
        other.ids = set(self.ids)
        other.keys = set(self.keys)
        other.bytes = self.bytes
        other.elim = {cid: set(v) for cid, v in self.elim.items()}
        other.total = self.total
        return other

    def extra_bytes(self, cut: Cut) -> int:
        return sum(self.graph.budgets[k] for k in cut.keys if k not in self.keys)

    def gain_of(self, cut: Cut) -> float:
        have = self.elim.get(cut.cid)
        plan = self.graph.components[cut.cid].plan
        if have is None:
            return sum(plan.node(n).cost for n in cut.bc)
        return sum(plan.node(n).cost for n in cut.bc if n not in have)

    def add(self, cut: Cut) -> None:
        self.ids.add(cut.cut_id)
        self.total += self.gain_of(cut)
        self.bytes += self.extra_bytes(cut)
        self.keys |= cut.keys
        self.elim.setdefault(cut.cid, set()).update(cut.bc)


def _finish(graph: WorkloadGraph, chosen: list[int], solver: str) -> CutSelection:
    keys = graph.domain(chosen)
    enriched = graph.enrichment(keys)
    return CutSelection(solver=solver, chosen=chosen, cuts=enriched,
                        domain=sorted(keys), reduction=graph.reduction(enriched),
                        bytes=graph.budget_of(keys), truncated=graph.truncated)


def solve_gr(graph: WorkloadGraph, budget: int) -> CutSelection:
    """Greedy by absolute marginal reduction, then enrichment."""
    st = _SelState(graph)
    chosen: list[int] = []
    while True:
        best = None
        best_gain = 0.0
        for cut in graph.cuts:
            if cut.cut_id in st.ids:
                continue
            if st.bytes + st.extra_bytes(cut) > budget:
                continue
            gain = st.gain_of(cut)
            if gain > best_gain:
                best = cut
                best_gain = gain
        if best is None:
            break
        st.add(best)
        chosen.append(best.cut_id)
    return _finish(graph, chosen, "gr")


def _ratio_extend(st: _SelState, pool: list[Cut], budget: int) -> None:
    while True:
        best = None
        best_ratio = 0.0
        for cut in pool:
            if cut.cut_id in st.ids:
                continue
            extra = st.extra_bytes(cut)
            if st.bytes + extra > budget:
                continue
            gain = st.gain_of(cut)
            if gain <= 0.0:
                continue
            ratio = math.inf if extra == 0 else gain / extra
            if ratio > best_ratio:
                best = cut
                best_ratio = ratio
        if best is None:
            return
        st.add(best)


def solve_isk(graph: WorkloadGraph, budget: int, cfg: EngineConfig) -> CutSelection:
    """Fixed-point search: every small prefix on top of the running core is
    extended greedily by reduction-per-byte; the best candidate becomes the
    next core.  Large instances trim the prefix pool by standalone ratio."""
    pool = list(graph.cuts)
    if len(pool) > cfg.isk_candidate_cap:
        def standalone(cut: Cut):
            plan = graph.components[cut.cid].plan
            gain = sum(plan.node(n).cost for n in cut.bc)
            size = graph.budget_of(cut.keys)
            return (-(gain / size if size else math.inf), cut.cut_id)
        pool = sorted(pool, key=standalone)[:cfg.isk_candidate_cap]
        pool.sort(key=lambda c: c.cut_id)
    core: list[int] = []
    core_state = _SelState(graph)
    for _ in range(cfg.isk_iteration_cap):
        best_state = None
        best_order: list[int] = []
        for size in range(cfg.isk_prefix_size + 1):
            for prefix in itertools.combinations([c for c in pool if c.cut_id not in core_state.ids], size):
                st = core_state.copy()
                feasible = True
                for cut in prefix:
                    if st.bytes + st.extra_bytes(cut) > budget:
                        feasible = False
                        break
                    st.add(cut)
                if not feasible:
                    continue
                _ratio_extend(st, pool, budget)
                if best_state is None or st.total > best_state.total:
                    best_state = st
                    best_order = core + sorted(st.ids - core_state.ids)
        if best_state is None or best_state.ids == core_state.ids:
            break
        core_state = best_state
        core = best_order
    return _finish(graph, core, "isk")


def solve(graph: WorkloadGraph, budget: int, cfg: EngineConfig,
          solver: str = "gr") -> CutSelection:
    if solver == "gr":
        return solve_gr(graph, budget)
    if solver == "isk":
        return solve_isk(graph, budget, cfg)
    raise DataError("unknown solver %r" % solver)


def gr_bound(graph: WorkloadGraph, budget: int) -> float:
    """Guaranteed fraction of the optimal reduction for the greedy solver.

    K is the largest feasible selection size, k the smallest feasible size
    that no single cut can extend within budget.  Exhaustive; only meant for
    small instances.
    """
    n = len(graph.cuts)
    ids = [c.cut_id for c in graph.cuts]
    k_max = 0
    k_min = None
    for r in range(n + 1):
        for combo in itertools.combinations(ids, r):
            if graph.budget_of(graph.domain(combo)) > budget:
                continue
            k_max = max(k_max, r)
            saturated = True
            chosen = set(combo)
            for j in ids:
                if j in chosen:
                    continue
                if graph.budget_of(graph.domain(combo + (j,))) <= budget:
                    saturated = False
                    break
            if saturated and (k_min is None or r < k_min):
                k_min = r
    if k_max == 0 or not k_min:
        return 0.0
    return 1.0 - ((k_max - 1) / k_max) ** k_min


def solve_exhaustive(graph: WorkloadGraph, budget: int) -> CutSelection:
    """Reference optimum by subset enumeration; exponential, test-sized only."""
    ids = [c.cut_id for c in graph.cuts]
    best: tuple[float, list[int]] = (0.0, [])
    for r in range(len(ids) + 1):
        for combo in itertools.combinations(ids, r):
            if graph.budget_of(graph.domain(combo)) > budget:
                continue
            red = graph.reduction(combo)
            if red > best[0]:
                best = (red, list(combo))
    return _finish(graph, best[1], "exhaustive")


# ---------------------------------------------------------------------------
# physical views


@dataclasses.dataclass
class ViewSlab:
    key: tuple
    columns: dict[str, np.ndarray]
    block_starts: np.ndarray
    block_ends: np.ndarray
    zone_min: dict[str, np.ndarray]
    zone_max: dict[str, np.ndarray]

    @property
    def n_rows(self) -> int:
        cols = next(iter(self.columns.values()), None)
        return 0 if cols is None else len(cols)

    @property
    def n_blocks(self) -> int:
        return len(self.block_starts)


class ViewStore:
    def __init__(self):
        self.slabs: dict[tuple, ViewSlab] = {}

    def __contains__(self, key) -> bool:
        return key in self.slabs

    def get(self, key) -> ViewSlab | None:
        return self.slabs.get(key)

    @property
    def total_bytes(self) -> int:
        return sum(s.n_rows * VALUE_BYTES * len(s.columns) for s in self.slabs.values())

    def keys(self) -> list[tuple]:
        return sorted(self.slabs)


def _view_clustering(schema, batches: list[Batch], tables, stored: list[str]):
    """Sort keys and bucket edges for one view, most filtered column first."""
    tset = frozenset(tables)
    counts: dict[str, int] = {}
    edges: dict[str, set] = {}
    for b in batches:
        for q in b.queries:
            if not tset <= q.joins:
                continue
            for p in q.fact_filters(schema):
                if p.attr in stored:
                    counts[p.attr] = counts.get(p.attr, 0) + 1
                    edges.setdefault(p.attr, set()).update((p.lo, p.hi))
            for di in sorted(tset):
                dname = schema.dims[di].name
                for p in q.dim_filters(dname):
                    col = dname + "." + p.attr
                    if col in stored:
                        counts[col] = counts.get(col, 0) + 1
                        edges.setdefault(col, set()).update((p.lo, p.hi))
    attrs = sorted(counts, key=lambda a: (-counts[a], a))
    boundaries = {a: np.array(sorted(edges[a]), dtype=np.int64) for a in attrs}
    return attrs, boundaries


def materialize(db: Database, store: FactStore, selection: CutSelection,
                batches: list[Batch], cfg: EngineConfig,
                budget: int | None = None) -> ViewStore:
    """Build the physical slabs for every view key in the selection's domain.

    Each slab holds the partition's rows joined down to the view's dimension
    attributes, re-clustered on its own most-filtered columns, with tight
    zone maps for view-side skipping.
    """
    schema = db.schema
    parts = {p.pid: p for p in store.partitions}
    views = ViewStore()
    for key in selection.domain:
        pid, tables = key
        part = parts.get(pid)
        if part is None:
            raise InternalError("selection names unknown partition %d" % pid)
        stored = view_columns(schema, batches, tables)
        lo, hi = part.start, part.end
        values: dict[str, np.ndarray] = {}
        for col in stored:
            if "." in col:
                dname, attr = col.split(".", 1)
                fk = db.fact.column("fk_" + dname)[lo:hi]
                values[col] = db.dim(dname).column(attr)[fk]
            else:
                values[col] = db.fact.column(col)[lo:hi]
        attrs, boundaries = _view_clustering(schema, batches, tables, stored)
        order, spans = cluster_rows(values, attrs, boundaries, cfg.block_min_avg, hi - lo)
        columns = {c: np.ascontiguousarray(v[order]) for c, v in values.items()}
        starts = np.array([s for s, _ in spans], dtype=np.int64)
        ends = np.array([e for _, e in spans], dtype=np.int64)
        zmin, zmax = build_zone_maps(columns, starts, list(columns))
        views.slabs[key] = ViewSlab(key, columns, starts, ends, zmin, zmax)
    actual = views.total_bytes
    if budget is not None and actual > budget * cfg.budget_slack:
        raise InternalError("materialized %d bytes exceeds budget %d beyond slack"
                            % (actual, budget))
    return views


def save_views(views: ViewStore, path: str) -> None:
    buf = io.BytesIO()
    buf.write(VIEW_MAGIC)
    buf.write(struct.pack("<II", VIEW_VERSION, len(views.slabs)))
    for key in views.keys():
        slab = views.slabs[key]
        pid, tables = key
        buf.write(struct.pack("<II", pid, len(tables)))
        for t in tables:
            buf.write(struct.pack("<I", t))
        buf.write(struct.pack("<I", slab.n_blocks))
        buf.write(slab.block_starts.astype("<i8").tobytes())
        buf.write(slab.block_ends.astype("<i8").tobytes())
        write_table(buf, ColumnarTable("view", slab.columns))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_views(path: str) -> ViewStore:
    views = ViewStore()
    with open(path, "rb") as fh:
        if fh.read(4) != VIEW_MAGIC:
            raise DataError("%s is not a view snapshot (bad magic)" % path)
        version, n_slabs = struct.unpack("<II", fh.read(8))
        if version != VIEW_VERSION:
            raise DataError("view snapshot version %d unsupported" % version)
        for _ in range(n_slabs):
            pid, n_tables = struct.unpack("<II", fh.read(8))
            tables = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(n_tables))
            (n_blocks,) = struct.unpack("<I", fh.read(4))
            starts = np.frombuffer(fh.read(8 * n_blocks), dtype="<i8").astype(np.int64)
            ends = np.frombuffer(fh.read(8 * n_blocks), dtype="<i8").astype(np.int64)
            table = read_table(fh)
            zmin, zmax = build_zone_maps(table.columns, starts, list(table.columns))
            key = (pid, tables)
            views.slabs[key] = ViewSlab(key, table.columns, starts, ends, zmin, zmax)
    return views
