"""Shared global plans.

One plan serves a whole batch: a fact scan feeds shared range filters, those
feed a trie of shared dimension probes (common join prefixes merged under one
global join order), and per-query aggregates sit on top.  Tuples carry
query-set bit vectors; an operator only exists once no matter how many
queries need it.

After a reuse rewrite a plan can have several sources: the base scan and any
number of view scans, each feeding the surviving part of its subtree.
"""

from __future__ import annotations

import dataclasses

from .config import EngineConfig
from .errors import InternalError
from .queryset import iter_bits, to_hex, words_for
from .storage import Schema
from .workload import Query

SCAN = "scan"
FILTER = "filter"
PROBE = "probe"
AGG = "agg"
VIEWSCAN = "viewscan"


@dataclasses.dataclass
class PlanNode:
    nid: int
    kind: str
    query_set: int
    table_set: frozenset[int] = frozenset()
    inputs: tuple[int, ...] = ()
    attr: str | None = None          # filter: fact attribute
    dim: int | None = None           # probe: dimension index
    query: int | None = None         # agg: query id
    view_key: tuple | None = None    # viewscan: (partition id, sorted table set)
    amb_preds: int = 1               # filter: ambivalent predicate count
    rf_count: int = 0                # viewscan: runtime filters on the view
    view_rows: int = 0               # viewscan: stored rows in this partition
    card: float = 0.0                # estimated input cardinality
    cost: float = 0.0                # estimated cost
    subquery: int | None = None      # tuning catalog id, when known

    def describe(self) -> str:
        if self.kind == FILTER:
            return "filter %s" % self.attr
        if self.kind == PROBE:
            return "probe d%d" % self.dim
        if self.kind == AGG:
            return "agg q%d" % self.query
        if self.kind == VIEWSCAN:
            return "viewscan p%s t%s" % (self.view_key[0], list(self.view_key[1]))
        return self.kind


class GlobalPlan:
    def __init__(self, nodes: list[PlanNode]):
        self.nodes: dict[int, PlanNode] = {n.nid: n for n in nodes}
        if len(self.nodes) != len(nodes):
            raise InternalError("duplicate plan node ids")
        self._consumers: dict[int, list[int]] = {nid: [] for nid in self.nodes}
        for n in nodes:
            for i in n.inputs:
                self._consumers[i].append(n.nid)
        for lst in self._consumers.values():
            lst.sort()

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, nid: int) -> PlanNode:
        return self.nodes[nid]

    def consumers(self, nid: int) -> list[int]:
        return self._consumers[nid]

    def sources(self) -> list[PlanNode]:
        return [n for n in self.topological() if not n.inputs]

    def topological(self) -> list[PlanNode]:
        # id order when producers sit below consumers, which construction
        # guarantees; rewrites may add sources with fresh high ids
        order: list[int] = []
        seen: set[int] = set()

        def visit(nid: int) -> None:
            if nid in seen:
                return
            seen.add(nid)
            for i in self.nodes[nid].inputs:
                visit(i)
            order.append(nid)

        for k in sorted(self.nodes):
            visit(k)
        return [self.nodes[n] for n in order]

    def probe_count(self) -> int:
        return sum(1 for n in self.nodes.values() if n.kind == PROBE)

    def replace(self, nodes: list[PlanNode]) -> "GlobalPlan":
        return GlobalPlan(nodes)


def build_global_plan(schema: Schema, queries: list[Query], alive: int | None = None) -> GlobalPlan:
    """Shared plan for the queries whose bit is set in *alive* (all, if None).

    Join order: dimensions sorted by how many live queries join them
    (descending), ties by ascending dimension index.  Shared fact filters sit
    below all probes; maximal common probe prefixes are merged.
    """
    if alive is None:
        alive = (1 << len(queries)) - 1
    live = [q for q in queries if (alive >> q.qid) & 1]
    if not live:
        return GlobalPlan([])
    alive_mask = 0
    for q in live:
        alive_mask |= 1 << q.qid

    join_counts: dict[int, int] = {}
    for q in live:
        for d in q.joins:
            join_counts[d] = join_counts.get(d, 0) + 1
    join_rank = {d: (-c, d) for d, c in join_counts.items()}

    filter_attrs = []
    for attr in schema.filter_cols + schema.measure_cols + schema.group_cols:
        if any(p.attr == attr for q in live for p in q.fact_filters(schema)):
            filter_attrs.append(attr)
    for d in schema.dims:
        if any(p.attr == d.fk_column for q in live for p in q.fact_filters(schema)):
            filter_attrs.append(d.fk_column)

    nodes: list[PlanNode] = []
    nodes.append(PlanNode(0, SCAN, alive_mask))
    tail = 0
    for attr in filter_attrs:
        nid = len(nodes)
        nodes.append(PlanNode(nid, FILTER, alive_mask, frozenset(), (tail,), attr=attr))
        tail = nid

    # probe trie: child lookup by (parent node, dimension)
    trie: dict[tuple[int, int], int] = {}
    agg_parent: dict[int, int] = {}
    for q in sorted(live, key=lambda q: q.qid):
        at = tail
        for d in sorted(q.joins, key=lambda d: join_rank[d]):
            key = (at, d)
            nid = trie.get(key)
            if nid is None:
                nid = len(nodes)
                parent = nodes[at]
                nodes.append(PlanNode(nid, PROBE, 0, parent.table_set | {d}, (at,), dim=d))
                trie[key] = nid
            nodes[nid].query_set |= 1 << q.qid
            at = nid
        agg_parent[q.qid] = at
    for q in sorted(live, key=lambda q: q.qid):
        nid = len(nodes)
        parent = nodes[agg_parent[q.qid]]
        nodes.append(PlanNode(nid, AGG, 1 << q.qid, parent.table_set, (parent.nid,), query=q.qid))
    return GlobalPlan(nodes)


# ---------------------------------------------------------------------------
# cost model


@dataclasses.dataclass
class CostModel:
    c_scan: float = 1.0
    c_filter: float = 2.0
    c_probe: float = 10.0
    c_agg: float = 2.0
    c_view_filter: float = 139.45
    filter_cost_exponent: float = 1.0

    @classmethod
    def from_config(cls, cfg: EngineConfig) -> "CostModel":
        return cls(cfg.c_scan, cfg.c_filter, cfg.c_probe, cfg.c_agg,
                   cfg.c_view_filter, cfg.filter_cost_exponent)

    def node_cost(self, node: PlanNode) -> float:
        if node.kind == SCAN:
            return self.c_scan * node.card
        if node.kind == FILTER:
            return self.c_filter * node.card * (max(node.amb_preds, 1) ** self.filter_cost_exponent)
        if node.kind == PROBE:
            return self.c_probe * node.card
        if node.kind == AGG:
            return self.c_agg * node.card
        if node.kind == VIEWSCAN:
            return self.c_view_filter * node.rf_count * node.view_rows
        raise InternalError("unknown node kind %r" % node.kind)


@dataclasses.dataclass
class PlanStats:
    """Partition-local inputs for cardinality estimation.

    scan_rows: rows in blocks that at least one live query survives.
    filter_retention: per fact attribute, estimated fraction of scanned rows
      that keep at least one live bit after the shared filter (zone-map
      interpolation; 1.0 when some live query has no predicate there).
    filter_amb: per fact attribute, distinct ambivalent predicate count.
    probe_density: per dimension, fraction of dimension entries satisfying
      each live query's dimension filters, by query id.
    """
    scan_rows: float
    filter_retention: dict[str, float]
    filter_amb: dict[str, int]
    probe_density: dict[int, dict[int, float]]


def annotate_costs(plan: GlobalPlan, model: CostModel, stats: PlanStats | None = None,
                   cards: dict[int, float] | None = None) -> float:
    """Fill per-node cardinality and cost; returns the plan total.

    Either explicit per-node input cardinalities are given, or they are
    propagated source-to-sink from PlanStats.
    """
    out_card: dict[int, float] = {}
    total = 0.0
    for node in plan.topological():
        if cards is not None:
            node.card = float(cards.get(node.nid, 0.0))
        elif node.kind in (SCAN, VIEWSCAN):
            node.card = float(stats.scan_rows if node.kind == SCAN else node.view_rows)
        else:
            node.card = out_card[node.inputs[0]]
        retained = node.card
        if stats is not None and cards is None:
            if node.kind == FILTER:
                node.amb_preds = stats.filter_amb.get(node.attr, 1)
                retained = node.card * stats.filter_retention.get(node.attr, 1.0)
            elif node.kind == PROBE:
                dens = stats.probe_density.get(node.dim, {})
                union = sum(dens.get(q, 1.0) for q in iter_bits(node.query_set))
                retained = node.card * min(1.0, union)
        out_card[node.nid] = retained
        node.cost = model.node_cost(node)
        total += node.cost
    return total


def plan_cost(plan: GlobalPlan) -> float:
    return sum(n.cost for n in plan.nodes.values())


# ---------------------------------------------------------------------------
# dump


def dump_plan(plan: GlobalPlan, n_queries: int) -> str:
    """Topologically ordered text form, query sets in hex; for goldens."""
    nw = words_for(n_queries)
    lines = ["plan v1"]
    for n in plan.topological():
        ins = ",".join(str(i) for i in n.inputs) or "-"
        lines.append("%d %s qs=%s in=%s card=%.1f cost=%.1f"
                     % (n.nid, n.describe(), to_hex(n.query_set, nw), ins, n.card, n.cost))
    return "\n".join(lines) + "\n"
