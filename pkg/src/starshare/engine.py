"""Vectorized execution of shared plans.

Tuples flow through the plan as (row index, query-set words) pairs in fixed
size vectors.  A probe is one gather into the prebuilt dimension table plus a
bitwise AND; a shared filter is one searchsorted against the batch's
predicate boundaries plus a gather into per-range keep sets.  Rows whose
query set goes empty are dropped on the spot.  Aggregate inputs are buffered
per plan node and reduced once per partition.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import InternalError
from .plan import AGG, FILTER, PROBE, SCAN, VIEWSCAN, GlobalPlan
from .queryset import bit_rows, mask_to_words, nonzero_rows
from .storage import Database
from .workload import Query


# ---------------------------------------------------------------------------
# dimension state (phase one of a batch)


@dataclasses.dataclass
class DimensionState:
    entry_qs: dict[int, np.ndarray]      # dim index -> (rows, n_words) uint64
    density: dict[int, dict[int, float]]  # dim index -> query id -> bit density


def build_dimension_state(db: Database, queries: list[Query], n_words: int,
                          alive: int | None = None) -> DimensionState:
    """Per-dimension direct-address tables keyed by the dense primary key.

    Each entry holds the query set of live queries that join the dimension
    and whose dimension predicates the entry satisfies.  Probing is then a
    gather plus AND, which also applies every dimension filter of the batch
    in the same step.
    """
    schema = db.schema
    if alive is None:
        alive = (1 << len(queries)) - 1
    entry_qs: dict[int, np.ndarray] = {}
    density: dict[int, dict[int, float]] = {}
    for di, d in enumerate(schema.dims):
        joined = [q for q in queries if di in q.joins and (alive >> q.qid) & 1]
        if not joined:
            continue
        table = db.dim(d.name)
        qs = np.zeros((d.rows, n_words), dtype=np.uint64)
        dens: dict[int, float] = {}
        plain: dict[int, int] = {}          # word -> combined unfiltered bits
        for q in joined:
            word, bit = divmod(q.qid, 64)
            mask = None
            for p in q.dim_filters(d.name):
                col = table.column(p.attr)
                hit = (col >= p.lo) & (col < p.hi)
                mask = hit if mask is None else (mask & hit)
            if mask is None:
                plain[word] = plain.get(word, 0) | (1 << bit)
                dens[q.qid] = 1.0 if d.rows else 0.0
            else:
                qs[mask, word] |= np.uint64(1 << bit)
                dens[q.qid] = float(mask.mean()) if d.rows else 0.0
        for word, bits in plain.items():
            qs[:, word] |= np.uint64(bits)
        entry_qs[di] = qs
        density[di] = dens
    return DimensionState(entry_qs, density)


# ---------------------------------------------------------------------------
# shared filter index


class FilterIndex:
    """Predicate-index style shared filters for one source.

    For every filtered column the batch's predicate endpoints cut the value
    domain into ranges; each range precomputes the set of queries whose
    conjunction on that column fully covers it (queries without a predicate
    on the column keep their bit everywhere).  Applying the filter to a
    vector is a searchsorted plus a gather plus an AND.
    """

    def __init__(self, n_queries: int, n_words: int):
        self.n_queries = n_queries
        self.n_words = n_words
        self.boundaries: dict[str, np.ndarray] = {}
        self.keep: dict[str, np.ndarray] = {}
        self.preds: dict[str, list[tuple[int, int, int]]] = {}  # key -> (qid, lo, hi)

    @classmethod
    def build(cls, queries: list[Query], keyed_preds: dict[str, list[tuple[int, int, int]]],
              n_queries: int, n_words: int) -> "FilterIndex":
        idx = cls(n_queries, n_words)
        all_bits = (1 << n_queries) - 1
        for key, preds in keyed_preds.items():
            ends = sorted({v for _, lo, hi in preds for v in (lo, hi)})
            bnd = np.array(ends, dtype=np.int64)
            n_ranges = len(ends) + 1
            masks = [all_bits] * n_ranges
            by_query: dict[int, list[tuple[int, int]]] = {}
            for qid, lo, hi in preds:
                by_query.setdefault(qid, []).append((lo, hi))
            for qid, ranges in by_query.items():
                bit = 1 << qid
                allowed = None
                for lo, hi in ranges:
                    s = int(np.searchsorted(bnd, lo, side="right"))
                    e = int(np.searchsorted(bnd, hi, side="left"))
                    span = set(range(s, e + 1))
                    allowed = span if allowed is None else (allowed & span)
                for r in range(n_ranges):
                    if r not in allowed:
                        masks[r] &= ~bit
            table = np.zeros((n_ranges, n_words), dtype=np.uint64)
            for r, m in enumerate(masks):
                table[r] = mask_to_words(m, n_words)
            idx.boundaries[key] = bnd
            idx.keep[key] = table
            idx.preds[key] = sorted(preds)
        return idx

    def apply(self, key: str, values: np.ndarray, qs: np.ndarray) -> np.ndarray:
        ranges = np.searchsorted(self.boundaries[key], values, side="right")
        return qs & self.keep[key][ranges]

    def keys(self) -> list[str]:
        return sorted(self.boundaries)


def fact_filter_index(schema, queries: list[Query], n_queries: int, n_words: int) -> FilterIndex:
    keyed: dict[str, list[tuple[int, int, int]]] = {}
    for q in queries:
        for p in q.fact_filters(schema):
            keyed.setdefault(p.attr, []).append((q.qid, p.lo, p.hi))
    return FilterIndex.build(queries, keyed, n_queries, n_words)


# ---------------------------------------------------------------------------
# sources


@dataclasses.dataclass
class SourceBlocks:
    """One scannable source: the base partition slice or a view slab."""

    label: str
    columns: dict[str, np.ndarray]     # local arrays, offset 0 at first block
    block_starts: np.ndarray
    block_ends: np.ndarray
    block_alive: list[int]             # per-block surviving query masks
    amb: dict[str, np.ndarray]         # filter key -> per-block ambivalence flags
    filter_index: FilterIndex
    is_view: bool = False

    @property
    def n_blocks(self) -> int:
        return len(self.block_starts)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise InternalError("source %s has no column %r" % (self.label, name)) from None


@dataclasses.dataclass
class ExecMetrics:
    base_rows: int = 0
    view_rows: int = 0
    miss_rows: int = 0                  # base rows some query had to read
    blocks_skipped: int = 0
    filters_applied: int = 0
    filters_skipped: int = 0
    vectors: int = 0
    views_used: int = 0

    def merge(self, other: "ExecMetrics") -> None:
        self.base_rows += other.base_rows
        self.view_rows += other.view_rows
        self.miss_rows += other.miss_rows
        self.blocks_skipped += other.blocks_skipped
        self.filters_applied += other.filters_applied
        self.filters_skipped += other.filters_skipped
        self.vectors += other.vectors
        self.views_used += other.views_used


def merge_partials(into: dict, part: dict) -> None:
    for qid, val in part.items():
        if isinstance(val, dict):
            slot = into.setdefault(qid, {})
            for g, v in val.items():
                slot[g] = slot.get(g, 0) + v
        else:
            into[qid] = into.get(qid, 0) + val


def _group_sum(groups: np.ndarray, meas: np.ndarray) -> dict[int, int]:
    # bincount with float64 weights is exact here: values fit in 31 bits and
    # row counts stay far below 2**22, keeping sums inside the 2**53 window
    if len(groups) == 0:
        return {}
    size = int(groups.max()) + 1
    sums = np.bincount(groups, weights=meas.astype(np.float64), minlength=size)
    present = np.unique(groups)
    return {int(g): int(sums[g]) for g in present}


# ---------------------------------------------------------------------------
# plan interpreter


def execute_plan(plan: GlobalPlan, queries: list[Query],
                 base: SourceBlocks | None,
                 views: dict[tuple, SourceBlocks],
                 dim_state: DimensionState,
                 vector_size: int, uncovered: int = 0) -> tuple[dict, ExecMetrics]:
    """Run one partition's plan over its sources; returns per-query partials.

    Partials are plain ints for ungrouped queries and {group: sum} dicts for
    grouped ones; only queries that kept at least one row appear.  Base rows
    read on behalf of a query in *uncovered*, which no available view could
    have served, count as miss rows.
    """
    metrics = ExecMetrics()
    partials: dict[int, object] = {}
    by_qid = {q.qid: q for q in queries}

    agg_parents: dict[int, list[int]] = {}
    for node in plan.topological():
        if node.kind == AGG:
            agg_parents.setdefault(node.inputs[0], []).append(node.nid)

    for source_node in plan.sources():
        if source_node.kind == SCAN:
            src = base
            if src is None:
                raise InternalError("plan has a scan but no base source was given")
        elif source_node.kind == VIEWSCAN:
            src = views.get(source_node.view_key)
            if src is None:
                raise InternalError(
                    "plan wants view %s for %s but it is not materialized"
                    % (source_node.view_key, source_node.describe()))
            metrics.views_used += 1
        else:
            raise InternalError("source node of kind %r" % source_node.kind)

        buffers: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {
            nid: [] for nid in agg_parents}
        fidx = src.filter_index

        def push(node, sel, qs, block, alive):
            if node.nid in agg_parents:
                buffers[node.nid].append((sel, qs))
            for cid in plan.consumers(node.nid):
                child = plan.node(cid)
                if child.kind == AGG:
                    continue
                if child.query_set & alive == 0:
                    continue
                if child.kind == FILTER:
                    flags = src.amb.get(child.attr)
                    if flags is None or not flags[block]:
                        metrics.filters_skipped += 1
                        push(child, sel, qs, block, alive)
                        continue
                    metrics.filters_applied += 1
                    nqs = fidx.apply(child.attr, src.column(child.attr)[sel], qs)
                elif child.kind == PROBE:
                    table = dim_state.entry_qs.get(child.dim)
                    if table is None:
                        continue
                    fk = src.column("fk_d%d" % child.dim)[sel]
                    nqs = qs & table[fk]
                else:
                    raise InternalError("unexpected %s below a source" % child.kind)
                keep = nonzero_rows(nqs)
                if not keep.all():
                    nsel, nqs = sel[keep], nqs[keep]
                else:
                    nsel = sel
                if len(nsel):
                    push(child, nsel, nqs, block, alive)

        for b in range(src.n_blocks):
            alive = src.block_alive[b] & source_node.query_set
            if alive == 0:
                metrics.blocks_skipped += 1
                continue
            words = mask_to_words(alive, fidx.n_words)
            start, end = int(src.block_starts[b]), int(src.block_ends[b])
            if src.is_view:
                metrics.view_rows += end - start
            else:
                metrics.base_rows += end - start
                if alive & uncovered:
                    metrics.miss_rows += end - start
            for vs in range(start, end, vector_size):
                ve = min(vs + vector_size, end)
                metrics.vectors += 1
                sel = np.arange(vs, ve, dtype=np.int64)
                qs = np.broadcast_to(words, (ve - vs, fidx.n_words)).copy()
                if src.is_view:
                    # views fold their runtime filters into the scan itself
                    for key in fidx.keys():
                        flags = src.amb.get(key)
                        if flags is None or not flags[b]:
                            metrics.filters_skipped += 1
                            continue
                        metrics.filters_applied += 1
                        qs = fidx.apply(key, src.column(key)[sel], qs)
                    keep = nonzero_rows(qs)
                    if not keep.all():
                        sel, qs = sel[keep], qs[keep]
                    if len(sel) == 0:
                        continue
                push(source_node, sel, qs, b, alive)

        # reduce buffered aggregate inputs once per source
        for nid, chunks in buffers.items():
            if not chunks:
                continue
            consumers = [plan.node(c) for c in agg_parents[nid]]
            sel = np.concatenate([c[0] for c in chunks])
            qs = np.concatenate([c[1] for c in chunks])
            for agg in consumers:
                q = by_qid[agg.query]
                hit = bit_rows(qs, q.qid)
                rows = sel[hit]
                if len(rows) == 0:
                    continue
                meas = src.column(q.agg_col)[rows].astype(np.int64)
                if q.group_col is None:
                    partials[q.qid] = partials.get(q.qid, 0) + int(meas.sum())
                else:
                    groups = src.column(q.group_col)[rows]
                    merge_partials(partials, {q.qid: _group_sum(groups, meas)})
    return partials, metrics
