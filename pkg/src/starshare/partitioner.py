"""Workload-driven fact table partitioning.

The tuner samples fact rows, records which join subexpressions of the tuning
batches each sampled row can feed (fact-filter eligibility times subquery
weight), and greedily splits the table at predicate endpoints while the
split's size-weighted homogeneity beats the parent's by the configured
factor.  Homogeneity of a row set is realized access weight over the best
case where every touching subquery touches every row, so 1.0 means the
partition is accessed as one indivisible unit.

The same predicate endpoints drive the second level: inside a partition rows
are clustered by bucket codes of the most-filtered attributes, which is what
makes block zone maps tight.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .config import EngineConfig
from .storage import (
    Database, FactStore, PartitionTree, TreeLeaf, TreeSplit, reorganize,
    single_leaf_tree,
)
from .workload import (
    Batch, SubqueryCatalog, enumerate_subqueries, record_access_matrix,
    sample_rows,
)


def homogeneity(w: np.ndarray, rows: np.ndarray | None = None) -> float:
    """Access weight realized by the row set over the weight of its active
    subqueries.  At most |rows|, with equality exactly when every active
    subquery touches every row.  Untouched row sets score their size.

    Column weights are constant where nonzero, so per-column maxima recover
    them.
    """
    sub = w if rows is None else w[rows]
    n = sub.shape[0]
    if n == 0:
        return 0.0
    col = sub.sum(axis=0, dtype=np.int64)
    active = col > 0
    if not active.any():
        return float(n)
    weights = sub.max(axis=0).astype(np.int64)
    return float(col.sum()) / float(int(weights[active].sum()))


def candidate_cuts(schema, batches: list[Batch]) -> dict[str, list[int]]:
    """Fact predicate endpoints per attribute; eligibility only changes there."""
    cand: dict[str, set[int]] = {}
    for b in batches:
        for q in b.queries:
            for p in q.fact_filters(schema):
                s = cand.setdefault(p.attr, set())
                s.add(p.lo)
                s.add(p.hi)
    return {a: sorted(v) for a, v in sorted(cand.items())}


def derive_clustering(schema, batches: list[Batch]) -> tuple[list[str], dict[str, np.ndarray]]:
    """Second-level sort attributes (most filtered first) and bucket edges."""
    counts: dict[str, int] = {}
    for b in batches:
        for q in b.queries:
            for p in q.fact_filters(schema):
                counts[p.attr] = counts.get(p.attr, 0) + 1
    order = {a: i for i, a in enumerate(schema.fact_columns())}
    attrs = sorted(counts, key=lambda a: (-counts[a], order[a]))
    cuts = candidate_cuts(schema, batches)
    boundaries = {a: np.array(cuts[a], dtype=np.int64) for a in attrs}
    return attrs, boundaries


@dataclasses.dataclass
class CutStats:
    attr: str
    value: int
    score: float            # homogeneity(left) + homogeneity(right)
    parent_score: float     # homogeneity of the split row set


@dataclasses.dataclass
class TuningResult:
    tree: PartitionTree
    sort_attrs: list[str]
    boundaries: dict[str, np.ndarray]
    h_root: float           # homogeneity per sampled row, in (0, 1]
    h_leaves: float         # summed leaf homogeneity per sampled row
    n_samples: int
    n_subqueries: int
    applied_cuts: list[CutStats]


def _column_score(colsum: np.ndarray, n: int, weights: np.ndarray) -> float:
    active = colsum > 0
    if n == 0:
        return 0.0
    if not active.any():
        return float(n)
    return float(colsum.sum()) / float(int(weights[active].sum()))


def fit_partition_tree(db: Database, batches: list[Batch], cfg: EngineConfig,
                       catalog: SubqueryCatalog | None = None) -> TuningResult:
    """Greedy first-level tree plus the derived second-level clustering."""
    schema = db.schema
    sort_attrs, boundaries = derive_clustering(schema, batches)
    if not batches:
        return TuningResult(single_leaf_tree(), sort_attrs, boundaries,
                            1.0, 1.0, 0, 0, [])
    rows = sample_rows(db.fact.n_rows, cfg.sample_rate, cfg.seed)
    if catalog is None:
        catalog = enumerate_subqueries(batches)
    w = record_access_matrix(db, batches, catalog, rows)
    weights = np.array([e.weight for e in catalog.entries], dtype=np.int64)
    h_root = homogeneity(w) / max(len(rows), 1)
    cand = candidate_cuts(schema, batches)
    # a side is viable when its extrapolated full-table size reaches ps_min
    min_count = cfg.ps_min * len(rows) / max(db.fact.n_rows, 1)

    if not cfg.partition_enabled or not cand:
        return TuningResult(single_leaf_tree(), sort_attrs, boundaries,
                            h_root, h_root, len(rows), len(catalog), [])

    cols = {a: db.fact.column(a)[rows] for a in cand}
    applied: list[CutStats] = []

    def best_cut(idx: np.ndarray):
        if len(idx) == 0:
            return None
        best = None
        for attr, cuts in cand.items():
            vals = cols[attr][idx]
            order = np.argsort(vals, kind="stable")
            csum = w[idx[order]].astype(np.int64).cumsum(axis=0)
            total = csum[-1]
            edges = np.searchsorted(vals[order], np.array(cuts), side="left")
            for ci, v in enumerate(cuts):
                nl = int(edges[ci])
                nr = len(idx) - nl
                if nl < min_count or nr < min_count:
                    continue
                left_sum = csum[nl - 1]
                score = (_column_score(left_sum, nl, weights)
                         + _column_score(total - left_sum, nr, weights))
                if best is None or score > best[0]:
                    best = (score, attr, int(v), nl)
        return best

    def build(idx: np.ndarray):
        h = homogeneity(w, idx)
        found = best_cut(idx)
        if found is None or found[0] <= h * cfg.improvement_factor:
            return TreeLeaf()
        score, attr, value, _ = found
        applied.append(CutStats(attr, value, score, h))
        goes_left = cols[attr][idx] < value
        return TreeSplit(attr, value, build(idx[goes_left]), build(idx[~goes_left]))

    tree = PartitionTree(build(np.arange(len(rows))))
    leaf_ids = tree.route(cols, len(rows))
    h_leaves = 0.0
    for leaf in range(tree.n_leaves):
        members = np.nonzero(leaf_ids == leaf)[0]
        h_leaves += homogeneity(w, members)
    h_leaves = h_leaves / len(rows) if len(rows) else 1.0
    return TuningResult(tree, sort_attrs, boundaries, h_root, h_leaves,
                        len(rows), len(catalog), applied)


def tune_storage(db: Database, batches: list[Batch],
                 cfg: EngineConfig) -> tuple[TuningResult, Database, FactStore]:
    """Fit the tree, then physically reorganize the fact table along it."""
    result = fit_partition_tree(db, batches, cfg)
    db2, store = reorganize(db, result.tree, result.boundaries,
                            result.sort_attrs, cfg.block_min_avg)
    return result, db2, store
