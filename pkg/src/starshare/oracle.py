"""Reference evaluators used by the test suite.

Everything in here trades speed for obviousness: queries run one at a time
with no sharing, no pruning and no clustering, straight over the generated
arrays.  The engine is checked for exact equality against these.
"""

from __future__ import annotations

import itertools

import numpy as np

from .storage import Database
from .workload import Query


def run_query(db: Database, q: Query) -> object:
    """Evaluate one query naively; int for plain sums, {group: sum} otherwise."""
    schema = db.schema
    fact = db.fact
    mask = np.ones(fact.n_rows, dtype=bool)
    for p in q.fact_filters(schema):
        col = fact.column(p.attr)
        mask &= (col >= p.lo) & (col < p.hi)
    for di in sorted(q.joins):
        d = schema.dims[di]
        dmask = np.ones(d.rows, dtype=bool)
        for p in q.dim_filters(d.name):
            col = db.dim(d.name).column(p.attr)
            dmask &= (col >= p.lo) & (col < p.hi)
        fk = fact.column(d.fk_column)
        mask &= dmask[fk]
    meas = fact.column(q.agg_col)[mask].astype(np.int64)
    if q.group_col is None:
        return int(meas.sum())
    groups = fact.column(q.group_col)[mask]
    out: dict[int, int] = {}
    for g in np.unique(groups):
        out[int(g)] = int(meas[groups == g].sum())
    return out


def run_batch(db: Database, queries: list[Query]) -> dict[int, object]:
    return {q.qid: run_query(db, q) for q in queries}


def results_equal(a: object, b: object) -> bool:
    if isinstance(a, dict) != isinstance(b, dict):
        return False
    if isinstance(a, dict):
        return {int(k): int(v) for k, v in a.items()} == \
               {int(k): int(v) for k, v in b.items()}
    return int(a) == int(b)


def diff_results(want: dict, got: dict) -> list[str]:
    """Human-readable mismatch lines; empty means equal."""
    lines = []
    for qid in sorted(set(want) | set(got)):
        w, g = want.get(qid), got.get(qid)
        if w is None:
            lines.append("q%d: unexpected result %r" % (qid, g))
        elif g is None:
            lines.append("q%d: missing (want %r)" % (qid, w))
        elif not results_equal(w, g):
            lines.append("q%d: want %r got %r" % (qid, w, g))
    return lines


def normalize(results: dict[int, object]) -> dict[int, object]:
    """Drop zero sums and empty groups so naive and engine output compare."""
    out: dict[int, object] = {}
    for qid, val in results.items():
        if isinstance(val, dict):
            if val:
                out[qid] = {int(k): int(v) for k, v in val.items()}
        elif int(val) != 0:
            out[qid] = int(val)
    return out


def exhaustive_subsets(items: list, max_size: int | None = None):
    n = len(items) if max_size is None else min(len(items), max_size)
    for k in range(n + 1):
        yield from itertools.combinations(items, k)
