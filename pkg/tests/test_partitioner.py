import numpy as np
import pytest

from starshare.config import EngineConfig
from starshare.partitioner import (
    candidate_cuts, derive_clustering, fit_partition_tree, homogeneity,
    tune_storage,
)
from starshare.storage import ColumnarTable, Database, generate_database
from starshare.workload import (
    Batch, Predicate, Query, enumerate_subqueries, record_access_matrix,
    sample_rows,
)

from conftest import small_schema


def q(qid, joins, filters=(), agg="m0", group=None):
    return Query(qid, "t", frozenset(joins), tuple(filters), agg, group)


def fp(attr, lo, hi):
    return Predicate("sales", attr, lo, hi)


def handmade_db(f0, schema=None, f1=None):
    """Database with chosen f0 values; everything else is filler."""
    schema = schema or small_schema(fact_rows=len(f0), n_dims=2, dim_rows=10)
    n = len(f0)
    cols = {}
    for d in schema.dims:
        cols[d.fk_column] = np.zeros(n, dtype=np.int32)
    cols["f0"] = np.array(f0, dtype=np.int32)
    cols["f1"] = np.array(f1, dtype=np.int32) if f1 is not None else np.zeros(n, dtype=np.int32)
    cols["m0"] = np.ones(n, dtype=np.int32)
    cols["g0"] = np.zeros(n, dtype=np.int32)
    dims = {d.name: ColumnarTable(d.name, {a: np.zeros(d.rows, dtype=np.int32)
                                           for a in d.attrs}) for d in schema.dims}
    return Database(schema, ColumnarTable(schema.fact_name, cols), dims)


def cfg(**kw):
    kw.setdefault("sample_rate", 1.0)
    kw.setdefault("ps_min", 1)
    return EngineConfig(**kw)


# ---------------------------------------------------------------------------
# homogeneity, frozen by hand


def test_homogeneity_uniform_reaches_row_count():
    w = np.array([[2, 2], [2, 2]], dtype=np.int16)
    assert homogeneity(w) == pytest.approx(2.0)


def test_homogeneity_disjoint_halves():
    # realized weight 8 over active weight 4: half of the 4-row maximum
    w = np.array([[2, 0], [2, 0], [0, 2], [0, 2]], dtype=np.int16)
    assert homogeneity(w) == pytest.approx(2.0)
    assert homogeneity(w, np.array([0, 1])) == pytest.approx(2.0)
    assert homogeneity(w, np.array([1, 2])) == pytest.approx(1.0)


def test_homogeneity_untouched_rows_score_their_size():
    assert homogeneity(np.zeros((3, 2), dtype=np.int16)) == pytest.approx(3.0)
    w = np.array([[2, 0]], dtype=np.int16)
    assert homogeneity(w, np.array([], dtype=np.int64)) == pytest.approx(0.0)


def test_homogeneity_weighted_columns():
    # (2 + 4) / (2 + 4)
    w = np.array([[2, 0], [0, 4]], dtype=np.int16)
    assert homogeneity(w) == pytest.approx(1.0)


def test_homogeneity_partial_column():
    # (2 + 2 + 2) / (2 + 2)
    w = np.array([[2, 2], [2, 0]], dtype=np.int16)
    assert homogeneity(w) == pytest.approx(1.5)


def test_homogeneity_upper_bound_and_uniform_equality(rng):
    # bounded by the row count, attained exactly for uniform access vectors
    for _ in range(50):
        n, m = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        weights = rng.integers(2, 6, size=m)
        w = np.where(rng.random((n, m)) < 0.5, weights, 0).astype(np.int16)
        h = homogeneity(w)
        assert h <= n + 1e-9
        if (w == w[0]).all():
            assert h == pytest.approx(float(n))
        else:
            assert h < n - 1e-12


# ---------------------------------------------------------------------------
# candidates and clustering


def test_candidate_cuts_are_predicate_endpoints():
    schema = small_schema()
    batches = [Batch("b", "tuning", 1, [
        q(0, {0}, [fp("f0", 10, 40)]),
        q(1, {1}, [fp("f0", 40, 90), fp("f1", 5, 15)]),
    ])]
    assert candidate_cuts(schema, batches) == {"f0": [10, 40, 90], "f1": [5, 15]}


def test_clustering_orders_by_filter_count():
    schema = small_schema()
    batches = [Batch("b", "tuning", 1, [
        q(0, set(), [fp("f1", 0, 10)]),
        q(1, set(), [fp("f1", 20, 30)]),
        q(2, set(), [fp("f0", 0, 10)]),
    ])]
    attrs, bounds = derive_clustering(schema, batches)
    assert attrs == ["f1", "f0"]
    assert bounds["f1"].tolist() == [0, 10, 20, 30]


# ---------------------------------------------------------------------------
# greedy tree fitting


def pure_split_batch():
    # two disjoint populations: f0 < 50 feeds the d0 subquery, the rest d1
    return [Batch("b", "tuning", 1, [
        q(0, {0}, [fp("f0", 0, 50)]),
        q(1, {1}, [fp("f0", 50, 100)]),
    ])]


def test_fit_finds_the_pure_split():
    db = handmade_db([10, 20, 60, 70])
    res = fit_partition_tree(db, pure_split_batch(), cfg())
    assert res.tree.to_text() == "tree v1\nsplit f0 < 50\n  leaf 0\n  leaf 1\n"
    assert res.h_root == pytest.approx(0.5)
    assert res.h_leaves == pytest.approx(1.0)
    assert [(c.attr, c.value) for c in res.applied_cuts] == [("f0", 50)]
    # each side reaches its 2-row maximum: score 2 + 2 against a parent of 2
    assert res.applied_cuts[0].score == pytest.approx(4.0)
    assert res.applied_cuts[0].parent_score == pytest.approx(2.0)
    assert res.n_subqueries == 2


def test_fit_respects_partition_size_floor():
    db = handmade_db([10, 20, 60, 70])
    res = fit_partition_tree(db, pure_split_batch(), cfg(ps_min=3))
    assert res.tree.n_leaves == 1
    assert res.h_root == pytest.approx(0.5)


def test_fit_skips_non_improving_cuts():
    # every row serves every subquery: already perfectly homogeneous
    db = handmade_db([10, 20, 60, 70])
    batches = [Batch("b", "tuning", 1, [
        q(0, {0}, [fp("f0", 0, 100)]),
        q(1, {1}, [fp("f0", 0, 100)]),
    ])]
    res = fit_partition_tree(db, batches, cfg())
    assert res.tree.n_leaves == 1
    assert res.h_root == pytest.approx(1.0)
    assert res.applied_cuts == []


def test_fit_disabled_partitioning_keeps_one_leaf():
    db = handmade_db([10, 20, 60, 70])
    res = fit_partition_tree(db, pure_split_batch(), cfg(partition_enabled=False))
    assert res.tree.n_leaves == 1
    assert res.h_root == pytest.approx(0.5)
    # clustering is still derived for the second level
    assert res.sort_attrs == ["f0"]


def test_fit_no_batches():
    db = handmade_db([1, 2, 3])
    res = fit_partition_tree(db, [], cfg())
    assert res.tree.n_leaves == 1 and res.sort_attrs == []


def test_root_cut_is_the_best_single_cut():
    # brute force over every candidate in the test and compare
    f0 = [0, 1, 2, 3, 4, 5, 6, 7]
    db = handmade_db(f0)
    batches = [Batch("b", "tuning", 1, [
        q(0, {0}, [fp("f0", 0, 4)]),
        q(1, {1}, [fp("f0", 4, 8)]),
        q(2, {0, 1}, [fp("f0", 0, 6)]),
    ])]
    c = cfg()
    rows = sample_rows(db.fact.n_rows, 1.0, c.seed)
    catalog = enumerate_subqueries(batches)
    w = record_access_matrix(db, batches, catalog, rows)
    vals = db.fact.column("f0")[rows]
    best = None
    for attr, cuts in candidate_cuts(db.schema, batches).items():
        for v in cuts:
            left = np.nonzero(vals < v)[0]
            right = np.nonzero(vals >= v)[0]
            if len(left) == 0 or len(right) == 0:
                continue
            score = homogeneity(w, left) + homogeneity(w, right)
            if best is None or score > best[0]:
                best = (score, attr, v)
    res = fit_partition_tree(db, batches, c)
    assert res.applied_cuts, "expected at least one cut"
    first = res.applied_cuts[0]
    assert (first.attr, first.value) == (best[1], best[2])
    assert first.score == pytest.approx(best[0])


def test_every_applied_cut_improves(rng):
    schema = small_schema(fact_rows=600, n_dims=3, dim_rows=20)
    for trial in range(5):
        db = generate_database(schema, seed=100 + trial)
        queries = []
        for i in range(6):
            joins = set(rng.choice(3, size=int(rng.integers(1, 3)), replace=False).tolist())
            lo = int(rng.integers(0, 70))
            attr = "f%d" % int(rng.integers(0, 2))
            queries.append(q(i, joins, [fp(attr, lo, lo + int(rng.integers(10, 31)))]))
        batches = [Batch("b", "tuning", 1, queries)]
        c = cfg(ps_min=10)
        res = fit_partition_tree(db, batches, c)
        for cut in res.applied_cuts:
            assert cut.score > cut.parent_score * c.improvement_factor
        assert res.h_leaves >= res.h_root - 1e-12


def test_greedy_never_beats_exhaustive_tree_search(rng):
    # tiny scale: enumerate every cut tree honoring the size floor and
    # compare its summed leaf homogeneity against the greedy result
    for trial in range(10):
        n = int(rng.integers(4, 13))
        f0 = rng.integers(0, 100, size=n).tolist()
        db = handmade_db(f0)
        cut_vals = sorted(set(int(v) for v in rng.integers(10, 90, size=2)))
        queries = []
        for i, v in enumerate(cut_vals):
            queries.append(q(2 * i, {0}, [fp("f0", 0, v)]))
            queries.append(q(2 * i + 1, {1}, [fp("f0", v, 100)]))
        batches = [Batch("b", "tuning", 1, queries)]
        c = cfg(ps_min=2)
        rows = sample_rows(n, 1.0, c.seed)
        catalog = enumerate_subqueries(batches)
        w = record_access_matrix(db, batches, catalog, rows)
        vals = db.fact.column("f0")[rows]
        cuts = [(a, v) for a, vs in candidate_cuts(db.schema, batches).items() for v in vs]

        def best_tree(idx):
            best = homogeneity(w, idx)
            for attr, v in cuts:
                mask = vals[idx] < v
                left, right = idx[mask], idx[~mask]
                if len(left) < 2 or len(right) < 2:
                    continue
                best = max(best, best_tree(left) + best_tree(right))
            return best

        res = fit_partition_tree(db, batches, c)
        optimum = best_tree(np.arange(n))
        assert res.h_leaves * res.n_samples <= optimum + 1e-9


def test_fit_is_deterministic():
    db = generate_database(small_schema(fact_rows=2000, n_dims=3, dim_rows=50), seed=3)
    batches = [Batch("b", "tuning", 1, [
        q(0, {0}, [fp("f0", 0, 30)]),
        q(1, {1}, [fp("f0", 30, 70)]),
        q(2, {2}, [fp("f1", 50, 100)]),
    ])]
    a = fit_partition_tree(db, batches, cfg(ps_min=50))
    b = fit_partition_tree(db, batches, cfg(ps_min=50))
    assert a.tree.to_text() == b.tree.to_text()
    assert a.h_leaves == b.h_leaves


def test_generated_workload_end_to_end():
    schema = small_schema(fact_rows=20000, n_dims=3, dim_rows=100)
    db = generate_database(schema, seed=5)
    queries = ([q(i, {0} if i % 2 else {0, 1}, [fp("f0", 0, 50)]) for i in range(4)]
               + [q(4 + i, {2}, [fp("f0", 50, 100)]) for i in range(4)])
    batches = [Batch("b", "tuning", 1, queries)]
    c = cfg(sample_rate=0.05, ps_min=100)
    res, db2, store = (None, None, None)
    res = fit_partition_tree(db, batches, c)
    assert "split f0 < 50" in res.tree.to_text()
    assert res.h_leaves > res.h_root
    assert res.h_leaves == pytest.approx(1.0)

    res2, db2, store = tune_storage(db, batches, c)
    assert res2.tree.to_text() == res.tree.to_text()
    assert store.n_rows == db.fact.n_rows
    # the reorganized table routes every partition's rows to its own leaf
    routed = store.tree.route(store.table.columns, store.n_rows)
    for p in store.partitions:
        assert (routed[p.start:p.end] == p.pid).all()
