import numpy as np
import pytest

from starshare.plan import (
    AGG, FILTER, PROBE, SCAN, VIEWSCAN, CostModel, PlanNode, PlanStats,
    annotate_costs, build_global_plan, dump_plan, plan_cost,
)
from starshare.workload import Predicate, Query

from conftest import small_schema


def q(qid, joins, filters=(), agg="m0", group=None, tpl="t"):
    return Query(qid, tpl, frozenset(joins), tuple(filters), agg, group)


def fpred(attr, lo, hi, table="sales"):
    return Predicate(table, attr, lo, hi)


def test_shared_plan_shape():
    # two queries sharing one dimension and one fact filter collapse into
    # scan, filter, four probes and two aggregates
    schema = small_schema()
    queries = [
        q(0, {0, 1, 2}, [fpred("f0", 10, 20)]),
        q(1, {0, 3}, [fpred("f0", 30, 40)]),
    ]
    plan = build_global_plan(schema, queries)
    kinds = [plan.node(i).kind for i in sorted(plan.nodes)]
    assert kinds == [SCAN, FILTER, PROBE, PROBE, PROBE, PROBE, AGG, AGG]
    assert plan.probe_count() == 4

    scan, filt = plan.node(0), plan.node(1)
    assert scan.query_set == 0b11 and filt.query_set == 0b11
    assert filt.attr == "f0"

    # d0 is joined by both queries so it probes first, serving both bits
    p0 = plan.node(2)
    assert p0.dim == 0 and p0.query_set == 0b11 and p0.inputs == (1,)
    assert p0.table_set == frozenset({0})
    # q0 continues d0 -> d1 -> d2, q1 branches d0 -> d3
    p1, p2, p3 = plan.node(3), plan.node(4), plan.node(5)
    assert (p1.dim, p1.query_set, p1.inputs) == (1, 0b01, (2,))
    assert (p2.dim, p2.query_set, p2.inputs) == (2, 0b01, (3,))
    assert (p3.dim, p3.query_set, p3.inputs) == (3, 0b10, (2,))
    assert p2.table_set == frozenset({0, 1, 2})
    assert p3.table_set == frozenset({0, 3})

    a0, a1 = plan.node(6), plan.node(7)
    assert (a0.query, a0.inputs) == (0, (4,))
    assert (a1.query, a1.inputs) == (1, (5,))
    assert plan.consumers(2) == [3, 5]


def test_probe_sharing_never_exceeds_per_query_joins(rng):
    schema = small_schema(n_dims=6)
    for _ in range(30):
        queries = []
        for i in range(int(rng.integers(1, 9))):
            joins = set(rng.choice(6, size=int(rng.integers(0, 5)), replace=False).tolist())
            queries.append(q(i, joins))
        plan = build_global_plan(schema, queries)
        total = sum(len(qq.joins) for qq in queries)
        assert plan.probe_count() <= total
        distinct_paths = set()
        for qq in queries:
            # probes de-duplicate exactly by shared ordered prefixes
            rank = {}
            for d in qq.joins:
                rank[d] = (-sum(1 for o in queries if d in o.joins), d)
            path = tuple(sorted(qq.joins, key=lambda d: rank[d]))
            for k in range(1, len(path) + 1):
                distinct_paths.add(path[:k])
        assert plan.probe_count() == len(distinct_paths)


def test_filter_chain_follows_schema_order():
    schema = small_schema()
    queries = [
        q(0, set(), [fpred("f1", 0, 10)]),
        q(1, set(), [fpred("f0", 0, 10), fpred("g0", 2, 5)]),
    ]
    plan = build_global_plan(schema, queries)
    chain = [n.attr for n in plan.topological() if n.kind == FILTER]
    assert chain == ["f0", "f1", "g0"]
    # every filter is shared by the whole live set
    assert all(n.query_set == 0b11 for n in plan.topological() if n.kind == FILTER)


def test_alive_mask_restricts_plan():
    schema = small_schema()
    queries = [q(0, {0, 1}, [fpred("f0", 0, 10)]), q(1, {2}, [fpred("f1", 0, 10)])]
    plan = build_global_plan(schema, queries, alive=0b10)
    dims = sorted(n.dim for n in plan.topological() if n.kind == PROBE)
    attrs = [n.attr for n in plan.topological() if n.kind == FILTER]
    assert dims == [2]
    assert attrs == ["f1"]
    assert all(n.query_set == 0b10 for n in plan.topological())


def test_empty_plan():
    plan = build_global_plan(small_schema(), [], alive=0)
    assert len(plan) == 0 and plan.sources() == []


def test_unit_costs_sum_over_nodes():
    # eight nodes at cardinality 100 under unit constants cost exactly 800
    schema = small_schema()
    queries = [
        q(0, {0, 1, 2}, [fpred("f0", 10, 20)]),
        q(1, {0, 3}, [fpred("f0", 30, 40)]),
    ]
    plan = build_global_plan(schema, queries)
    model = CostModel(1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    total = annotate_costs(plan, model, cards={n: 100.0 for n in plan.nodes})
    assert total == pytest.approx(800.0)
    assert plan_cost(plan) == pytest.approx(800.0)


def test_cost_propagation_with_stats():
    # frozen by hand: 1000 scanned rows, filter keeps half, probe keeps 20%
    # -> 1*1000 + 2*1000 + 10*500 + 2*100 = 8200
    schema = small_schema()
    queries = [q(0, {0}, [fpred("f0", 0, 50)])]
    plan = build_global_plan(schema, queries)
    stats = PlanStats(
        scan_rows=1000.0,
        filter_retention={"f0": 0.5},
        filter_amb={"f0": 1},
        probe_density={0: {0: 0.2}},
    )
    total = annotate_costs(plan, CostModel(), stats=stats)
    assert total == pytest.approx(8200.0)
    cards = {n.kind: n.card for n in plan.topological()}
    assert cards[SCAN] == pytest.approx(1000.0)
    assert cards[FILTER] == pytest.approx(1000.0)
    assert cards[PROBE] == pytest.approx(500.0)
    assert cards[AGG] == pytest.approx(100.0)


def test_probe_density_union_caps_at_one():
    schema = small_schema()
    queries = [q(0, {0}), q(1, {0})]
    plan = build_global_plan(schema, queries)
    stats = PlanStats(100.0, {}, {}, {0: {0: 0.7, 1: 0.8}})
    annotate_costs(plan, CostModel(), stats=stats)
    probe = next(n for n in plan.topological() if n.kind == PROBE)
    aggs = [n for n in plan.topological() if n.kind == AGG]
    # union estimate saturates, every agg sees the full probe output
    assert all(a.card == pytest.approx(100.0) for a in aggs)
    assert probe.card == pytest.approx(100.0)


def test_filter_cost_scales_with_ambivalent_predicates():
    node = PlanNode(0, FILTER, 1, attr="f0", amb_preds=3)
    node.card = 10.0
    assert CostModel().node_cost(node) == pytest.approx(2.0 * 10 * 3)
    assert CostModel(filter_cost_exponent=0.0).node_cost(node) == pytest.approx(20.0)


def test_viewscan_cost_formula():
    node = PlanNode(0, VIEWSCAN, 1, view_key=(0, (0,)), rf_count=2, view_rows=100)
    assert CostModel().node_cost(node) == pytest.approx(139.45 * 2 * 100)
    # a view with no runtime filters is free to scan under this model
    node.rf_count = 0
    assert CostModel().node_cost(node) == pytest.approx(0.0)


def test_dump_golden():
    schema = small_schema()
    queries = [q(0, {0}, [fpred("f0", 0, 50)])]
    plan = build_global_plan(schema, queries)
    annotate_costs(plan, CostModel(1.0, 1.0, 1.0, 1.0, 1.0, 1.0),
                   cards={0: 10.0, 1: 10.0, 2: 5.0, 3: 5.0})
    want = (
        "plan v1\n"
        "0 scan qs=0000000000000001 in=- card=10.0 cost=10.0\n"
        "1 filter f0 qs=0000000000000001 in=0 card=10.0 cost=10.0\n"
        "2 probe d0 qs=0000000000000001 in=1 card=5.0 cost=5.0\n"
        "3 agg q0 qs=0000000000000001 in=2 card=5.0 cost=5.0\n"
    )
    assert dump_plan(plan, 1) == want


def test_consumers_and_sources():
    schema = small_schema()
    queries = [q(0, {0}), q(1, {0})]
    plan = build_global_plan(schema, queries)
    srcs = plan.sources()
    assert [s.kind for s in srcs] == [SCAN]
    probe = next(n for n in plan.topological() if n.kind == PROBE)
    # one shared probe feeds both aggregates
    assert len(plan.consumers(probe.nid)) == 2
