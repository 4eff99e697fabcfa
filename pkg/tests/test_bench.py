"""Unit coverage for the sweep builders; trends live in the acceptance suite."""

import numpy as np
import pytest

from starshare import bench
from starshare.config import EngineConfig


@pytest.fixture
def rng():
    return np.random.default_rng(3)


def test_bench_config_layers_overrides():
    cfg = bench.bench_config(seed=5, threads=1)
    assert cfg.c_view_filter == bench.CALIBRATED["c_view_filter"]
    assert cfg.c_probe == bench.CALIBRATED["c_probe"]
    assert cfg.seed == 5 and cfg.threads == 1
    assert EngineConfig().c_view_filter != cfg.c_view_filter


def test_mode_config_maps_the_three_baselines():
    cfg = bench.bench_config()
    sharing = bench.mode_config(cfg, "sharing")
    assert sharing.reuse_mode == "off"
    naive = bench.mode_config(cfg, "naive")
    assert naive.reuse_mode == "eager" and not naive.view_skip_enabled
    assert bench.mode_config(cfg, "reuse") is cfg
    with pytest.raises(ValueError):
        bench.mode_config(cfg, "bogus")


def test_template_queries_bands_and_widths(rng):
    schema = bench.star_schema(1000, n_dims=8, n_filters=4, domain=1000)
    qs = bench.template_queries(rng, schema, 32, n_templates=4, join_count=4,
                                n_filters=4, selectivity=0.10,
                                correlation="template", per_filter=True)
    assert len(qs) == 32
    for i, q in enumerate(qs):
        t = i % 4
        assert len(q.joins) == 4
        assert len(q.filters) == 4
        for p in q.filters:
            assert p.hi - p.lo == 100
            band = t * 250
            assert band <= p.lo < band + 7
    assert len({q.qid for q in qs}) == 32


def test_template_queries_joint_width_without_per_filter(rng):
    schema = bench.star_schema(1000, n_filters=2, domain=1000)
    qs = bench.template_queries(rng, schema, 8, n_filters=2, selectivity=0.25)
    width = qs[0].filters[0].hi - qs[0].filters[0].lo
    assert width == 500, "two conjuncts at joint 25% are 50% wide each"


def test_correlate_filters_tracks_base(rng):
    schema = bench.star_schema(4000, n_filters=4, domain=1000)
    db = bench.generate_database(schema, 1)
    bench.correlate_filters(db, schema, rng, spread=0.01)
    base = db.fact.columns["f0"].astype(np.int64)
    for name in ("f1", "f2", "f3"):
        col = db.fact.columns[name].astype(np.int64)
        assert col.min() >= 0 and col.max() < 1000
        inner = (base >= 20) & (base < 980)
        assert np.abs(col - base)[inner].max() <= 10


def test_exactness_cells_are_exact_and_dual_equal():
    rows = bench.exactness_matrix(fact_rows=3000, limit=4)
    assert len(rows) == 4
    for r in rows:
        assert r["exact"], r["cell"]
        assert r["dual_equal"], r["cell"]
    assert {r["correlation"] for r in rows} == {"correlated"}
    assert any(r["skipped_blocks"] > 0 for r in rows)


def test_exactness_matrix_spans_the_declared_axes():
    rows = bench.exactness_matrix(fact_rows=1500, limit=None)
    assert len(rows) >= 50
    assert {r["correlation"] for r in rows} == \
        {"correlated", "uncorrelated", "semi"}
    assert {r["queries"] for r in rows} == {8, 64, 512}
    assert {r["selectivity"] for r in rows} == {0.01, 0.10, 0.50}
    assert min(r["budget_frac"] for r in rows) == 0.0
    assert max(r["budget_frac"] for r in rows) == 1.0
    assert min(r["miss_frac"] for r in rows) == 0.0
    assert max(r["miss_frac"] for r in rows) == 1.0
