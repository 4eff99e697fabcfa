from __future__ import annotations

import numpy as np
import pytest

from starshare.storage import DimSchema, Schema, generate_database


def small_schema(fact_rows=5000, n_dims=4, dim_rows=200, n_filters=2, domain=100):
    dims = tuple(
        DimSchema("d%d" % i, dim_rows, ("a0", "a1"), domain) for i in range(n_dims)
    )
    return Schema(
        fact_name="sales",
        fact_rows=fact_rows,
        dims=dims,
        filter_cols=tuple("f%d" % i for i in range(n_filters)),
        measure_cols=("m0",),
        group_cols=("g0",),
        domain=domain,
    )


@pytest.fixture
def tiny_db():
    return generate_database(small_schema(fact_rows=2000, n_dims=3, dim_rows=50), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(20260822)
