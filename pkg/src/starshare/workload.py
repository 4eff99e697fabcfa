"""Workload model and the declarative workload file.

A workload file declares the star schema, a set of query templates, and
batches that instantiate templates into concrete queries with seeded
parameters.  Batches are either tuning batches (history the tuner optimizes
for) or runtime batches (what actually executes).

File format (line oriented, '#' comments, two-space indented bodies):

    schema
      fact sales rows=100000 filters=f0,f1 measures=m0 groups=g0 domain=100
      dim d0 rows=10000 attrs=2 domain=100

    template t0
      joins d0,d1
      filter sales.f0 sel=10% region=0,100
      filter d0.a0 range=20,30
      agg m0 by g0

    batch tune0 role=tuning seed=11
      use t0 n=16
      use t1 n=16 shift=5

A parameterized filter (sel=) draws its range start uniformly inside the
region for every query instance; a fixed filter (range=) is shared by all
instances.  'shift' displaces every instantiated range of that use line,
which is how runtime drift away from the tuning workload is expressed.
"""

from __future__ import annotations

import dataclasses
import re

import numpy as np

from .errors import ConfigError
from .storage import Database, DimSchema, Schema

# ---------------------------------------------------------------------------
# query model


@dataclasses.dataclass(frozen=True)
class Predicate:
    table: str
    attr: str
    lo: int
    hi: int


@dataclasses.dataclass(frozen=True)
class Query:
    qid: int
    template: str
    joins: frozenset[int]           # dimension indices into the schema
    filters: tuple[Predicate, ...]
    agg_col: str
    group_col: str | None = None

    def fact_filters(self, schema: Schema) -> list[Predicate]:
        return [p for p in self.filters if p.table == schema.fact_name]

    def dim_filters(self, dim_name: str) -> list[Predicate]:
        return [p for p in self.filters if p.table == dim_name]


@dataclasses.dataclass
class Batch:
    name: str
    role: str                       # tuning | runtime
    seed: int
    queries: list[Query]

    @property
    def n_queries(self) -> int:
        return len(self.queries)


@dataclasses.dataclass(frozen=True)
class Template:
    name: str
    joins: tuple[str, ...]
    filters: tuple[dict, ...]       # raw filter specs, see _parse_filter
    agg_col: str
    group_col: str | None


@dataclasses.dataclass
class WorkloadSpec:
    schema: Schema
    templates: dict[str, Template]
    tuning: list[Batch]
    runtime: list[Batch]

    def batch(self, name: str) -> Batch:
        for b in self.tuning + self.runtime:
            if b.name == name:
                return b
        raise ConfigError("no batch named %r" % name)


# ---------------------------------------------------------------------------
# parsing


_KV = re.compile(r"^([a-zA-Z_][\w.]*)=(.*)$")


def _kvs(tokens, line_no):
    out = {}
    for tok in tokens:
        m = _KV.match(tok)
        if not m:
            raise ConfigError("line %d: expected key=value, got %r" % (line_no, tok))
        out[m.group(1)] = m.group(2)
    return out


def _int(kvs, key, line_no, default=None):
    if key not in kvs:
        if default is not None:
            return default
        raise ConfigError("line %d: missing %s=" % (line_no, key))
    try:
        return int(kvs[key])
    except ValueError:
        raise ConfigError("line %d: %s= wants an integer, got %r" % (line_no, key, kvs[key])) from None


def _split_list(raw):
    return tuple(x for x in raw.split(",") if x)


def _parse_filter(tokens, line_no):
    # filter <table>.<col> sel=<pct>% [region=<lo>,<hi>]  |  filter <table>.<col> range=<lo>,<hi>
    if not tokens or "." not in tokens[0]:
        raise ConfigError("line %d: filter wants <table>.<column>" % line_no)
    table, attr = tokens[0].split(".", 1)
    kvs = _kvs(tokens[1:], line_no)
    spec = {"table": table, "attr": attr, "line": line_no}
    if "range" in kvs:
        try:
            lo, hi = (int(x) for x in kvs["range"].split(","))
        except ValueError:
            raise ConfigError("line %d: range wants lo,hi integers" % line_no) from None
        if hi <= lo:
            raise ConfigError("line %d: empty range [%d, %d)" % (line_no, lo, hi))
        spec.update(kind="fixed", lo=lo, hi=hi)
    elif "sel" in kvs:
        raw = kvs["sel"].rstrip("%")
        try:
            spec.update(kind="param", sel=float(raw) / 100.0)
        except ValueError:
            raise ConfigError("line %d: sel wants a percentage" % line_no) from None
        if not 0 < spec["sel"] <= 1:
            raise ConfigError("line %d: sel must be in (0, 100]" % line_no)
        if "region" in kvs:
            try:
                rlo, rhi = (int(x) for x in kvs["region"].split(","))
            except ValueError:
                raise ConfigError("line %d: region wants lo,hi integers" % line_no) from None
            spec.update(region=(rlo, rhi))
    else:
        raise ConfigError("line %d: filter wants sel= or range=" % line_no)
    return spec


def _column_domain(schema: Schema, table: str, attr: str, line_no: int) -> tuple[int, int]:
    if table == schema.fact_name:
        if attr in schema.filter_cols or attr in schema.measure_cols or attr in schema.group_cols:
            return 0, schema.domain
        for d in schema.dims:
            if attr == d.fk_column:
                return 0, d.rows
        raise ConfigError("line %d: fact table has no column %r" % (line_no, attr))
    for d in schema.dims:
        if d.name == table:
            if attr in d.attrs:
                return 0, d.domain
            raise ConfigError("line %d: dimension %s has no attribute %r" % (line_no, table, attr))
    raise ConfigError("line %d: unknown table %r" % (line_no, table))


def _instantiate(template: Template, schema: Schema, rng, shift: int, qid: int) -> Query:
    joins = frozenset(schema.dim_index(d) for d in template.joins)
    preds = []
    for spec in template.filters:
        if spec["kind"] == "fixed":
            lo, hi = spec["lo"], spec["hi"]
        else:
            dlo, dhi = _column_domain(schema, spec["table"], spec["attr"], spec["line"])
            rlo, rhi = spec.get("region", (dlo, dhi))
            width = max(1, round(spec["sel"] * (dhi - dlo)))
            if rhi - width < rlo:
                raise ConfigError(
                    "line %d: region [%d, %d) narrower than the %d-wide predicate"
                    % (spec["line"], rlo, rhi, width))
            lo = int(rng.integers(rlo, rhi - width + 1))
            hi = lo + width
        preds.append(Predicate(spec["table"], spec["attr"], lo + shift, hi + shift))
    return Query(qid, template.name, joins, tuple(preds), template.agg_col, template.group_col)


def parse_workload(text: str, max_queries: int = 512) -> WorkloadSpec:
    lines = text.splitlines()
    schema: Schema | None = None
    templates: dict[str, Template] = {}
    tuning: list[Batch] = []
    runtime: list[Batch] = []

    i = 0

    def body(start):
        """Indented lines following a section header, with line numbers."""
        j = start
        out = []
        while j < len(lines):
            raw = lines[j]
            stripped = raw.split("#", 1)[0].rstrip()
            if not stripped.strip():
                j += 1
                continue
            if not raw.startswith(" "):
                break
            out.append((j + 1, stripped.split()))
            j += 1
        return out, j

    def parse_schema(rows):
        fact = None
        dims = []
        domain = 100
        filters = measures = groups = ()
        fact_rows = 0
        fact_name = ""
        for line_no, toks in rows:
            if toks[0] == "fact":
                if len(toks) < 2:
                    raise ConfigError("line %d: fact wants a name" % line_no)
                fact_name = toks[1]
                kvs = _kvs(toks[2:], line_no)
                fact_rows = _int(kvs, "rows", line_no)
                filters = _split_list(kvs.get("filters", ""))
                measures = _split_list(kvs.get("measures", ""))
                groups = _split_list(kvs.get("groups", ""))
                domain = _int(kvs, "domain", line_no, 100)
                fact = True
            elif toks[0] == "dim":
                if len(toks) < 2:
                    raise ConfigError("line %d: dim wants a name" % line_no)
                kvs = _kvs(toks[2:], line_no)
                n_attrs = _int(kvs, "attrs", line_no, 2)
                dims.append(DimSchema(
                    toks[1], _int(kvs, "rows", line_no),
                    tuple("a%d" % k for k in range(n_attrs)),
                    _int(kvs, "domain", line_no, 100)))
            else:
                raise ConfigError("line %d: unknown schema entry %r" % (line_no, toks[0]))
        if not fact:
            raise ConfigError("schema section has no fact table")
        if not measures:
            raise ConfigError("schema declares no measure columns")
        return Schema(fact_name, fact_rows, tuple(dims), filters, measures, groups, domain)

    def parse_template(name, rows):
        joins: tuple[str, ...] = ()
        filters = []
        agg = None
        group = None
        for line_no, toks in rows:
            if toks[0] == "joins":
                raw = toks[1] if len(toks) > 1 else ""
                joins = () if raw == "none" else _split_list(raw)
                known = {d.name for d in schema.dims}
                for j in joins:
                    if j not in known:
                        raise ConfigError("line %d: unknown dimension %r in joins" % (line_no, j))
            elif toks[0] == "filter":
                filters.append(_parse_filter(toks[1:], line_no))
            elif toks[0] == "agg":
                if len(toks) < 2:
                    raise ConfigError("line %d: agg wants a measure column" % line_no)
                agg = toks[1]
                if len(toks) == 4 and toks[2] == "by":
                    group = toks[3]
                elif len(toks) != 2:
                    raise ConfigError("line %d: agg syntax is 'agg <col> [by <col>]'" % line_no)
            else:
                raise ConfigError("line %d: unknown template entry %r" % (line_no, toks[0]))
        if agg is None:
            raise ConfigError("template %s has no agg line" % name)
        return Template(name, joins, tuple(filters), agg, group)

    def parse_batch(name, kvs, line_no, rows):
        role = kvs.get("role", "runtime")
        if role not in ("tuning", "runtime"):
            raise ConfigError("line %d: role must be tuning or runtime" % line_no)
        seed = _int(kvs, "seed", line_no, 0)
        rng = np.random.default_rng(seed)
        queries: list[Query] = []
        for ln, toks in rows:
            if toks[0] != "use":
                raise ConfigError("line %d: batches contain 'use' lines only" % ln)
            if len(toks) < 2 or toks[1] not in templates:
                raise ConfigError("line %d: unknown template %r" % (ln, toks[1] if len(toks) > 1 else ""))
            u = _kvs(toks[2:], ln)
            count = _int(u, "n", ln, 1)
            shift = _int(u, "shift", ln, 0)
            for _ in range(count):
                queries.append(_instantiate(templates[toks[1]], schema, rng, shift, len(queries)))
        if len(queries) > max_queries:
            raise ConfigError(
                "line %d: batch %s has %d queries, the engine is built for at most %d"
                % (line_no, name, len(queries), max_queries))
        if not queries:
            raise ConfigError("line %d: batch %s is empty" % (line_no, name))
        return Batch(name, role, seed, queries)

    while i < len(lines):
        raw = lines[i].split("#", 1)[0].rstrip()
        if not raw.strip():
            i += 1
            continue
        if raw.startswith(" "):
            raise ConfigError("line %d: indented line outside any section" % (i + 1))
        toks = raw.split()
        head, rest = toks[0], toks[1:]
        rows, j = body(i + 1)
        if head == "schema":
            schema = parse_schema(rows)
        elif head == "template":
            if not rest:
                raise ConfigError("line %d: template wants a name" % (i + 1))
            if schema is None:
                raise ConfigError("line %d: template before schema" % (i + 1))
            templates[rest[0]] = parse_template(rest[0], rows)
        elif head == "batch":
            if not rest:
                raise ConfigError("line %d: batch wants a name" % (i + 1))
            if schema is None:
                raise ConfigError("line %d: batch before schema" % (i + 1))
            b = parse_batch(rest[0], _kvs(rest[1:], i + 1), i + 1, rows)
            (tuning if b.role == "tuning" else runtime).append(b)
        else:
            raise ConfigError("line %d: unknown section %r" % (i + 1, head))
        i = j

    if schema is None:
        raise ConfigError("workload file has no schema section")
    # surface bad column references early, not at execution time
    for b in tuning + runtime:
        for q in b.queries:
            for p in q.filters:
                _column_domain(schema, p.table, p.attr, 0)
                if p.table != schema.fact_name and schema.dim_index(p.table) not in q.joins:
                    raise ConfigError(
                        "batch %s query %d filters %s without joining it" % (b.name, q.qid, p.table))
            if q.agg_col not in schema.measure_cols:
                raise ConfigError("batch %s query %d aggregates unknown measure %r" % (b.name, q.qid, q.agg_col))
            if q.group_col is not None and q.group_col not in schema.group_cols:
                raise ConfigError("batch %s query %d groups by unknown column %r" % (b.name, q.qid, q.group_col))
    return WorkloadSpec(schema, templates, tuning, runtime)


def load_workload(path: str, max_queries: int = 512) -> WorkloadSpec:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("cannot read workload file %s: %s" % (path, exc)) from None
    return parse_workload(text, max_queries)


# ---------------------------------------------------------------------------
# subquery catalog


@dataclasses.dataclass(frozen=True)
class Subquery:
    sid: int
    batch: str
    table_set: frozenset[int]

    @property
    def weight(self) -> int:
        # participating tables: the joined dimensions plus the fact table
        return len(self.table_set) + 1


class SubqueryCatalog:
    """Join subexpressions rooted at the fact table, one entry per batch and
    non-empty join-set subset.  Entries from different batches stay distinct
    even for equal table sets; co-occurrence within a batch is what the
    partitioning signal needs."""

    def __init__(self):
        self.entries: list[Subquery] = []
        self._index: dict[tuple[str, frozenset[int]], int] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, batch: str, table_set: frozenset[int]) -> int:
        key = (batch, table_set)
        sid = self._index.get(key)
        if sid is None:
            sid = len(self.entries)
            self.entries.append(Subquery(sid, batch, table_set))
            self._index[key] = sid
        return sid

    def sid(self, batch: str, table_set: frozenset[int]) -> int:
        try:
            return self._index[(batch, table_set)]
        except KeyError:
            raise ConfigError("no subquery for batch %s table set %s" % (batch, sorted(table_set))) from None

    def for_batch(self, batch: str) -> list[Subquery]:
        return [e for e in self.entries if e.batch == batch]


def _nonempty_subsets(join_set: frozenset[int]):
    dims = sorted(join_set)
    for size in range(1, len(dims) + 1):
        yield from _k_subsets(dims, size)


def _k_subsets(dims, size):
    import itertools

    for combo in itertools.combinations(dims, size):
        yield frozenset(combo)


def enumerate_subqueries(batches: list[Batch]) -> SubqueryCatalog:
    """Catalog every join subexpression any batch query could produce."""
    catalog = SubqueryCatalog()
    for b in batches:
        for q in b.queries:
            for subset in _nonempty_subsets(q.joins):
                catalog.add(b.name, subset)
    return catalog


def query_subquery_ids(catalog: SubqueryCatalog, batch: Batch, q: Query) -> list[int]:
    return [catalog.sid(batch.name, s) for s in _nonempty_subsets(q.joins)]


# ---------------------------------------------------------------------------
# access matrix


def sample_rows(n_rows: int, rate: float, seed: int) -> np.ndarray:
    """Uniform sample of row indices, sorted, without replacement."""
    k = max(1, round(n_rows * rate)) if n_rows else 0
    if k >= n_rows:
        return np.arange(n_rows)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_rows, size=k, replace=False))


def record_access_matrix(db: Database, batches: list[Batch],
                         catalog: SubqueryCatalog, rows: np.ndarray) -> np.ndarray:
    """Weighted access matrix over the sampled rows.

    Entry [t, j] is w(e_j) when sample row t serves subquery j and 0
    otherwise; w counts participating tables (dimensions plus fact).  A row
    serves a query when it satisfies the query's fact-table filters;
    dimension predicates are runtime properties and do not gate eligibility.
    """
    schema = db.schema
    w = np.zeros((len(rows), len(catalog)), dtype=np.int16)
    cols = {c: db.fact.column(c)[rows] for c in set(
        p.attr for b in batches for q in b.queries for p in q.fact_filters(schema))}
    for b in batches:
        for q in b.queries:
            eligible = np.ones(len(rows), dtype=bool)
            for p in q.fact_filters(schema):
                v = cols[p.attr]
                eligible &= (v >= p.lo) & (v < p.hi)
            if not eligible.any():
                continue
            for subset in _nonempty_subsets(q.joins):
                sid = catalog.sid(b.name, subset)
                np.maximum(w[:, sid], np.where(eligible, len(subset) + 1, 0).astype(np.int16),
                           out=w[:, sid])
    return w


def dump_access_matrix(w: np.ndarray) -> str:
    """Sparse triplet text: row, subquery, weight."""
    lines = ["# row subquery weight"]
    rows, cols = np.nonzero(w)
    for r, c in zip(rows.tolist(), cols.tolist()):
        lines.append("%d %d %d" % (r, c, w[r, c]))
    return "\n".join(lines) + "\n"
