"""Columnar star-schema storage.

One fact table plus dimensions with dense primary keys [0, rows).  Every
column is a signed 32-bit integer array.  The fact table can be reorganized
into a two-level layout: a partition tree routes rows into first-level
partitions, and inside each partition rows are clustered into contiguous
blocks carrying tight min/max zone maps per column.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import struct
from enum import IntEnum

import numpy as np

from .errors import DataError, InternalError

SNAPSHOT_MAGIC = b"SSDB"
SNAPSHOT_VERSION = 1


# ---------------------------------------------------------------------------
# schema


@dataclasses.dataclass(frozen=True)
class DimSchema:
    name: str
    rows: int
    attrs: tuple[str, ...]
    domain: int = 100

    @property
    def fk_column(self) -> str:
        return "fk_" + self.name


@dataclasses.dataclass(frozen=True)
class Schema:
    fact_name: str
    fact_rows: int
    dims: tuple[DimSchema, ...]
    filter_cols: tuple[str, ...]
    measure_cols: tuple[str, ...]
    group_cols: tuple[str, ...] = ()
    domain: int = 100

    def dim_index(self, name: str) -> int:
        for i, d in enumerate(self.dims):
            if d.name == name:
                return i
        raise DataError("unknown dimension %r" % name)

    def fact_columns(self) -> list[str]:
        cols = [d.fk_column for d in self.dims]
        cols += list(self.filter_cols) + list(self.measure_cols) + list(self.group_cols)
        return cols

    def canonical(self) -> str:
        parts = ["fact=%s:%d" % (self.fact_name, self.fact_rows),
                 "domain=%d" % self.domain,
                 "filters=%s" % ",".join(self.filter_cols),
                 "measures=%s" % ",".join(self.measure_cols),
                 "groups=%s" % ",".join(self.group_cols)]
        for d in self.dims:
            parts.append("dim=%s:%d:%s:%d" % (d.name, d.rows, ",".join(d.attrs), d.domain))
        return ";".join(parts)

    def schema_hash(self) -> int:
        digest = hashlib.sha256(self.canonical().encode()).digest()
        return int.from_bytes(digest[:8], "little")


class ColumnarTable:
    """Named int32 columns of equal length."""

    def __init__(self, name: str, columns: dict[str, np.ndarray]):
        self.name = name
        self.columns = {}
        n = None
        for cname, arr in columns.items():
            arr = np.asarray(arr, dtype=np.int32)
            if n is None:
                n = len(arr)
            elif len(arr) != n:
                raise DataError("column %s of %s has %d rows, expected %d" % (cname, name, len(arr), n))
            self.columns[cname] = arr
        self.n_rows = n or 0

    def column(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise DataError("table %s has no column %r" % (self.name, name)) from None

    def take(self, order: np.ndarray) -> "ColumnarTable":
        return ColumnarTable(self.name, {c: a[order] for c, a in self.columns.items()})


@dataclasses.dataclass
class Database:
    schema: Schema
    fact: ColumnarTable
    dims: dict[str, ColumnarTable]

    def dim(self, name: str) -> ColumnarTable:
        try:
            return self.dims[name]
        except KeyError:
            raise DataError("no dimension table %r" % name) from None


def generate_database(schema: Schema, seed: int) -> Database:
    """Deterministic synthetic database for a schema and seed.

    All attribute values are drawn uniformly over their domain; foreign keys
    are drawn uniformly over the referenced dimension's dense key range.
    Generation order is fixed (dimensions in declaration order, then fact
    columns in schema order) so equal inputs give bit-identical tables.
    """
    rng = np.random.default_rng(seed)
    dims = {}
    for d in schema.dims:
        cols = {a: rng.integers(0, d.domain, d.rows, dtype=np.int32) for a in d.attrs}
        dims[d.name] = ColumnarTable(d.name, cols)
    fact_cols: dict[str, np.ndarray] = {}
    for d in schema.dims:
        fact_cols[d.fk_column] = rng.integers(0, d.rows, schema.fact_rows, dtype=np.int32)
    for c in list(schema.filter_cols) + list(schema.measure_cols) + list(schema.group_cols):
        fact_cols[c] = rng.integers(0, schema.domain, schema.fact_rows, dtype=np.int32)
    return Database(schema, ColumnarTable(schema.fact_name, fact_cols), dims)


# ---------------------------------------------------------------------------
# zone maps and predicate classification


class PredClass(IntEnum):
    ALWAYS_FALSE = 0
    ALWAYS_TRUE = 1
    AMBIVALENT = 2


def classify_predicate(lo: int, hi: int, vmin: int, vmax: int) -> PredClass:
    """Classify half-open range [lo, hi) against attained values [vmin, vmax]."""
    if hi <= lo or vmax < lo or vmin >= hi:
        return PredClass.ALWAYS_FALSE
    if lo <= vmin and vmax < hi:
        return PredClass.ALWAYS_TRUE
    return PredClass.AMBIVALENT


def classify_blocks(lo: int, hi: int, mins: np.ndarray, maxs: np.ndarray):
    """Vectorized classify over parallel zone-map arrays.

    Returns (always_false, always_true) boolean arrays; ambivalent is the
    complement of their union.
    """
    if hi <= lo:
        af = np.ones(len(mins), dtype=bool)
        return af, np.zeros(len(mins), dtype=bool)
    af = (maxs < lo) | (mins >= hi)
    at = (mins >= lo) & (maxs < hi) & ~af
    return af, at


def build_zone_maps(values: dict[str, np.ndarray], starts: np.ndarray, attrs):
    """Tight per-block min/max for each attribute.

    *starts* are block start offsets into contiguous arrays; blocks cover the
    arrays end to end.  Unknown attributes raise.
    """
    mins: dict[str, np.ndarray] = {}
    maxs: dict[str, np.ndarray] = {}
    for a in attrs:
        if a not in values:
            raise DataError("cannot build zone map for unknown attribute %r" % a)
        col = values[a]
        if len(col) == 0:
            mins[a] = np.empty(0, dtype=np.int32)
            maxs[a] = np.empty(0, dtype=np.int32)
            continue
        mins[a] = np.minimum.reduceat(col, starts)
        maxs[a] = np.maximum.reduceat(col, starts)
    return mins, maxs


# ---------------------------------------------------------------------------
# partition tree


@dataclasses.dataclass
class TreeLeaf:
    leaf_id: int = -1


@dataclasses.dataclass
class TreeSplit:
    attr: str
    value: int
    left: "TreeSplit | TreeLeaf"    # rows with attr < value
    right: "TreeSplit | TreeLeaf"   # rows with attr >= value


class PartitionTree:
    """Binary routing tree over fact attributes; leaves are partitions."""

    def __init__(self, root):
        self.root = root
        self._assign_ids()

    def _assign_ids(self) -> None:
        counter = 0

        def walk(node):
            nonlocal counter
            if isinstance(node, TreeLeaf):
                node.leaf_id = counter
                counter += 1
            else:
                walk(node.left)
                walk(node.right)

        walk(self.root)
        self.n_leaves = counter

    def leaves(self) -> list[TreeLeaf]:
        out = []

        def walk(node):
            if isinstance(node, TreeLeaf):
                out.append(node)
            else:
                walk(node.left)
                walk(node.right)

        walk(self.root)
        return out

    def leaf_bounds(self) -> list[dict[str, tuple[int, int]]]:
        """Per leaf, the half-open interval each routed attribute is confined to."""
        out: list[dict[str, tuple[int, int]]] = [dict() for _ in range(self.n_leaves)]

        def walk(node, bounds):
            if isinstance(node, TreeLeaf):
                out[node.leaf_id] = dict(bounds)
                return
            lo, hi = bounds.get(node.attr, (-(1 << 31), 1 << 31))
            walk(node.left, {**bounds, node.attr: (lo, min(hi, node.value))})
            walk(node.right, {**bounds, node.attr: (max(lo, node.value), hi)})

        walk(self.root, {})
        return out

    def route(self, columns: dict[str, np.ndarray], n_rows: int) -> np.ndarray:
        """Leaf id for every row."""
        out = np.empty(n_rows, dtype=np.int32)

        def walk(node, idx):
            if isinstance(node, TreeLeaf):
                out[idx] = node.leaf_id
                return
            vals = columns[node.attr][idx]
            goes_left = vals < node.value
            walk(node.left, idx[goes_left])
            walk(node.right, idx[~goes_left])

        walk(self.root, np.arange(n_rows))
        return out

    # text round trip: two-space indentation, deterministic in-order leaf ids
    def to_text(self, leaf_rows=None) -> str:
        lines = ["tree v1"]

        def walk(node, depth):
            pad = "  " * depth
            if isinstance(node, TreeLeaf):
                extra = ""
                if leaf_rows is not None:
                    extra = " rows=%d" % leaf_rows[node.leaf_id]
                lines.append("%sleaf %d%s" % (pad, node.leaf_id, extra))
            else:
                lines.append("%ssplit %s < %d" % (pad, node.attr, node.value))
                walk(node.left, depth + 1)
                walk(node.right, depth + 1)

        walk(self.root, 0)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PartitionTree":
        rows = [ln for ln in text.splitlines() if ln.strip()]
        if not rows or rows[0].strip() != "tree v1":
            raise DataError("partition tree text missing 'tree v1' header")
        pos = 1

        def parse(depth):
            nonlocal pos
            if pos >= len(rows):
                raise DataError("partition tree text truncated")
            line = rows[pos]
            indent = (len(line) - len(line.lstrip())) // 2
            if indent != depth:
                raise DataError("bad indentation at line %d of tree text" % (pos + 1))
            tokens = line.split()
            pos += 1
            if tokens[0] == "leaf":
                return TreeLeaf()
            if tokens[0] == "split" and len(tokens) == 4 and tokens[2] == "<":
                left = parse(depth + 1)
                right = parse(depth + 1)
                return TreeSplit(tokens[1], int(tokens[3]), left, right)
            raise DataError("bad tree line: %r" % line)

        tree = cls(parse(0))
        if pos != len(rows):
            raise DataError("trailing lines in partition tree text")
        return tree


def single_leaf_tree() -> PartitionTree:
    return PartitionTree(TreeLeaf())


# ---------------------------------------------------------------------------
# second-level blocks


def bucket_codes(values: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
    """Index of the boundary interval each value falls in.

    Boundaries are sorted distinct predicate endpoints; bucket k holds values
    in [b_{k-1}, b_k), with open buckets below the first and above the last.
    """
    return np.searchsorted(boundaries, values, side="right").astype(np.int32)


def plan_block_spans(run_starts: np.ndarray, n_rows: int, min_avg: int) -> list[tuple[int, int]]:
    """Choose contiguous block spans from sorted runs.

    Runs at least min_avg rows long become their own blocks (split evenly when
    large); shorter runs are coalesced.  The result always keeps the average
    block size at or above min_avg so zone-map overhead stays bounded.
    """
    if n_rows == 0:
        return []
    bounds = list(run_starts) + [n_rows]
    spans: list[tuple[int, int]] = []
    buf_start = None
    for i in range(len(bounds) - 1):
        s, e = bounds[i], bounds[i + 1]
        if e - s >= min_avg:
            if buf_start is not None:
                spans.append((buf_start, s))
                buf_start = None
            spans.append((s, e))
        else:
            if buf_start is None:
                buf_start = s
            if e - buf_start >= min_avg:
                spans.append((buf_start, e))
                buf_start = None
    if buf_start is not None:
        spans.append((buf_start, n_rows))

    # coalesce undersized leftovers until the average is honored
    while len(spans) > 1 and n_rows / len(spans) < min_avg:
        sizes = [e - s for s, e in spans]
        best = min(range(len(spans) - 1), key=lambda i: (sizes[i] + sizes[i + 1], i))
        spans[best] = (spans[best][0], spans[best + 1][1])
        del spans[best + 1]

    # split oversized blocks while the average stays at or above min_avg
    budget = n_rows // min_avg - len(spans)
    if budget > 0:
        order = sorted(range(len(spans)), key=lambda i: (-(spans[i][1] - spans[i][0]), i))
        replacements: dict[int, list[tuple[int, int]]] = {}
        for i in order:
            if budget <= 0:
                break
            s, e = spans[i]
            k = min((e - s) // min_avg, budget + 1)
            if k < 2:
                continue
            edges = np.linspace(s, e, k + 1).astype(int)
            replacements[i] = [(int(edges[j]), int(edges[j + 1])) for j in range(k)]
            budget -= k - 1
        if replacements:
            out = []
            for i, span in enumerate(spans):
                out.extend(replacements.get(i, [span]))
            spans = out
    return spans


def cluster_rows(values: dict[str, np.ndarray], sort_attrs: list[str],
                 boundaries: dict[str, np.ndarray], min_avg: int,
                 n_rows: int):
    """Second-level clustering inside one partition.

    Rows are stably sorted by the bucket index of each routed attribute (most
    frequently filtered attribute first), then split into contiguous blocks.
    Returns (local order, block spans in the sorted frame).
    """
    if n_rows == 0:
        return np.empty(0, dtype=np.int64), []
    keys = []
    for a in sort_attrs:
        b = boundaries.get(a)
        if b is None or len(b) == 0:
            continue
        keys.append(bucket_codes(values[a], b))
    if not keys:
        order = np.arange(n_rows)
        return order, plan_block_spans(np.array([0]), n_rows, min_avg)
    order = np.lexsort(tuple(reversed(keys)))
    sorted_keys = np.stack([k[order] for k in keys], axis=1)
    changed = np.any(sorted_keys[1:] != sorted_keys[:-1], axis=1)
    run_starts = np.concatenate(([0], np.flatnonzero(changed) + 1))
    return order, plan_block_spans(run_starts, n_rows, min_avg)


# ---------------------------------------------------------------------------
# partitioned fact store


@dataclasses.dataclass
class Partition:
    pid: int
    start: int
    end: int
    block_starts: np.ndarray
    block_ends: np.ndarray
    zone_min: dict[str, np.ndarray]
    zone_max: dict[str, np.ndarray]
    bounds: dict[str, tuple[int, int]] = dataclasses.field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return self.end - self.start

    @property
    def n_blocks(self) -> int:
        return len(self.block_starts)

    def block_sizes(self) -> np.ndarray:
        return self.block_ends - self.block_starts


@dataclasses.dataclass
class FactStore:
    table: ColumnarTable
    partitions: list[Partition]
    tree: PartitionTree
    permutation: np.ndarray     # position in the reorganized table -> original row

    @property
    def n_rows(self) -> int:
        return self.table.n_rows


def build_fact_store(fact: ColumnarTable, tree: PartitionTree,
                     boundaries: dict[str, np.ndarray], sort_attrs: list[str],
                     min_avg: int) -> FactStore:
    """Route, cluster and zone-map the fact table.

    Deterministic: stable sorts everywhere, so feeding an already organized
    table back through yields the identity permutation.
    """
    n = fact.n_rows
    leaf_ids = tree.route(fact.columns, n)
    first_order = np.argsort(leaf_ids, kind="stable")
    sorted_leaf = leaf_ids[first_order]
    leaf_starts = np.searchsorted(sorted_leaf, np.arange(tree.n_leaves), side="left")
    leaf_ends = np.searchsorted(sorted_leaf, np.arange(tree.n_leaves), side="right")

    order = np.empty(n, dtype=np.int64)
    partitions: list[Partition] = []
    all_bounds = tree.leaf_bounds()
    zone_attrs = list(fact.columns)
    cursor = 0
    for pid in range(tree.n_leaves):
        rows = first_order[leaf_starts[pid]:leaf_ends[pid]]
        local_vals = {a: fact.columns[a][rows] for a in sort_attrs if a in fact.columns}
        local_order, spans = cluster_rows(local_vals, sort_attrs, boundaries, min_avg, len(rows))
        ordered_rows = rows[local_order] if len(rows) else rows
        order[cursor:cursor + len(rows)] = ordered_rows
        starts = np.array([cursor + s for s, _ in spans], dtype=np.int64)
        ends = np.array([cursor + e for _, e in spans], dtype=np.int64)
        partitions.append(Partition(pid, cursor, cursor + len(rows), starts, ends, {}, {},
                                    all_bounds[pid]))
        cursor += len(rows)
    if cursor != n:
        raise InternalError("partition routing lost rows: %d of %d placed" % (cursor, n))

    table = fact.take(order)
    for p in partitions:
        if p.n_blocks == 0:
            p.zone_min, p.zone_max = {}, {}
            continue
        local = {a: table.columns[a][p.start:p.end] for a in zone_attrs}
        mins, maxs = build_zone_maps(local, p.block_starts - p.start, zone_attrs)
        p.zone_min, p.zone_max = mins, maxs
    return FactStore(table, partitions, tree, order)


def reorganize(db: Database, tree: PartitionTree, boundaries: dict[str, np.ndarray],
               sort_attrs: list[str], min_avg: int) -> tuple[Database, FactStore]:
    """Physically reorder the fact table along the tree; dimensions are untouched."""
    store = build_fact_store(db.fact, tree, boundaries, sort_attrs, min_avg)
    return Database(db.schema, store.table, db.dims), store


# ---------------------------------------------------------------------------
# binary snapshots (little-endian, bit-exact for a fixed seed)


def _write_str(fh, s: str) -> None:
    raw = s.encode()
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<H", fh.read(2))
    return fh.read(n).decode()


def write_table(fh, table: ColumnarTable) -> None:
    _write_str(fh, table.name)
    fh.write(struct.pack("<II", table.n_rows, len(table.columns)))
    for name, arr in table.columns.items():
        _write_str(fh, name)
        fh.write(arr.astype("<i4").tobytes())


def read_table(fh) -> ColumnarTable:
    name = _read_str(fh)
    n_rows, n_cols = struct.unpack("<II", fh.read(8))
    cols = {}
    for _ in range(n_cols):
        cname = _read_str(fh)
        raw = fh.read(4 * n_rows)
        if len(raw) != 4 * n_rows:
            raise DataError("snapshot truncated in column %s of %s" % (cname, name))
        cols[cname] = np.frombuffer(raw, dtype="<i4").astype(np.int32)
    return ColumnarTable(name, cols)


def save_database(db: Database, path: str) -> None:
    buf = io.BytesIO()
    buf.write(SNAPSHOT_MAGIC)
    buf.write(struct.pack("<IQ", SNAPSHOT_VERSION, db.schema.schema_hash()))
    buf.write(struct.pack("<I", 1 + len(db.dims)))
    write_table(buf, db.fact)
    for d in db.schema.dims:
        write_table(buf, db.dims[d.name])
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_database(path: str, schema: Schema) -> Database:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SNAPSHOT_MAGIC:
            raise DataError("%s is not a database snapshot (bad magic)" % path)
        version, shash = struct.unpack("<IQ", fh.read(12))
        if version != SNAPSHOT_VERSION:
            raise DataError("snapshot version %d unsupported" % version)
        if shash != schema.schema_hash():
            raise DataError("snapshot %s does not match the workload schema" % path)
        (n_tables,) = struct.unpack("<I", fh.read(4))
        tables = [read_table(fh) for _ in range(n_tables)]
    fact = tables[0]
    dims = {t.name: t for t in tables[1:]}
    for d in schema.dims:
        if d.name not in dims:
            raise DataError("snapshot missing dimension table %r" % d.name)
    return Database(schema, fact, dims)
