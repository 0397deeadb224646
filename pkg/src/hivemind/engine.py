"""Embedded, partitioned, in-memory relational engine.

Serializable ACID transactions over hash-partitioned tables. Concurrency
follows the single-sited fast path: a single-partition transaction holds its
partition's mutex for its whole lifetime (transactions on one partition never
interleave), while a multi-partition transaction takes a global lock and then
every partition mutex in index order, excluding everything else. Writes are
buffered per transaction and applied atomically at commit, at which point the
transaction's change-data-capture buffer is published to the tracing layer
and to any synchronous commit listeners.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from . import schema as sch
from . import values
from .errors import (
    AlreadyTerminated,
    ArityMismatch,
    ConstraintViolation,
    DuplicateTable,
    EngineStopped,
    InvalidStatement,
    UnknownTable,
    WrongPartition,
)
from .tracing import TableEvent

ACTIVE = "active"
COMMITTED = "committed"
ABORTED = "aborted"

SINGLE = "single"
MULTI = "multi"

SYSTEM_PREFIX = "__"


@dataclass(frozen=True)
class CommitReceipt:
    commit_timestamp: values.Timestamp


class _Table:
    __slots__ = ("schema", "shards", "indexes", "pk_idx", "col_idx", "part_idx", "index_specs")

    def __init__(self, schema: sch.TableSchema, partition_count: int):
        self.schema = schema
        self.col_idx = {name: i for i, name in enumerate(schema.column_names)}
        self.pk_idx = tuple(self.col_idx[c] for c in schema.primary_key)
        self.part_idx = (
            None if schema.partition_column is None else self.col_idx[schema.partition_column]
        )
        shard_count = 1 if schema.replicated else partition_count
        self.shards = [{} for _ in range(shard_count)]
        # secondary indexes: per shard, per index, key tuple -> set of pks
        self.index_specs = [tuple(self.col_idx[c] for c in ix) for ix in schema.secondary_indexes]
        self.indexes = [[{} for _ in self.index_specs] for _ in range(shard_count)]

    def pk_of(self, row):
        return tuple(row[i] for i in self.pk_idx)

    def index_add(self, shard_no, pk, row):
        for spec, index in zip(self.index_specs, self.indexes[shard_no]):
            index.setdefault(tuple(row[i] for i in spec), set()).add(pk)

    def index_remove(self, shard_no, pk, row):
        for spec, index in zip(self.index_specs, self.indexes[shard_no]):
            key = tuple(row[i] for i in spec)
            bucket = index.get(key)
            if bucket is not None:
                bucket.discard(pk)
                if not bucket:
                    del index[key]


@dataclass
class _Plan:
    stmt: sch.PreparedStatement
    table: _Table
    param_count: int
    pred_idx: tuple  # column indices of predicate columns
    set_idx: tuple  # column indices of set-clause columns (update)
    proj: tuple  # (name, col index) pairs; projected columns then missing pks
    pred_is_full_pk: bool
    pred_part_pos: int | None  # position in predicate params of the partition column
    index_no: int | None  # chosen secondary index
    index_param_pos: tuple  # positions in predicate params forming that index key
    residual: tuple  # (col index, predicate param position) left after index lookup
    order_idx: int | None
    query_str: str


class TransactionContext:
    """State of one in-flight transaction. Confined to the thread running it."""

    __slots__ = (
        "txn_id",
        "mode",
        "partition",
        "status",
        "pending",
        "cdc_buffer",
        "_read_ordinals",
        "_write_seq",
    )

    def __init__(self, txn_id, mode, partition):
        self.txn_id = txn_id
        self.mode = mode
        self.partition = partition
        self.status = ACTIVE
        self.pending = []  # (op, table name, shard, pk, row, pre_row)
        self.cdc_buffer = []  # TableEvent drafts, stamped at commit
        self._read_ordinals = {}
        self._write_seq = 0

    def next_read_ordinal(self, statement_id):
        n = self._read_ordinals.get(statement_id, 0)
        self._read_ordinals[statement_id] = n + 1
        return n

    def next_write_seq(self):
        self._write_seq += 1
        return self._write_seq


class Engine:
    def __init__(self, partition_count: int = 8, tracer=None):
        if partition_count < 1:
            raise ValueError("partition_count must be >= 1")
        self.partition_count = partition_count
        self.tracer = tracer
        self._tables: dict[str, _Table] = {}
        self._plans: dict[str, _Plan] = {}
        self._partition_locks = [threading.Lock() for _ in range(partition_count)]
        self._global_lock = threading.Lock()
        self._meta_lock = threading.Lock()
        self._clock = 0
        self._txn_seq = 0
        self._stopped = False
        self._commit_listeners = []
        self.stats = {"app_statements": 0, "app_write_statements": 0, "commits": 0}

    # --- setup ---

    def create_table(self, schema: sch.TableSchema) -> None:
        with self._meta_lock:
            if schema.table_name in self._tables:
                raise DuplicateTable(schema.table_name)
            self._tables[schema.table_name] = _Table(schema, self.partition_count)

    def has_table(self, name) -> bool:
        return name in self._tables

    def add_commit_listener(self, fn) -> None:
        """fn(list of TableEvent) invoked synchronously inside each commit."""
        self._commit_listeners.append(fn)

    def stop(self) -> None:
        self._stopped = True

    def partition_for(self, value) -> int:
        return values.stable_hash(value) % self.partition_count

    def now(self) -> int:
        with self._meta_lock:
            self._clock += 1
            return self._clock

    # --- transactions ---

    def begin(self, mode, partition=None) -> TransactionContext:
        if self._stopped:
            raise EngineStopped()
        if mode == SINGLE:
            if partition is None or not 0 <= partition < self.partition_count:
                raise ValueError(f"bad partition index {partition}")
            self._partition_locks[partition].acquire()
        elif mode == MULTI:
            self._global_lock.acquire()
            for lock in self._partition_locks:
                lock.acquire()
        else:
            raise ValueError(f"bad mode {mode!r}")
        with self._meta_lock:
            self._txn_seq += 1
            txn_id = self._txn_seq
        return TransactionContext(txn_id, mode, partition)

    def _release(self, txn) -> None:
        if txn.mode == SINGLE:
            self._partition_locks[txn.partition].release()
        else:
            for lock in self._partition_locks:
                lock.release()
            self._global_lock.release()

    def commit(self, txn) -> CommitReceipt:
        if txn.status != ACTIVE:
            raise AlreadyTerminated(txn.status)
        ts = self.now()
        for op, table_name, shard_no, pk, row, pre_row in txn.pending:
            table = self._tables[table_name]
            shard = table.shards[shard_no]
            if op == "insert":
                shard[pk] = row
                table.index_add(shard_no, pk, row)
            elif op == "update":
                old = shard[pk]
                table.index_remove(shard_no, pk, old)
                shard[pk] = row
                table.index_add(shard_no, pk, row)
            else:  # delete
                old = shard.pop(pk)
                table.index_remove(shard_no, pk, old)
        events = None
        if txn.cdc_buffer:
            events = [
                TableEvent(
                    table=d.table,
                    func_id=d.func_id,
                    timestamp=ts,
                    event_type=d.event_type,
                    query=d.query,
                    record_data=d.record_data,
                    rec_id=d.rec_id,
                    statement_id=d.statement_id,
                    ordinal=d.ordinal,
                )
                for d in txn.cdc_buffer
            ]
            if self.tracer is not None:
                self.tracer.on_commit_writes(events)
            for listener in self._commit_listeners:
                listener(events)
        txn.status = COMMITTED
        txn.pending = []
        txn.cdc_buffer = []
        self.stats["commits"] += 1
        self._release(txn)
        return CommitReceipt(values.Timestamp(ts))

    def abort(self, txn) -> None:
        if txn.status != ACTIVE:
            raise AlreadyTerminated(txn.status)
        txn.status = ABORTED
        txn.pending = []
        txn.cdc_buffer = []
        self._release(txn)

    def _abort_for_error(self, txn, exc):
        self.abort(txn)
        raise exc

    def run(self, fn, partition=None):
        """Run fn(txn) in one transaction; commit on return, abort on raise."""
        mode = SINGLE if partition is not None else MULTI
        txn = self.begin(mode, partition)
        try:
            result = fn(txn)
        except Exception:
            if txn.status == ACTIVE:
                self.abort(txn)
            raise
        receipt = self.commit(txn)
        return result, receipt

    # --- statement execution ---

    def exec_query(self, txn, stmt, params, func_id=None):
        if txn.status != ACTIVE:
            raise AlreadyTerminated(txn.status)
        plan = self._plan_for(stmt)
        if len(params) != plan.param_count:
            raise ArityMismatch(
                f"{stmt.statement_id}: expected {plan.param_count} params, got {len(params)}"
            )
        if not stmt.target_table.startswith(SYSTEM_PREFIX):
            self.stats["app_statements"] += 1
            if not stmt.read_only:
                self.stats["app_write_statements"] += 1
        kind = stmt.kind
        if kind == sch.INSERT:
            return self._exec_insert(txn, plan, params, func_id)
        if kind == sch.UPDATE:
            return self._exec_update(txn, plan, params, func_id)
        if kind == sch.DELETE:
            return self._exec_delete(txn, plan, params, func_id)
        return self._exec_select(txn, plan, params, func_id)

    def _plan_for(self, stmt) -> _Plan:
        plan = self._plans.get(stmt.statement_id)
        if plan is not None and plan.stmt is stmt:
            return plan
        table = self._tables.get(stmt.target_table)
        if table is None:
            raise UnknownTable(stmt.target_table)
        schema = table.schema
        col_idx = table.col_idx
        for col in (*stmt.predicate, *stmt.set_clause):
            if col not in col_idx:
                raise InvalidStatement(f"{stmt.statement_id}: unknown column {col!r}")
        if stmt.kind == sch.UPDATE and set(stmt.set_clause) & set(schema.primary_key):
            raise InvalidStatement(f"{stmt.statement_id}: set_clause may not touch the key")
        if stmt.kind == sch.SELECT_BY_KEY and set(stmt.predicate) != set(schema.primary_key):
            raise InvalidStatement(
                f"{stmt.statement_id}: select_by_key must bind exactly the primary key"
            )
        for col in stmt.projected_columns:
            if col not in col_idx:
                raise InvalidStatement(f"{stmt.statement_id}: unknown column {col!r}")
        proj_names = list(stmt.projected_columns or schema.column_names)
        for key_col in schema.primary_key:  # result rows always carry the full key
            if key_col not in proj_names:
                proj_names.append(key_col)
        pred_set = set(stmt.predicate)
        index_no = None
        index_param_pos = ()
        best = -1
        for i, ix_cols in enumerate(schema.secondary_indexes):
            if set(ix_cols) <= pred_set and len(ix_cols) > best:
                index_no, best = i, len(ix_cols)
                index_param_pos = tuple(stmt.predicate.index(c) for c in ix_cols)
        indexed_cols = set(schema.secondary_indexes[index_no]) if index_no is not None else set()
        residual = tuple(
            (col_idx[c], pos)
            for pos, c in enumerate(stmt.predicate)
            if c not in indexed_cols
        )
        order_idx = None
        if stmt.order_by:
            if stmt.order_by[0] not in col_idx:
                raise InvalidStatement(f"{stmt.statement_id}: unknown column {stmt.order_by[0]!r}")
            order_idx = col_idx[stmt.order_by[0]]
        plan = _Plan(
            stmt=stmt,
            table=table,
            param_count=stmt.param_count(schema),
            pred_idx=tuple(col_idx[c] for c in stmt.predicate),
            set_idx=tuple(col_idx[c] for c in stmt.set_clause),
            proj=tuple((name, col_idx[name]) for name in proj_names),
            pred_is_full_pk=pred_set == set(schema.primary_key),
            pred_part_pos=(
                stmt.predicate.index(schema.partition_column)
                if schema.partition_column in pred_set
                else None
            ),
            index_no=index_no,
            index_param_pos=index_param_pos,
            residual=residual,
            order_idx=order_idx,
            query_str=stmt.render(schema),
        )
        self._plans[stmt.statement_id] = plan
        return plan

    def _shards_in_scope(self, txn, plan, pred_params, writing):
        """Resolve which shards this statement may touch, enforcing ownership."""
        table = plan.table
        if table.schema.replicated:
            if writing and txn.mode == SINGLE:
                self._abort_for_error(
                    txn,
                    WrongPartition(
                        f"{table.schema.table_name}: replicated-table writes require "
                        "a multi-partition transaction"
                    ),
                )
            return (0,)
        if plan.pred_part_pos is not None:
            owner = self.partition_for(pred_params[plan.pred_part_pos])
            if txn.mode == SINGLE and owner != txn.partition:
                self._abort_for_error(
                    txn,
                    WrongPartition(
                        f"{table.schema.table_name}: row owned by partition {owner}, "
                        f"transaction bound to {txn.partition}"
                    ),
                )
            return (owner,)
        if txn.mode == SINGLE:
            self._abort_for_error(
                txn,
                WrongPartition(
                    f"{table.schema.table_name}: statement does not bind the partition "
                    "column; would touch foreign rows"
                ),
            )
        return tuple(range(self.partition_count))

    def _overlay(self, txn, table_name):
        """Effective pending changes for one table: pk -> row or None (deleted)."""
        overlay = {}
        for op, tname, _shard, pk, row, _pre in txn.pending:
            if tname != table_name:
                continue
            overlay[pk] = None if op == "delete" else row
        return overlay

    def _candidate_rows(self, txn, plan, pred_params, shard_nos):
        """Matching (shard_no, pk, row) triples, read-your-writes included."""
        table = plan.table
        overlay = self._overlay(txn, table.schema.table_name)
        out = []
        if plan.pred_is_full_pk and None not in pred_params:
            by_col = dict(zip(plan.pred_idx, pred_params))
            pk = tuple(by_col[i] for i in table.pk_idx)
            for shard_no in shard_nos:
                if pk in overlay:
                    row = overlay[pk]
                    if row is not None:
                        out.append((shard_no, pk, row))
                else:
                    row = table.shards[shard_no].get(pk)
                    if row is not None:
                        out.append((shard_no, pk, row))
            return out

        def matches(row):
            if plan.stmt.kind == sch.SELECT_BY_KEY:
                pairs = zip(plan.pred_idx, pred_params)
                return all(row[i] == p for i, p in pairs)
            return all(
                values.values_equal(row[i], p) for i, p in zip(plan.pred_idx, pred_params)
            )

        for shard_no in shard_nos:
            shard = table.shards[shard_no]
            if plan.index_no is not None:
                key = tuple(pred_params[pos] for pos in plan.index_param_pos)
                if any(v is None for v in key):
                    pks = ()
                else:
                    pks = table.indexes[shard_no][plan.index_no].get(key, ())
                for pk in pks:
                    if pk in overlay:
                        continue
                    row = shard[pk]
                    if all(values.values_equal(row[i], pred_params[pos]) for i, pos in plan.residual):
                        out.append((shard_no, pk, row))
            else:
                for pk, row in shard.items():
                    if pk in overlay:
                        continue
                    if matches(row):
                        out.append((shard_no, pk, row))
        for pk, row in overlay.items():
            if row is None or not matches(row):
                continue
            shard_no = 0 if table.schema.replicated else self.partition_for(row[table.part_idx])
            if shard_no in shard_nos:
                out.append((shard_no, pk, row))
        return out

    def _sorted_rows(self, plan, triples):
        stmt = plan.stmt
        if len(triples) > 1:
            if plan.order_idx is not None:
                reverse = stmt.order_by[1] == "desc"
                triples.sort(
                    key=lambda t: (values.sort_key(t[2][plan.order_idx]),)
                    + tuple(values.sort_key(v) for v in t[1]),
                    reverse=reverse,
                )
            else:
                triples.sort(key=lambda t: tuple(values.sort_key(v) for v in t[1]))
        if stmt.limit is not None:
            triples = triples[: stmt.limit]
        return triples

    def _exec_select(self, txn, plan, params, func_id):
        shard_nos = self._shards_in_scope(txn, plan, params, writing=False)
        triples = self._sorted_rows(plan, self._candidate_rows(txn, plan, params, shard_nos))
        results = [{name: row[i] for name, i in plan.proj} for _, _, row in triples]
        if self.tracer is not None:
            ts = self.now()
            table = plan.table
            key_names = table.schema.primary_key
            for _, pk, _row in triples:
                rec_id = tuple(zip(key_names, pk))
                self.tracer.on_read(
                    TableEvent(
                        table=table.schema.table_name,
                        func_id=func_id,
                        timestamp=ts,
                        event_type="read",
                        query=plan.query_str,
                        record_data=rec_id,
                        rec_id=rec_id,
                        statement_id=plan.stmt.statement_id,
                        ordinal=txn.next_read_ordinal(plan.stmt.statement_id),
                    )
                )
        return results

    def _cdc_draft(self, txn, plan, event_type, pk, image, func_id):
        if plan.table.schema.table_name.startswith(SYSTEM_PREFIX):
            return
        names = plan.table.schema.column_names
        key_names = plan.table.schema.primary_key
        txn.cdc_buffer.append(
            TableEvent(
                table=plan.table.schema.table_name,
                func_id=func_id,
                timestamp=0,  # stamped with the commit timestamp
                event_type=event_type,
                query=plan.query_str,
                record_data=tuple(zip(names, image)),
                rec_id=tuple(zip(key_names, pk)),
                statement_id=plan.stmt.statement_id,
                ordinal=txn.next_write_seq(),
            )
        )

    def _check_variants(self, txn, plan, row):
        for (name, variant), value in zip(plan.table.schema.columns, row):
            if value is None:
                continue
            if values.kind_of(value) != variant:
                self._abort_for_error(
                    txn,
                    ConstraintViolation(
                        f"{plan.table.schema.table_name}.{name}: expected "
                        f"{sch.VARIANT_NAMES.get(variant)}, got {type(value).__name__}"
                    ),
                )

    def _exec_insert(self, txn, plan, params, func_id):
        table = plan.table
        row = tuple(params)
        self._check_variants(txn, plan, row)
        pk = table.pk_of(row)
        if table.schema.replicated:
            if txn.mode == SINGLE:
                self._abort_for_error(
                    txn,
                    WrongPartition(
                        f"{table.schema.table_name}: replicated-table writes require "
                        "a multi-partition transaction"
                    ),
                )
            shard_no = 0
        else:
            shard_no = self.partition_for(row[table.part_idx])
            if txn.mode == SINGLE and shard_no != txn.partition:
                self._abort_for_error(
                    txn,
                    WrongPartition(
                        f"{table.schema.table_name}: insert owned by partition {shard_no}, "
                        f"transaction bound to {txn.partition}"
                    ),
                )
        overlay = self._overlay(txn, table.schema.table_name)
        exists = overlay[pk] is not None if pk in overlay else pk in table.shards[shard_no]
        if exists:
            self._abort_for_error(
                txn, ConstraintViolation(f"{table.schema.table_name}: duplicate key {pk}")
            )
        txn.pending.append(("insert", table.schema.table_name, shard_no, pk, row, None))
        self._cdc_draft(txn, plan, "insert", pk, row, func_id)
        return []

    def _exec_update(self, txn, plan, params, func_id):
        set_params = params[: len(plan.set_idx)]
        pred_params = params[len(plan.set_idx) :]
        shard_nos = self._shards_in_scope(txn, plan, pred_params, writing=True)
        triples = self._candidate_rows(txn, plan, pred_params, shard_nos)
        results = []
        for shard_no, pk, row in triples:
            new_row = list(row)
            for i, value in zip(plan.set_idx, set_params):
                new_row[i] = value
            new_row = tuple(new_row)
            self._check_variants(txn, plan, new_row)
            txn.pending.append(("update", plan.table.schema.table_name, shard_no, pk, new_row, row))
            self._cdc_draft(txn, plan, "update", pk, new_row, func_id)
            results.append({name: new_row[i] for name, i in plan.proj})
        return results

    def _exec_delete(self, txn, plan, params, func_id):
        shard_nos = self._shards_in_scope(txn, plan, params, writing=True)
        triples = self._candidate_rows(txn, plan, params, shard_nos)
        results = []
        for shard_no, pk, row in triples:
            txn.pending.append(("delete", plan.table.schema.table_name, shard_no, pk, None, row))
            self._cdc_draft(txn, plan, "delete", pk, row, func_id)
            results.append({name: row[i] for name, i in plan.proj})
        return results

    # --- snapshot / restore / state comparison ---

    def snapshot(self) -> dict:
        """Byte-faithful copy of all committed state (quiesces the engine)."""
        txn = self.begin(MULTI)
        try:
            tables = {}
            for name, table in self._tables.items():
                tables[name] = {
                    "shards": [dict(shard) for shard in table.shards],
                    "indexes": [
                        [{k: set(v) for k, v in index.items()} for index in shard_ix]
                        for shard_ix in table.indexes
                    ],
                }
            return {
                "tables": tables,
                "schemas": {name: t.schema for name, t in self._tables.items()},
                "clock": self._clock,
                "txn_seq": self._txn_seq,
                "partition_count": self.partition_count,
            }
        finally:
            self.abort(txn)

    def restore(self, snap: dict) -> None:
        txn = self.begin(MULTI)
        try:
            for name, saved in snap["tables"].items():
                table = self._tables[name]
                table.shards = [dict(shard) for shard in saved["shards"]]
                table.indexes = [
                    [{k: set(v) for k, v in index.items()} for index in shard_ix]
                    for shard_ix in saved["indexes"]
                ]
            self._clock = snap["clock"]
            self._txn_seq = snap["txn_seq"]
        finally:
            self.abort(txn)

    @classmethod
    def from_snapshot(cls, snap: dict, tracer=None) -> "Engine":
        engine = cls(partition_count=snap["partition_count"], tracer=tracer)
        for schema in snap["schemas"].values():
            engine.create_table(schema)
        engine.restore(snap)
        return engine

    def state_bytes(self, include_system: bool = False) -> bytes:
        """Canonical serialization of committed table contents."""
        parts = []
        for name in sorted(self._tables):
            if not include_system and name.startswith(SYSTEM_PREFIX):
                continue
            table = self._tables[name]
            rows = []
            for shard in table.shards:
                rows.extend(shard.values())
            rows.sort(key=lambda r: tuple(values.sort_key(v) for v in table.pk_of(r)))
            parts.append(name.encode())
            parts.append(b"\x00")
            for row in rows:
                parts.append(values.encode_value(list(row)))
        return b"".join(parts)

    def table_rows(self, name):
        """All committed rows of a table, sorted by key (test/debug helper)."""
        table = self._tables[name]
        rows = []
        for shard in table.shards:
            rows.extend(shard.values())
        rows.sort(key=lambda r: tuple(values.sort_key(v) for v in table.pk_of(r)))
        return [dict(zip(table.schema.column_names, row)) for row in rows]
