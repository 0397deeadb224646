"""Trace capture, buffering, asynchronous export, and provenance queries.

Every function invocation and every read/write data operation becomes an
event. Events flow through a fixed-capacity ring buffer (drop-oldest on
overflow, optionally spilling to disk) and a background exporter appends
them, deduplicated, to newline-delimited JSON files: FunctionInvocations.jsonl
plus one TableEvents_<table>.jsonl per table. Queries run against those files.
"""

from __future__ import annotations

import json
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

from . import values
from .errors import NoHistory

READ = "read"
INSERT = "insert"
UPDATE = "update"
DELETE = "delete"


@dataclass(frozen=True)
class InvocationEvent:
    func_id: str
    timestamp: int
    function_name: str
    workflow_name: str
    workflow_id: str

    @property
    def dedup_key(self):
        return ("inv", self.func_id)

    def to_row(self):
        return {
            "func_id": self.func_id,
            "timestamp": self.timestamp,
            "function_name": self.function_name,
            "workflow_name": self.workflow_name,
            "workflow_id": self.workflow_id,
        }


@dataclass(frozen=True)
class TableEvent:
    table: str
    func_id: str | None
    timestamp: int
    event_type: str  # read | insert | update | delete
    query: str
    record_data: tuple  # ((column, value), ...): row image for writes, pk for reads
    rec_id: tuple  # ((column, value), ...): the row's primary key
    statement_id: str
    ordinal: int

    @property
    def dedup_key(self):
        return ("evt", self.func_id, self.statement_id, self.event_type, self.ordinal, self.rec_id)

    def to_row(self):
        return {
            "func_id": self.func_id,
            "timestamp": self.timestamp,
            "event_type": self.event_type,
            "query": self.query,
            "record_data": {col: values.to_wire(val) for col, val in self.record_data},
            "rec_id": {col: values.to_wire(val) for col, val in self.rec_id},
            "statement_id": self.statement_id,
            "ordinal": self.ordinal,
        }


class RingBuffer:
    """Fixed-capacity FIFO of events. Overflow drops the oldest entry and
    bumps a counter, unless a spill path is configured, in which case the
    oldest entries are appended to the spill file instead."""

    def __init__(self, capacity: int, spill_path=None):
        self.capacity = capacity
        self.dropped = 0
        self._items = deque()
        self._lock = threading.Lock()
        self._spill_path = Path(spill_path) if spill_path else None
        if self._spill_path:
            self._spill_path.write_text("")

    def __len__(self):
        return len(self._items)

    def push(self, event) -> None:
        with self._lock:
            if len(self._items) >= self.capacity:
                oldest = self._items.popleft()
                if self._spill_path is not None:
                    with self._spill_path.open("a") as fh:
                        fh.write(json.dumps(_spill_encode(oldest)) + "\n")
                else:
                    self.dropped += 1
            self._items.append(event)

    def push_many(self, events) -> None:
        for event in events:
            self.push(event)

    def drain(self, max_items=None):
        """Pop a consistent prefix of up to max_items events (spill first)."""
        out = []
        with self._lock:
            if self._spill_path is not None and self._spill_path.stat().st_size:
                raw = self._spill_path.read_text()
                self._spill_path.write_text("")
                out.extend(_spill_decode(json.loads(line)) for line in raw.splitlines())
            while self._items and (max_items is None or len(out) < max_items):
                out.append(self._items.popleft())
        return out


def _spill_encode(event):
    if isinstance(event, InvocationEvent):
        return {"kind": "inv", "row": event.to_row()}
    return {
        "kind": "tbl",
        "table": event.table,
        "row": event.to_row(),
    }


def _spill_decode(obj):
    row = obj["row"]
    if obj["kind"] == "inv":
        return InvocationEvent(**row)
    return TableEvent(
        table=obj["table"],
        func_id=row["func_id"],
        timestamp=row["timestamp"],
        event_type=row["event_type"],
        query=row["query"],
        record_data=tuple((c, values.from_wire(v)) for c, v in row["record_data"].items()),
        rec_id=tuple((c, values.from_wire(v)) for c, v in row["rec_id"].items()),
        statement_id=row["statement_id"],
        ordinal=row["ordinal"],
    )


class Tracer:
    """Capture facade handed to the engine and dispatcher.

    Reads and invocations are enqueued immediately (reads even if their
    transaction later aborts; such rows are identifiable by the absence of a
    commit-side write for the transaction). Writes arrive via the engine's
    change-data-capture hook, atomically with commit, so aborted transactions
    never publish write events.
    """

    def __init__(self, capacity=65536, spill_path=None):
        self.buffer = RingBuffer(capacity, spill_path=spill_path)

    def on_invocation(self, event: InvocationEvent) -> None:
        self.buffer.push(event)

    def on_read(self, event: TableEvent) -> None:
        self.buffer.push(event)

    def on_commit_writes(self, events) -> None:
        self.buffer.push_many(events)


class Exporter:
    """Background drain of the ring buffer into the analytical sink.

    Flushes every `flush_period` seconds or as soon as `batch_size` events
    are available. Re-executions are deduplicated here using the events'
    shared identifiers. Sink I/O errors keep the batch and retry with
    backoff while the buffer continues absorbing events.
    """

    def __init__(self, tracer: Tracer, sink_dir, batch_size=8192, flush_period=0.1):
        self.tracer = tracer
        self.sink = TraceSink(sink_dir)
        self.batch_size = batch_size
        self.flush_period = flush_period
        self._seen = set()
        self._paused = threading.Event()
        self._stop = threading.Event()
        self._wake = threading.Event()
        self._pending = []
        self._thread = None
        self.batches_written = 0

    def start(self):
        self._thread = threading.Thread(target=self._loop, name="trace-exporter", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        self._wake.set()
        if self._thread:
            self._thread.join()

    def pause(self):
        self._paused.set()

    def resume(self):
        self._paused.clear()
        self._wake.set()

    def flush(self):
        """Synchronously drain everything currently buffered (test hook)."""
        self._export_once(drain_all=True)

    def _loop(self):
        while not self._stop.is_set():
            self._wake.wait(timeout=self.flush_period)
            self._wake.clear()
            if self._paused.is_set():
                continue
            self._export_once()
        self._export_once(drain_all=True)

    def _export_once(self, drain_all=False):
        while True:
            batch = self._pending or self.tracer.buffer.drain(
                None if drain_all else self.batch_size
            )
            if not batch:
                return
            self._pending = batch
            rows = []
            for event in batch:
                key = event.dedup_key
                if key in self._seen:
                    continue
                self._seen.add(key)
                rows.append(event)
            try:
                self.sink.append(rows)
            except OSError:
                for event in rows:  # not written; allow the retry to re-emit
                    self._seen.discard(event.dedup_key)
                time.sleep(self.flush_period)
                continue
            self._pending = []
            self.batches_written += 1
            if not drain_all and len(batch) < self.batch_size:
                return


class TraceSink:
    """Append-only JSONL files, one per trace table."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def append(self, events) -> None:
        grouped = {}
        for event in events:
            if isinstance(event, InvocationEvent):
                grouped.setdefault("FunctionInvocations.jsonl", []).append(event.to_row())
            else:
                grouped.setdefault(f"TableEvents_{event.table}.jsonl", []).append(event.to_row())
        for filename, rows in grouped.items():
            with (self.directory / filename).open("a") as fh:
                for row in rows:
                    fh.write(json.dumps(row) + "\n")

    def invocations(self):
        return self._load("FunctionInvocations.jsonl")

    def table_events(self, table):
        rows = self._load(f"TableEvents_{table}.jsonl")
        for row in rows:
            row["record_data"] = {
                col: values.from_wire(val) for col, val in row["record_data"].items()
            }
            row["rec_id"] = {col: values.from_wire(val) for col, val in row["rec_id"].items()}
        return rows

    def event_tables(self):
        prefix, suffix = "TableEvents_", ".jsonl"
        return [
            p.name[len(prefix) : -len(suffix)]
            for p in sorted(self.directory.glob(f"{prefix}*{suffix}"))
        ]

    def _load(self, filename):
        path = self.directory / filename
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text().splitlines() if line]


class Tombstone:
    """Answer for a record whose last event at the probe time is a delete."""

    def __repr__(self):
        return "<tombstone>"


TOMBSTONE = Tombstone()


class TraceQuery:
    """Read-side provenance queries over an exported sink directory."""

    def __init__(self, sink: TraceSink):
        self.sink = sink

    def record_state(self, table, key: dict, ts: int):
        """Last write image of `key` at or before `ts` (delete => tombstone)."""
        key_items = sorted(key.items())
        best = None
        for row in self.sink.table_events(table):
            if row["event_type"] == READ:
                continue
            if row["timestamp"] > ts:
                continue
            if sorted(row["rec_id"].items()) != key_items:
                continue
            if best is None or row["timestamp"] > best["timestamp"]:
                best = row
        if best is None:
            raise NoHistory(f"no event for {key} in {table} at or before {ts}")
        if best["event_type"] == DELETE:
            return TOMBSTONE
        return dict(best["record_data"])

    def downstream(self, table, key: dict, successor_functions):
        """Records written by the named functions within workflows that read `key`."""
        key_items = sorted(key.items())
        reader_func_ids = set()
        for row in self.sink.table_events(table):
            if row["event_type"] != READ:
                continue
            if sorted(row["rec_id"].items()) == key_items:
                reader_func_ids.add(row["func_id"])
        func_meta = {row["func_id"]: row for row in self.sink.invocations()}
        workflow_ids = {
            func_meta[f]["workflow_id"] for f in reader_func_ids if f in func_meta
        }
        successor_ids = {
            f
            for f, meta in func_meta.items()
            if meta["workflow_id"] in workflow_ids
            and meta["function_name"] in set(successor_functions)
        }
        written = set()
        for evt_table in self.sink.event_tables():
            for row in self.sink.table_events(evt_table):
                if row["event_type"] in (INSERT, UPDATE) and row["func_id"] in successor_ids:
                    written.add((evt_table, tuple(sorted(row["rec_id"].items()))))
        return written
