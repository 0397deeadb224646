"""Table schemas and prepared-statement descriptors.

There is no SQL parser: statements are built as structured descriptors with
positional placeholders, and each carries a human-readable SQL-like string
used by the tracing layer's `query` field.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from . import values
from .errors import InvalidSchema, InvalidStatement

SELECT_BY_KEY = "select_by_key"
SELECT_BY_PREDICATE = "select_by_predicate"
INSERT = "insert"
UPDATE = "update"
DELETE = "delete"

_READ_KINDS = frozenset({SELECT_BY_KEY, SELECT_BY_PREDICATE})
_WRITE_KINDS = frozenset({INSERT, UPDATE, DELETE})

_statement_seq = itertools.count(1)


@dataclass(frozen=True)
class TableSchema:
    table_name: str
    columns: tuple  # of (name, variant tag) pairs, in storage order
    primary_key: tuple  # ordered subset of column names, non-empty
    partition_column: str | None = None  # None => replicated to every partition
    secondary_indexes: tuple = ()  # of column-name tuples

    def __post_init__(self):
        names = [name for name, _ in self.columns]
        if len(set(names)) != len(names):
            raise InvalidSchema(f"{self.table_name}: duplicate column names")
        if not self.primary_key:
            raise InvalidSchema(f"{self.table_name}: empty primary key")
        for col in self.primary_key:
            if col not in names:
                raise InvalidSchema(f"{self.table_name}: unknown key column {col!r}")
        if self.partition_column is not None and self.partition_column not in self.primary_key:
            raise InvalidSchema(
                f"{self.table_name}: partition column {self.partition_column!r} "
                "must be part of the primary key"
            )
        for index in self.secondary_indexes:
            for col in index:
                if col not in names:
                    raise InvalidSchema(f"{self.table_name}: unknown index column {col!r}")

    @property
    def column_names(self):
        return tuple(name for name, _ in self.columns)

    @property
    def replicated(self) -> bool:
        return self.partition_column is None


def table(name, columns, primary_key, partition=None, indexes=()):
    """Shorthand constructor; columns is a list of (name, variant) pairs."""
    return TableSchema(
        table_name=name,
        columns=tuple(columns),
        primary_key=tuple(primary_key),
        partition_column=partition,
        secondary_indexes=tuple(tuple(ix) for ix in indexes),
    )


@dataclass(frozen=True)
class PreparedStatement:
    """One statically declared statement with positional placeholders.

    Parameter order: Update consumes set_clause placeholders first, then
    predicate placeholders (SQL `SET ... WHERE ...` order). Insert consumes
    one value per table column, in schema order.
    """

    kind: str
    target_table: str
    statement_id: str = ""
    projected_columns: tuple = ()  # empty => all columns
    predicate: tuple = ()  # column names, each an equality against a placeholder
    order_by: tuple | None = None  # (column, "asc"|"desc")
    limit: int | None = None
    set_clause: tuple = ()  # Update only: column names assigned from placeholders
    statement_index: int = field(default_factory=lambda: next(_statement_seq))

    def __post_init__(self):
        if self.kind not in _READ_KINDS | _WRITE_KINDS:
            raise InvalidStatement(f"bad statement kind {self.kind!r}")
        if self.limit is not None and self.limit <= 0:
            raise InvalidStatement("limit must be positive")
        if self.set_clause and self.kind != UPDATE:
            raise InvalidStatement("set_clause is only valid for update statements")
        if self.kind == UPDATE and not self.set_clause:
            raise InvalidStatement("update requires a set_clause")
        if not self.statement_id:
            object.__setattr__(
                self, "statement_id", f"{self.target_table}:{self.kind}:{self.statement_index}"
            )

    @property
    def read_only(self) -> bool:
        return self.kind in _READ_KINDS

    def param_count(self, schema: TableSchema) -> int:
        if self.kind == INSERT:
            return len(schema.columns)
        return len(self.set_clause) + len(self.predicate)

    def render(self, schema: TableSchema) -> str:
        """Human-readable SQL-like text, stored in trace events."""
        if self.kind == INSERT:
            marks = ", ".join("?" for _ in schema.columns)
            return f"INSERT INTO {self.target_table} VALUES ({marks})"
        where = ""
        if self.predicate:
            where = " WHERE " + " AND ".join(f"{col}=?" for col in self.predicate)
        if self.kind == UPDATE:
            sets = ", ".join(f"{col}=?" for col in self.set_clause)
            return f"UPDATE {self.target_table} SET {sets}{where}"
        if self.kind == DELETE:
            return f"DELETE FROM {self.target_table}{where}"
        cols = ", ".join(self.projected_columns) if self.projected_columns else "*"
        tail = ""
        if self.order_by:
            tail += f" ORDER BY {self.order_by[0]} {self.order_by[1].upper()}"
        if self.limit is not None:
            tail += f" LIMIT {self.limit}"
        return f"SELECT {cols} FROM {self.target_table}{where}{tail}"


def select_by_key(table_name, key_columns, projected=()):
    return PreparedStatement(
        kind=SELECT_BY_KEY,
        target_table=table_name,
        projected_columns=tuple(projected),
        predicate=tuple(key_columns),
    )


def select_where(table_name, predicate_columns, projected=(), order_by=None, limit=None):
    return PreparedStatement(
        kind=SELECT_BY_PREDICATE,
        target_table=table_name,
        projected_columns=tuple(projected),
        predicate=tuple(predicate_columns),
        order_by=tuple(order_by) if order_by else None,
        limit=limit,
    )


def insert_into(table_name):
    return PreparedStatement(kind=INSERT, target_table=table_name)


def update_where(table_name, set_columns, predicate_columns):
    return PreparedStatement(
        kind=UPDATE,
        target_table=table_name,
        set_clause=tuple(set_columns),
        predicate=tuple(predicate_columns),
    )


def delete_where(table_name, predicate_columns):
    return PreparedStatement(
        kind=DELETE,
        target_table=table_name,
        predicate=tuple(predicate_columns),
    )


VARIANT_NAMES = {
    values.INT64: "int64",
    values.FLOAT64: "float64",
    values.TEXT: "text",
    values.BOOL: "bool",
    values.TIMESTAMP: "timestamp",
}
VARIANTS_BY_NAME = {name: tag for tag, name in VARIANT_NAMES.items()}
