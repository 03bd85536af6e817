"""Storage contract and the two embedded backends.

Constraint semantics (primary-key and unique-tuple enforcement, foreign-key
resolution, one-root-per-master, address delete disabled) live in
``BaseStorage`` so both backends behave identically by construction; the
backends only supply raw get/put/delete/iterate primitives. All mutation is
serialized under one lock, which is what makes check-and-insert atomic.
"""

from __future__ import annotations

import json
import sqlite3
import threading
from typing import Any, Iterable, Iterator, Optional

from .errors import (
    ConstraintViolation,
    ForeignKeyViolation,
    OperationDisabled,
    UnknownRecord,
)
from .model import TABLES, TableSchema


def _key_of(schema: TableSchema, record: dict) -> Any:
    pk = schema.primary_key
    if isinstance(pk, tuple):
        return tuple(record[f] for f in pk)
    return record[pk]


def _constraint_name(fields) -> str:
    if isinstance(fields, tuple):
        return "(" + ", ".join(fields) + ")"
    return fields


def _copy_record(value: Any) -> Any:
    """Copy of a JSON-shaped record; cheaper than copy.deepcopy on the
    decision hot path."""
    if isinstance(value, dict):
        return {k: _copy_record(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_copy_record(v) for v in value]
    return value


class BaseStorage:
    """Shared constraint logic; subclasses provide the raw primitives."""

    def __init__(self):
        self._lock = threading.RLock()

    # -- raw primitives (per-table key/value) --------------------------------

    def _raw_get(self, table: str, key: Any) -> Optional[dict]:
        raise NotImplementedError

    def _raw_put(self, table: str, key: Any, record: dict) -> None:
        raise NotImplementedError

    def _raw_delete(self, table: str, key: Any) -> None:
        raise NotImplementedError

    def _raw_iter(self, table: str) -> Iterator[dict]:
        raise NotImplementedError

    def _raw_clear(self, table: str) -> None:
        raise NotImplementedError

    # -- contract -------------------------------------------------------------

    def insert(self, table: str, record: dict) -> Any:
        """Atomic check-and-insert. Returns the primary key.

        Raises ConstraintViolation naming the violated constraint, or
        ForeignKeyViolation for a dangling reference.
        """
        schema = self._schema(table)
        record = _copy_record(record)
        with self._lock:
            self._check_foreign_keys(schema, record)
            key = _key_of(schema, record)
            if self._raw_get(table, key) is not None:
                raise ConstraintViolation(_constraint_name(schema.primary_key))
            self._check_unique(schema, record, exclude_key=None)
            if table == "user" and record.get("is_root"):
                self._check_single_root(record["master_id"])
            self._raw_put(table, key, record)
            return key

    def get(self, table: str, key: Any) -> Optional[dict]:
        self._schema(table)
        with self._lock:
            found = self._raw_get(table, key)
            return _copy_record(found) if found is not None else None

    def update(self, table: str, key: Any, fields: dict) -> dict:
        schema = self._schema(table)
        with self._lock:
            current = self._raw_get(table, key)
            if current is None:
                raise UnknownRecord(f"{table}[{key}]")
            candidate = dict(current, **_copy_record(fields))
            if _key_of(schema, candidate) != _key_of(schema, current):
                raise ConstraintViolation(_constraint_name(schema.primary_key),
                                          "primary key is immutable")
            self._check_foreign_keys(schema, candidate)
            self._check_unique(schema, candidate, exclude_key=key)
            if table == "user" and candidate.get("is_root") and not current.get("is_root"):
                self._check_single_root(candidate["master_id"])
            self._raw_put(table, key, candidate)
            return _copy_record(candidate)

    def delete(self, table: str, key: Any) -> None:
        schema = self._schema(table)
        if schema.delete_disabled:
            raise OperationDisabled(f"delete is disabled for table {table}")
        with self._lock:
            if self._raw_get(table, key) is None:
                raise UnknownRecord(f"{table}[{key}]")
            self._raw_delete(table, key)

    def find(self, table: str, **equals) -> list[dict]:
        self._schema(table)
        with self._lock:
            return [_copy_record(r) for r in self._raw_iter(table)
                    if all(r.get(f) == v for f, v in equals.items())]

    def find_one(self, table: str, **equals) -> Optional[dict]:
        rows = self.find(table, **equals)
        return rows[0] if rows else None

    def count(self, table: str, **equals) -> int:
        return len(self.find(table, **equals))

    def all(self, table: str) -> list[dict]:
        return self.find(table)

    def replace_table(self, table: str, records: Iterable[dict]) -> int:
        """Atomically swap a table's full contents (catalog loads)."""
        schema = self._schema(table)
        records = [_copy_record(r) for r in records]
        with self._lock:
            staged: dict[Any, dict] = {}
            seen_unique: dict[tuple, set] = {u: set() for u in schema.unique}
            for record in records:
                key = _key_of(schema, record)
                if key in staged:
                    raise ConstraintViolation(_constraint_name(schema.primary_key))
                for fields in schema.unique:
                    value = (tuple(record.get(f) for f in fields)
                             if isinstance(fields, tuple) else record.get(fields))
                    if value in seen_unique[fields]:
                        raise ConstraintViolation(_constraint_name(fields))
                    seen_unique[fields].add(value)
                staged[key] = record
            self._raw_clear(table)
            for key, record in staged.items():
                self._raw_put(table, key, record)
            return len(staged)

    def dump_bytes(self) -> bytes:
        """Every persisted byte, for confidentiality scans."""
        raise NotImplementedError

    def close(self) -> None:
        pass

    # -- constraint checks ----------------------------------------------------

    def _schema(self, table: str) -> TableSchema:
        try:
            return TABLES[table]
        except KeyError:
            raise UnknownRecord(f"no such table: {table}") from None

    def _check_unique(self, schema: TableSchema, record: dict,
                      exclude_key: Any) -> None:
        for fields in schema.unique:
            if isinstance(fields, tuple):
                value = tuple(record.get(f) for f in fields)
                clash = any(
                    tuple(r.get(f) for f in fields) == value
                    for r in self._raw_iter(schema.name)
                    if _key_of(schema, r) != exclude_key
                )
            else:
                value = record.get(fields)
                clash = any(
                    r.get(fields) == value
                    for r in self._raw_iter(schema.name)
                    if _key_of(schema, r) != exclude_key
                )
            if clash:
                raise ConstraintViolation(_constraint_name(fields))

    def _check_foreign_keys(self, schema: TableSchema, record: dict) -> None:
        for fk in schema.foreign_keys:
            value = record.get(fk.field)
            if value is None:
                if fk.nullable:
                    continue
                raise ForeignKeyViolation(schema.name, fk.field)
            if self._raw_get(fk.references, value) is None:
                raise ForeignKeyViolation(schema.name, fk.field)

    def _check_single_root(self, master_id: str) -> None:
        for r in self._raw_iter("user"):
            if r.get("master_id") == master_id and r.get("is_root"):
                raise ConstraintViolation("root_user_per_master")


class MemoryStorage(BaseStorage):
    """In-memory backend; the reference semantics used throughout the tests."""

    def __init__(self):
        super().__init__()
        self._tables: dict[str, dict[Any, dict]] = {name: {} for name in TABLES}

    def _raw_get(self, table, key):
        return self._tables[table].get(key)

    def _raw_put(self, table, key, record):
        self._tables[table][key] = record

    def _raw_delete(self, table, key):
        del self._tables[table][key]

    def _raw_iter(self, table):
        return iter(list(self._tables[table].values()))

    def _raw_clear(self, table):
        self._tables[table].clear()

    def dump_bytes(self) -> bytes:
        with self._lock:
            tables = {name: list(rows.values())
                      for name, rows in self._tables.items()}
            return json.dumps(tables, sort_keys=True, default=str).encode()


class SqliteStorage(BaseStorage):
    """SQLite-backed document store; durable variant with the same semantics.

    Records are JSON documents keyed by their (possibly composite) primary
    key; constraint checks run in BaseStorage under the storage lock, so
    the single connection never sees concurrent use.
    """

    def __init__(self, path: str):
        super().__init__()
        self._path = path
        self._conn = sqlite3.connect(path, check_same_thread=False)
        self._conn.execute("PRAGMA journal_mode=DELETE")
        for name in TABLES:
            self._conn.execute(
                f'CREATE TABLE IF NOT EXISTS "t_{name}" (k TEXT PRIMARY KEY, v TEXT NOT NULL)'
            )
        self._conn.commit()

    @staticmethod
    def _encode_key(key: Any) -> str:
        return json.dumps(key) if isinstance(key, (tuple, list)) else json.dumps([key])

    def _raw_get(self, table, key):
        row = self._conn.execute(
            f'SELECT v FROM "t_{table}" WHERE k = ?', (self._encode_key(key),)
        ).fetchone()
        return json.loads(row[0]) if row else None

    def _raw_put(self, table, key, record):
        self._conn.execute(
            f'INSERT OR REPLACE INTO "t_{table}" (k, v) VALUES (?, ?)',
            (self._encode_key(key), json.dumps(record)),
        )
        self._conn.commit()

    def _raw_delete(self, table, key):
        self._conn.execute(
            f'DELETE FROM "t_{table}" WHERE k = ?', (self._encode_key(key),)
        )
        self._conn.commit()

    def _raw_iter(self, table):
        rows = self._conn.execute(f'SELECT v FROM "t_{table}"').fetchall()
        return iter([json.loads(r[0]) for r in rows])

    def _raw_clear(self, table):
        self._conn.execute(f'DELETE FROM "t_{table}"')
        self._conn.commit()

    def dump_bytes(self) -> bytes:
        with self._lock:
            self._conn.commit()
            with open(self._path, "rb") as f:
                return f.read()

    def close(self) -> None:
        self._conn.close()


def open_storage(path: Optional[str]) -> BaseStorage:
    """Memory store for ``None`` or ":memory:", SQLite otherwise."""
    if path in (None, ":memory:"):
        return MemoryStorage()
    return SqliteStorage(path)
