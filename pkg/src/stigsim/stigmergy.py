"""Replicated key-value tables with Lamport-clock versioning.

Each robot holds a local replica of every table it created; replicas
synchronize by broadcasting put records and resolving conflicts with a
(lamport, writer) total order. Higher lamport wins; on equal clocks the
higher writer id wins. Adoption never bumps the clock, so clocks stay
comparable across replicas.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

MAX_TEXT_KEY_BYTES = 15
MAX_TEXT_VALUE_BYTES = 32
MAX_INT_KEY = 0xFFFF
MAX_LAMPORT = 0xFFFF
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1

# Wire accounting (bytes); encoding itself is never materialized.
_RECORD_TAG = 1
_TABLE_ID = 1
_LAMPORT = 2
_WRITER = 2

StigKey = int | str
StigValue = int | float | str


class RecordSizeError(ValueError):
    """Key or value exceeds its wire-size cap."""


def _check_key(key: StigKey) -> None:
    if isinstance(key, bool) or not isinstance(key, (int, str)):
        raise TypeError(f"key must be int or str, got {type(key).__name__}")
    if isinstance(key, int):
        if not 0 <= key <= MAX_INT_KEY:
            raise RecordSizeError(f"integer key {key} outside 16-bit range")
    else:
        n = len(key.encode("utf-8"))
        if n == 0:
            raise RecordSizeError("text key must be non-empty")
        if n > MAX_TEXT_KEY_BYTES:
            raise RecordSizeError(f"text key is {n} B, cap {MAX_TEXT_KEY_BYTES} B")


def _check_value(value: StigValue) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise TypeError(f"value must be int, float or str, got {type(value).__name__}")
    if isinstance(value, int) and not INT32_MIN <= value <= INT32_MAX:
        raise RecordSizeError(f"integer value {value} outside 32-bit range")
    if isinstance(value, str):
        n = len(value.encode("utf-8"))
        if n > MAX_TEXT_VALUE_BYTES:
            raise RecordSizeError(f"text value is {n} B, cap {MAX_TEXT_VALUE_BYTES} B")


def key_bytes(key: StigKey) -> int:
    """1 B type tag + 2 B for int keys, or 1 B length + payload for text."""
    if isinstance(key, int):
        return 1 + 2
    return 1 + len(key.encode("utf-8"))


def value_bytes(value: StigValue) -> int:
    if isinstance(value, bool):
        raise TypeError("bool is not a table value")
    if isinstance(value, int):
        return 1 + 4
    if isinstance(value, float):
        return 1 + 8
    return 1 + len(value.encode("utf-8"))


@dataclass(frozen=True)
class StigEntry:
    """One versioned key binding: value plus (lamport, writer) metadata."""

    key: StigKey
    value: StigValue
    lamport: int
    writer: int


@dataclass(frozen=True)
class PutRecord:
    """Broadcast carrier for a table entry (new write or re-send)."""

    table_id: int
    entry: StigEntry

    @property
    def size_bytes(self) -> int:
        e = self.entry
        return (_RECORD_TAG + _TABLE_ID + key_bytes(e.key) + value_bytes(e.value)
                + _LAMPORT + _WRITER)


@dataclass(frozen=True)
class QueryRecord:
    """Broadcast probe for a key; holders with a newer version respond."""

    table_id: int
    key: StigKey
    lamport: int = 0

    @property
    def size_bytes(self) -> int:
        return _RECORD_TAG + _TABLE_ID + key_bytes(self.key) + _LAMPORT


class PutDecision(enum.Enum):
    ADOPT_AND_REBROADCAST = "adopt"
    IGNORE = "ignore"
    RESPOND_WITH_LOCAL = "respond"


class StigTable:
    """Local replica of one shared table, addressed by an 8-bit id."""

    __slots__ = ("table_id", "entries")

    def __init__(self, table_id: int):
        if not 0 <= table_id <= 0xFF:
            raise ValueError(f"table id {table_id} outside 8-bit range")
        self.table_id = table_id
        self.entries: dict[StigKey, StigEntry] = {}

    def __repr__(self):
        return f"StigTable(id={self.table_id}, size={len(self.entries)})"


def vstig_create(table_id: int) -> StigTable:
    """New empty replica. Replicas created with equal ids gossip together."""
    return StigTable(table_id)


def vstig_put(table: StigTable, key: StigKey, value: StigValue,
              self_id: int) -> tuple[StigEntry, PutRecord]:
    """Local write: bump the key's clock past the latest version seen here.

    Returns the new entry plus the record to queue for broadcast.
    Raises RecordSizeError for oversized keys/values.
    """
    _check_key(key)
    _check_value(value)
    prev = table.entries.get(key)
    lamport = 1 if prev is None else prev.lamport + 1
    if lamport > MAX_LAMPORT:
        raise RecordSizeError(f"lamport clock for {key!r} exceeded 16-bit range")
    entry = StigEntry(key, value, lamport, self_id)
    table.entries[key] = entry
    return entry, PutRecord(table.table_id, entry)


def vstig_get(table: StigTable, key: StigKey
              ) -> tuple[StigValue | None, QueryRecord | None]:
    """Local read. A miss returns no value and a query to queue, so any
    peer holding the key will answer with its entry."""
    entry = table.entries.get(key)
    if entry is not None:
        return entry.value, None
    return None, QueryRecord(table.table_id, key, 0)


def _wins(incoming: StigEntry, local: StigEntry) -> bool:
    return (incoming.lamport, incoming.writer) > (local.lamport, local.writer)


def vstig_on_put(table: StigTable, incoming: StigEntry) -> PutDecision:
    """Merge a received entry; pure in (local entry, incoming entry).

    ADOPT_AND_REBROADCAST: incoming is strictly newer (or key unknown);
    the entry replaces the local one verbatim, clock untouched.
    IGNORE: same (lamport, writer) version, a duplicate.
    RESPOND_WITH_LOCAL: incoming is stale; caller should re-send the
    local entry to correct the peer.
    """
    local = table.entries.get(incoming.key)
    if local is None or _wins(incoming, local):
        table.entries[incoming.key] = incoming
        return PutDecision.ADOPT_AND_REBROADCAST
    if (incoming.lamport, incoming.writer) == (local.lamport, local.writer):
        return PutDecision.IGNORE
    return PutDecision.RESPOND_WITH_LOCAL


def vstig_on_query(table: StigTable, query: QueryRecord) -> PutRecord | None:
    """Answer a peer's probe when we hold something newer."""
    local = table.entries.get(query.key)
    if local is not None and local.lamport > query.lamport:
        return PutRecord(table.table_id, local)
    return None


def vstig_size(table: StigTable) -> int:
    """Number of distinct keys materialized in this replica."""
    return len(table.entries)


def resend_record(table: StigTable, key: StigKey) -> PutRecord | None:
    """Re-broadcast the current local entry without bumping its clock.

    Idempotent at receivers (duplicates are IGNOREd); used to keep a
    contested entry circulating under heavy packet loss.
    """
    entry = table.entries.get(key)
    if entry is None:
        return None
    return PutRecord(table.table_id, entry)
