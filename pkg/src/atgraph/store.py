"""Append-only CSV tables with in-memory dedupe indexes.

Each table lives in ``<data_dir>/<name>.csv`` (UTF-8, LF, header row, RFC 4180
quoting). Every appended row gets an ``ingested_at`` stamp.
"""

from __future__ import annotations

import csv
import io
import os
import threading
from dataclasses import dataclass
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .records import (
    BlockRow,
    FollowRow,
    LinkRow,
    MentionRow,
    PostRow,
    RepostRow,
    Row,
    TagRow,
    UserRow,
    format_timestamp,
    parse_timestamp,
    row_date,
)


class StoreError(Exception):
    pass


class SchemaError(StoreError):
    """A batch did not match the table's row type; nothing was written."""


class CorruptTableError(StoreError):
    def __init__(self, path: Path, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


@dataclass(frozen=True)
class TableSpec:
    name: str
    row_type: type
    # (column name, row attribute, kind) where kind is str | opt | ts | optts
    fields: tuple[tuple[str, str, str], ...]
    unique_key: tuple[str, ...]

    @property
    def columns(self) -> list[str]:
        return [col for col, _, _ in self.fields] + ["ingested_at"]

    def key(self, row: Row) -> tuple:
        return tuple(getattr(row, attr) for attr in self.unique_key)

    def encode(self, row: Row) -> list[str]:
        out = []
        for _, attr, kind in self.fields:
            value = getattr(row, attr)
            if value is None:
                out.append("")
            elif kind in ("ts", "optts"):
                out.append(format_timestamp(value))
            else:
                out.append(value)
        return out

    def decode(self, cells: Sequence[str]) -> Row:
        kwargs: dict[str, Any] = {}
        for cell, (_, attr, kind) in zip(cells, self.fields):
            if kind == "str":
                kwargs[attr] = cell
            elif kind == "opt":
                kwargs[attr] = cell or None
            elif kind == "ts":
                kwargs[attr] = parse_timestamp(cell)
            else:
                kwargs[attr] = parse_timestamp(cell) if cell else None
        return self.row_type(**kwargs)


TABLES: dict[str, TableSpec] = {
    spec.name: spec
    for spec in (
        TableSpec(
            "blocks",
            BlockRow,
            (("blocker_did", "blocker", "str"), ("subject_did", "subject", "str"),
             ("rkey", "rkey", "str"), ("created_at", "created_at", "ts")),
            ("blocker", "rkey"),
        ),
        TableSpec(
            "follows",
            FollowRow,
            (("follower_did", "follower", "str"), ("subject_did", "subject", "str"),
             ("rkey", "rkey", "str"), ("created_at", "created_at", "ts")),
            ("follower", "rkey"),
        ),
        TableSpec(
            "users",
            UserRow,
            (("did", "did", "str"), ("handle", "handle", "str"),
             ("display_name", "display_name", "opt"), ("description", "description", "opt"),
             ("avatar_url", "avatar_url", "opt"), ("profile_created_at", "profile_created_at", "optts")),
            ("did",),
        ),
        TableSpec(
            "posts",
            PostRow,
            (("author_did", "author", "str"), ("rkey", "rkey", "str"), ("text", "text", "str"),
             ("created_at", "created_at", "ts"), ("reply_parent_uri", "reply_parent_uri", "opt")),
            ("author", "rkey"),
        ),
        TableSpec(
            "reposts",
            RepostRow,
            (("reposter_did", "reposter", "str"), ("subject_uri", "subject_uri", "str"),
             ("subject_cid", "subject_cid", "str"), ("rkey", "rkey", "str"),
             ("created_at", "created_at", "ts")),
            ("reposter", "rkey"),
        ),
        TableSpec(
            "tags",
            TagRow,
            (("author_did", "author", "str"), ("post_rkey", "post_rkey", "str"), ("tag", "tag", "str")),
            ("author", "post_rkey", "tag"),
        ),
        TableSpec(
            "links",
            LinkRow,
            (("author_did", "author", "str"), ("post_rkey", "post_rkey", "str"), ("uri", "uri", "str")),
            ("author", "post_rkey", "uri"),
        ),
        TableSpec(
            "mentions",
            MentionRow,
            (("author_did", "author", "str"), ("post_rkey", "post_rkey", "str"),
             ("mentioned_did", "mentioned", "str")),
            ("author", "post_rkey", "mentioned"),
        ),
    )
}

TABLE_FOR_ROW = {spec.row_type: spec.name for spec in TABLES.values()}


def default_clock() -> datetime:
    """Current UTC time, or the fixed instant in ``SOURCE_DATE_EPOCH`` when set."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        return datetime.fromtimestamp(int(epoch), tz=timezone.utc)
    return datetime.now(timezone.utc)


def _csv_line(cells: Sequence[str]) -> str:
    # Writing with CRLF makes the csv module quote any cell holding a bare CR;
    # only the row terminator itself is then narrowed to LF.
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\r\n").writerow(cells)
    return buf.getvalue()[:-2] + "\n"


class DatasetStore:
    """The eight-table dataset rooted at ``data_dir``.

    Writes to one table are serialized by a per-table lock; the dedupe index
    for a table is rebuilt from its file the first time the table is touched.
    """

    def __init__(self, data_dir: str | os.PathLike, clock: Callable[[], datetime] = default_clock):
        self.data_dir = Path(data_dir)
        self._clock = clock
        self._last_stamp: datetime | None = None
        self._stamp_lock = threading.Lock()
        self._locks = {name: threading.Lock() for name in TABLES}
        self._keys: dict[str, set[tuple]] = {}

    def path(self, table: str) -> Path:
        return self.data_dir / f"{_spec(table).name}.csv"

    def _stamp(self) -> str:
        with self._stamp_lock:
            now = self._clock()
            if self._last_stamp is not None and now < self._last_stamp:
                now = self._last_stamp
            self._last_stamp = now
        return format_timestamp(now)

    def _index(self, spec: TableSpec) -> set[tuple]:
        keys = self._keys.get(spec.name)
        if keys is None:
            keys = {spec.key(row) for row, _ in self._scan(spec)}
            self._keys[spec.name] = keys
        return keys

    def append_rows(self, table: str, rows: Iterable[Row]) -> int:
        """Append rows whose unique key is new; returns how many were written."""
        spec = _spec(table)
        rows = list(rows)
        bad = [r for r in rows if type(r) is not spec.row_type]
        if bad:
            raise SchemaError(f"{spec.name} expects {spec.row_type.__name__}, got {type(bad[0]).__name__}")
        with self._locks[spec.name]:
            keys = self._index(spec)
            fresh = []
            seen: set[tuple] = set()
            for row in rows:
                key = spec.key(row)
                if key in keys or key in seen:
                    continue
                seen.add(key)
                fresh.append(row)
            if not fresh:
                return 0
            stamp = self._stamp()
            path = self.path(spec.name)
            chunk = "".join(_csv_line(spec.encode(r) + [stamp]) for r in fresh)
            self.data_dir.mkdir(parents=True, exist_ok=True)
            new_file = not path.exists() or path.stat().st_size == 0
            with open(path, "a", encoding="utf-8", newline="") as fh:
                if new_file:
                    fh.write(_csv_line(spec.columns))
                fh.write(chunk)
            keys.update(seen)
            return len(fresh)

    def ensure_table(self, table: str) -> None:
        """Create the table file with only its header if it does not exist."""
        spec = _spec(table)
        path = self.path(spec.name)
        with self._locks[spec.name]:
            if not path.exists():
                self.data_dir.mkdir(parents=True, exist_ok=True)
                path.write_text(_csv_line(spec.columns), encoding="utf-8")

    def _scan(self, spec: TableSpec) -> Iterable[tuple[Row, str]]:
        path = self.path(spec.name)
        if not path.exists():
            return
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh, strict=True)
            try:
                for index, cells in enumerate(reader):
                    line = reader.line_num
                    if index == 0:
                        if cells != spec.columns:
                            raise CorruptTableError(path, line, f"unexpected header {cells!r}")
                        continue
                    if len(cells) != len(spec.columns):
                        raise CorruptTableError(path, line, f"expected {len(spec.columns)} fields, got {len(cells)}")
                    try:
                        yield spec.decode(cells[:-1]), cells[-1]
                    except (TypeError, ValueError) as exc:
                        raise CorruptTableError(path, line, str(exc)) from exc
            except csv.Error as exc:
                raise CorruptTableError(path, reader.line_num, str(exc)) from exc

    def read_rows(self, table: str, since: date | None = None, until: date | None = None) -> list[Row]:
        """Rows in file order, optionally limited to creation dates in ``[since, until]``.

        Rows without a creation timestamp (sub-tables, users lacking a profile
        date) are dropped whenever a bound is given.
        """
        spec = _spec(table)
        out = []
        for row, _ in self._scan(spec):
            if since is not None or until is not None:
                day = row_date(row)
                if day is None or (since is not None and day < since) or (until is not None and day > until):
                    continue
            out.append(row)
        return out

    def read_stamps(self, table: str) -> list[str]:
        return [stamp for _, stamp in self._scan(_spec(table))]

    def count(self, table: str) -> int:
        spec = _spec(table)
        with self._locks[spec.name]:
            return len(self._index(spec))


def _spec(table: str) -> TableSpec:
    try:
        return TABLES[table]
    except KeyError:
        raise StoreError(f"unknown table {table!r}") from None
