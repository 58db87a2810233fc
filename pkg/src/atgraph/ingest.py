"""Crawl orchestration: enumerate repos, page through collections, checkpoint.

Repositories are crawled in parallel by a thread pool; within one
(repo, collection) chain pages are fetched sequentially because each request
needs the previous cursor. Rows and checkpoints are flushed every
``flush_every`` pages and whenever a collection completes, so a crash costs
at most that many pages of re-fetching. The store's dedupe keys make the
re-fetched rows harmless.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

from .records import (
    DUPLICATE,
    TABLE_FOR_COLLECTION,
    ParseBatch,
    Row,
    build_user,
    parse_records,
)
from .store import DatasetStore
from .xrpc_client import (
    COLLECTIONS,
    LIST_RECORDS_MAX,
    LIST_REPOS_MAX,
    PROFILE,
    Did,
    RawRecord,
    RepoNotFoundError,
    XrpcClient,
    XrpcError,
    iter_pages,
    validate_did,
)

LOGGER = logging.getLogger(__name__)

RECORD_TABLES = ("blocks", "follows", "posts", "reposts")


class CheckpointError(ValueError):
    def __init__(self, path: Path, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


@dataclass(frozen=True)
class Checkpoint:
    did: Did
    collection: str
    cursor: str | None = None
    completed: bool = False

    def __post_init__(self) -> None:
        if self.completed and self.cursor is not None:
            raise ValueError("a completed checkpoint carries no cursor")

    def to_json(self) -> dict:
        return {"did": self.did, "collection": self.collection, "cursor": self.cursor, "completed": self.completed}


def save_checkpoints(path: str | Path, checkpoints: Iterable[Checkpoint]) -> None:
    """Write one JSON object per line, replacing the file atomically."""
    path = Path(path)
    lines = [json.dumps(cp.to_json(), ensure_ascii=False) + "\n" for cp in checkpoints]
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)
    os.replace(tmp, path)


def load_checkpoints(path: str | Path) -> list[Checkpoint]:
    """Read a checkpoint file; a missing file is an empty set, a bad line is an error."""
    path = Path(path)
    if not path.exists():
        return []
    out: list[Checkpoint] = []
    seen: set[tuple[str, str]] = set()
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                cp = Checkpoint(
                    did=validate_did(obj["did"]),
                    collection=obj["collection"],
                    cursor=obj["cursor"],
                    completed=obj["completed"],
                )
                if not isinstance(cp.completed, bool) or cp.collection not in COLLECTIONS:
                    raise ValueError("bad completed flag or collection")
                if cp.cursor is not None and (not isinstance(cp.cursor, str) or not cp.cursor):
                    raise ValueError("cursor must be a non-empty string or null")
            except (ValueError, KeyError, TypeError) as exc:
                raise CheckpointError(path, lineno, str(exc)) from exc
            if (cp.did, cp.collection) in seen:
                raise CheckpointError(path, lineno, f"second checkpoint for {cp.did} {cp.collection}")
            seen.add((cp.did, cp.collection))
            out.append(cp)
    return out


class CheckpointBook:
    """Thread-safe checkpoint set with an optional backing file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._items: dict[tuple[str, str], Checkpoint] = {}
        if self.path is not None:
            for cp in load_checkpoints(self.path):
                self._items[(cp.did, cp.collection)] = cp

    def get(self, did: Did, collection: str) -> Checkpoint | None:
        with self._lock:
            return self._items.get((did, collection))

    def record(self, cp: Checkpoint, flush: bool = True) -> None:
        with self._lock:
            self._items[(cp.did, cp.collection)] = cp
            if flush and self.path is not None:
                save_checkpoints(self.path, self._items.values())

    def flush(self) -> None:
        with self._lock:
            if self.path is not None:
                save_checkpoints(self.path, self._items.values())

    def all(self) -> list[Checkpoint]:
        with self._lock:
            return list(self._items.values())


@dataclass(frozen=True)
class CrawlConfig:
    collections: tuple[str, ...] = COLLECTIONS
    max_repos: int | None = None
    worker_count: int = 4
    checkpoint_path: Path | None = None
    since: date | None = None
    until: date | None = None
    page_limit: int = LIST_RECORDS_MAX
    repos_page_limit: int = LIST_REPOS_MAX
    flush_every: int = 10

    def __post_init__(self) -> None:
        unknown = set(self.collections) - set(COLLECTIONS)
        if unknown:
            raise ValueError(f"unknown collections: {sorted(unknown)}")
        if not self.collections:
            raise ValueError("at least one collection is required")
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if self.max_repos is not None and self.max_repos < 1:
            raise ValueError("max_repos must be >= 1")
        if self.since and self.until and self.since > self.until:
            raise ValueError("since must not be after until")
        if self.flush_every < 1:
            raise ValueError("flush_every must be >= 1")


@dataclass
class CrawlSummary:
    repos_seen: int = 0
    repos_completed: int = 0
    unreachable: int = 0
    failed: int = 0
    rows_per_table: Counter = field(default_factory=Counter)
    skipped_records: Counter = field(default_factory=Counter)
    skipped_facets: int = 0
    wall_time: float = 0.0

    def record_rows(self) -> int:
        return sum(self.rows_per_table[t] for t in RECORD_TABLES)

    def format(self) -> str:
        lines = [
            f"repos seen:       {self.repos_seen}",
            f"repos completed:  {self.repos_completed}",
            f"unreachable:      {self.unreachable}",
            f"failed:           {self.failed}",
            f"new rows:         {sum(self.rows_per_table.values())}",
        ]
        for table in ("blocks", "follows", "users", "posts", "reposts", "tags", "links", "mentions"):
            lines.append(f"  {table:<9} {self.rows_per_table[table]}")
        lines.append(f"skipped records:  {sum(self.skipped_records.values())}")
        for reason, n in sorted(self.skipped_records.items()):
            lines.append(f"  {reason:<15} {n}")
        lines.append(f"skipped facets:   {self.skipped_facets}")
        lines.append(f"wall time:        {self.wall_time:.2f}s")
        return "\n".join(lines)


def enumerate_repos(client: XrpcClient, max_repos: int | None = None, limit: int = LIST_REPOS_MAX) -> Iterator[Did]:
    """DIDs in relay order, stopping after ``max_repos`` when given."""
    if max_repos is not None and max_repos <= 0:
        return
    n = 0
    cursor = None
    while True:
        want = limit if max_repos is None else min(limit, max_repos - n)
        page = client.list_repos(cursor, want)
        for head in page.items:
            yield head.did
            n += 1
            if max_repos is not None and n >= max_repos:
                return
        if page.next_cursor is None:
            return
        cursor = page.next_cursor


@dataclass
class RepoResult:
    """Outcome of :func:`crawl_repo`. ``tables`` is filled only without a sink."""

    did: Did
    unreachable: bool = False
    completed: bool = False
    tables: dict[str, list[Row]] = field(default_factory=dict)
    skips: Counter = field(default_factory=Counter)
    facet_skips: int = 0


# sink(table -> rows, checkpoint) persists a flush unit; returns rows appended per table
Sink = Callable[[dict[str, list[Row]], Checkpoint], dict[str, int]]


def _batch_tables(collection: str, batch: ParseBatch) -> dict[str, list[Row]]:
    tables = {TABLE_FOR_COLLECTION[collection]: list(batch.rows)}
    if batch.tags or batch.links or batch.mentions:
        tables.update(tags=list(batch.tags), links=list(batch.links), mentions=list(batch.mentions))
    return tables


def crawl_repo(
    client: XrpcClient,
    did: Did,
    collections: Sequence[str] = COLLECTIONS,
    *,
    checkpoints: CheckpointBook | None = None,
    sink: Sink | None = None,
    since: date | None = None,
    until: date | None = None,
    page_limit: int = LIST_RECORDS_MAX,
    flush_every: int = 10,
) -> RepoResult:
    """Fetch and parse every requested collection of one repository.

    Previously completed collections (per ``checkpoints``) are skipped and
    partially crawled ones resume from their saved cursor. A repository the
    server does not know is reported as unreachable with no rows.
    """
    result = RepoResult(did)
    book = checkpoints or CheckpointBook()
    todo = [c for c in collections if not ((cp := book.get(did, c)) and cp.completed)]
    if not todo:
        result.completed = True
        return result
    try:
        desc = client.describe_repo(did)
    except RepoNotFoundError:
        result.unreachable = True
        return result

    def flush(tables: dict[str, list[Row]], cp: Checkpoint) -> None:
        if sink is not None:
            sink(tables, cp)
        else:
            for name, rows in tables.items():
                result.tables.setdefault(name, []).extend(rows)
        book.record(cp, flush=False)

    for collection in todo:
        cp = book.get(did, collection)
        cursor = cp.cursor if cp else None
        pending: dict[str, list[Row]] = {}
        profiles: list[RawRecord] = []
        pages = 0
        resume_cursor = cursor
        try:
            fetch = lambda c, _col=collection: client.list_records(did, _col, c, page_limit)  # noqa: E731
            for _, page in iter_pages(fetch, cursor):
                if collection == PROFILE:
                    profiles.extend(page.items)
                else:
                    batch = parse_records(collection, page.items, since, until)
                    result.skips.update(batch.skip_counts)
                    result.facet_skips += batch.facet_skips
                    for name, rows in _batch_tables(collection, batch).items():
                        pending.setdefault(name, []).extend(rows)
                pages += 1
                resume_cursor = page.next_cursor
                if page.next_cursor is not None and pages % flush_every == 0 and collection != PROFILE:
                    flush(pending, Checkpoint(did, collection, page.next_cursor, False))
                    pending = {}
        except BaseException:
            if pending:
                flush(pending, Checkpoint(did, collection, resume_cursor, False))
            raise
        if collection == PROFILE:
            own = [r for r in profiles if r.uri.endswith("/self")] or profiles
            pending = {"users": [build_user(desc, own[0] if own else None, client.config.pds_base_url)]}
        flush(pending, Checkpoint(did, collection, None, True))
    result.completed = True
    return result


def run_crawl(
    config: CrawlConfig,
    client: XrpcClient,
    store: DatasetStore,
    dids: Iterable[Did] | None = None,
) -> CrawlSummary:
    """Crawl every repository (or the given ``dids``) into ``store``.

    Checkpoints are loaded from and saved to ``config.checkpoint_path``.
    Per-repo XRPC failures are counted and the crawl moves on; any other
    exception stops the run after checkpoints are flushed.
    """
    started = time.monotonic()
    book = CheckpointBook(config.checkpoint_path)
    summary = CrawlSummary()
    lock = threading.Lock()
    stop = threading.Event()
    fatal: list[BaseException] = []
    for table in TABLE_FOR_COLLECTION.values():
        store.ensure_table(table)
    if "app.bsky.feed.post" in config.collections:
        for table in ("tags", "links", "mentions"):
            store.ensure_table(table)

    def sink(tables: dict[str, list[Row]], cp: Checkpoint) -> dict[str, int]:
        appended = {}
        for name, rows in tables.items():
            n = store.append_rows(name, rows)
            appended[name] = n
            with lock:
                summary.rows_per_table[name] += n
                if name in RECORD_TABLES and len(rows) > n:
                    summary.skipped_records[DUPLICATE] += len(rows) - n
        book.record(cp)
        return appended

    def work(did: Did) -> None:
        if stop.is_set():
            return
        try:
            res = crawl_repo(
                client, did, config.collections,
                checkpoints=book, sink=sink, since=config.since, until=config.until,
                page_limit=config.page_limit, flush_every=config.flush_every,
            )
        except XrpcError as exc:
            LOGGER.warning("crawl of %s failed: %s", did, exc)
            with lock:
                summary.failed += 1
            return
        except BaseException as exc:
            with lock:
                fatal.append(exc)
            stop.set()
            raise
        with lock:
            summary.skipped_records.update(res.skips)
            summary.skipped_facets += res.facet_skips
            if res.unreachable:
                summary.unreachable += 1
            elif res.completed:
                summary.repos_completed += 1

    source = dids if dids is not None else enumerate_repos(client, config.max_repos, config.repos_page_limit)
    slots = threading.BoundedSemaphore(config.worker_count * 2)
    try:
        with ThreadPoolExecutor(max_workers=config.worker_count, thread_name_prefix="crawl") as pool:
            for did in source:
                if stop.is_set():
                    break
                summary.repos_seen += 1
                slots.acquire()
                if stop.is_set():
                    slots.release()
                    break
                pool.submit(work, did).add_done_callback(lambda _: slots.release())
    finally:
        book.flush()
        summary.wall_time = time.monotonic() - started
    if fatal:
        raise fatal[0]
    return summary
