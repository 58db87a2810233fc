"""Read-only XRPC client for AT Protocol relays and PDS hosts.

Covers the three unauthenticated routes needed to enumerate repositories and
pull their records: ``com.atproto.sync.listRepos``,
``com.atproto.repo.describeRepo`` and ``com.atproto.repo.listRecords``.
"""

from __future__ import annotations

import logging
import random
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Generic, Iterator, TypeVar
from urllib.parse import urlsplit

import httpx

LOGGER = logging.getLogger(__name__)

LIST_REPOS_MAX = 1000
LIST_RECORDS_MAX = 100

BLOCK = "app.bsky.graph.block"
FOLLOW = "app.bsky.graph.follow"
POST = "app.bsky.feed.post"
REPOST = "app.bsky.feed.repost"
PROFILE = "app.bsky.actor.profile"
COLLECTIONS = (BLOCK, FOLLOW, POST, REPOST, PROFILE)

RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})
NOT_FOUND_ERRORS = frozenset({"RepoNotFound", "RepoDeactivated", "RepoTakendown", "RepoSuspended"})

_DID_RE = re.compile(r"^did:[a-z]+:[A-Za-z0-9._:%-]*[A-Za-z0-9._-]$")

Did = str
T = TypeVar("T")


def is_did(value: object) -> bool:
    return isinstance(value, str) and len(value) <= 2048 and _DID_RE.match(value) is not None


def validate_did(value: object) -> Did:
    if not is_did(value):
        raise ValueError(f"not a DID: {value!r}")
    return value  # type: ignore[return-value]


class XrpcError(Exception):
    """Base class for failed XRPC calls."""


class TransportError(XrpcError):
    """Network-level failure (timeout, refused connection) after retries."""


class ProtocolError(XrpcError):
    """The server answered with a non-2xx status or an unusable body."""

    def __init__(self, status_code: int, body: str, error: str | None = None):
        self.status_code = status_code
        self.body = body
        self.error = error
        super().__init__(f"HTTP {status_code}: {body[:200]}")


class RepoNotFoundError(ProtocolError):
    """describeRepo/listRecords named a repository the server does not host."""


@dataclass(frozen=True)
class PagedResponse(Generic[T]):
    items: list[T]
    next_cursor: str | None = None


@dataclass(frozen=True)
class RepoHead:
    did: Did
    head: str | None = None
    rev: str | None = None
    active: bool | None = None


@dataclass(frozen=True)
class RepoDescription:
    did: Did
    handle: str
    collections: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class RawRecord:
    """One entry of a listRecords page. ``value`` is kept as the server sent it."""

    uri: str
    cid: str
    value: dict[str, Any]

    @property
    def repo(self) -> str:
        return _split_at_uri(self.uri)[0]

    @property
    def collection(self) -> str:
        return _split_at_uri(self.uri)[1]

    @property
    def rkey(self) -> str:
        return _split_at_uri(self.uri)[2]

    @classmethod
    def from_json(cls, obj: Any) -> "RawRecord":
        if not isinstance(obj, dict):
            raise ValueError("record entry is not an object")
        uri, cid, value = obj.get("uri"), obj.get("cid", ""), obj.get("value")
        if not isinstance(uri, str) or not isinstance(value, dict):
            raise ValueError("record entry lacks uri/value")
        return cls(uri=uri, cid=cid if isinstance(cid, str) else "", value=value)

    def to_json(self) -> dict[str, Any]:
        return {"uri": self.uri, "cid": self.cid, "value": self.value}


def _split_at_uri(uri: str) -> tuple[str, str, str]:
    if not uri.startswith("at://"):
        raise ValueError(f"not an AT-URI: {uri!r}")
    parts = uri[len("at://"):].split("/")
    if len(parts) != 3 or not all(parts):
        raise ValueError(f"AT-URI is not at://repo/collection/rkey: {uri!r}")
    return parts[0], parts[1], parts[2]


@dataclass(frozen=True)
class ClientConfig:
    relay_base_url: str = "https://bsky.network"
    pds_base_url: str = "https://bsky.social"
    max_requests_per_second: float = 10.0
    max_retries: int = 5
    backoff_base: float = 0.5
    backoff_max: float = 30.0
    request_timeout: float = 30.0

    def __post_init__(self) -> None:
        for name in ("relay_base_url", "pds_base_url"):
            parts = urlsplit(getattr(self, name))
            if parts.scheme not in ("http", "https") or not parts.netloc:
                raise ValueError(f"{name} must be an absolute http(s) URL")
        if not self.max_requests_per_second > 0:
            raise ValueError("max_requests_per_second must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.backoff_base < 0 or self.backoff_max < 0:
            raise ValueError("backoff durations must be >= 0")
        if not self.request_timeout > 0:
            raise ValueError("request_timeout must be > 0")


class RateLimiter:
    """Token bucket with a single-token burst, shared between threads.

    Each ``acquire`` reserves the next free slot under the lock and sleeps
    outside it, so callers are released at least ``1/rate`` seconds apart.
    """

    def __init__(
        self,
        rate: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not rate > 0:
            raise ValueError("rate must be > 0")
        self.interval = 1.0 / rate
        self._clock = clock
        self._sleep = sleep
        self._next = float("-inf")
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a request may go out; returns the release time."""
        with self._lock:
            now = self._clock()
            slot = max(now, self._next)
            self._next = slot + self.interval
        if slot > now:
            self._sleep(slot - now)
        return slot


class XrpcClient:
    """Synchronous XRPC client; one instance may be shared by worker threads."""

    def __init__(
        self,
        config: ClientConfig | None = None,
        *,
        http: httpx.Client | None = None,
        rng: random.Random | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config or ClientConfig()
        self._http = http or httpx.Client(
            timeout=self.config.request_timeout,
            headers={"User-Agent": "atgraph/0.1", "Accept": "application/json"},
        )
        self._owns_http = http is None
        self._limiter = RateLimiter(self.config.max_requests_per_second, sleep=sleep)
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()
        self._sleep = sleep
        self._count_lock = threading.Lock()
        self.requests_made = 0
        self.retries_made = 0

    def __enter__(self) -> "XrpcClient":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def close(self) -> None:
        if self._owns_http:
            self._http.close()

    # -- transport -------------------------------------------------------

    def _backoff(self, attempt: int, retry_after: float | None) -> float:
        cap = min(self.config.backoff_max, self.config.backoff_base * (2**attempt))
        with self._rng_lock:
            delay = self._rng.uniform(0.0, cap)
        if retry_after is not None:
            delay = max(delay, min(retry_after, self.config.backoff_max))
        return delay

    def _get(self, base_url: str, nsid: str, params: dict[str, Any]) -> dict[str, Any]:
        url = f"{base_url.rstrip('/')}/xrpc/{nsid}"
        query = {k: v for k, v in params.items() if v is not None}
        attempt = 0
        while True:
            self._limiter.acquire()
            with self._count_lock:
                self.requests_made += 1
            retry_after = None
            try:
                resp = self._http.get(url, params=query)
            except httpx.TransportError as exc:
                failure: XrpcError = TransportError(f"{nsid}: {exc!r}")
                failure.__cause__ = exc
            else:
                if 200 <= resp.status_code < 300:
                    try:
                        body = resp.json()
                    except ValueError as exc:
                        raise ProtocolError(resp.status_code, resp.text, "InvalidJSON") from exc
                    if not isinstance(body, dict):
                        raise ProtocolError(resp.status_code, resp.text, "InvalidBody")
                    return body
                failure = _status_error(resp)
                if resp.status_code not in RETRYABLE_STATUSES:
                    raise failure
                retry_after = _retry_after(resp.headers.get("Retry-After"))
            if attempt >= self.config.max_retries:
                raise failure
            delay = self._backoff(attempt, retry_after)
            LOGGER.debug("retrying %s after %s (attempt %d, %.3fs)", nsid, failure, attempt + 1, delay)
            with self._count_lock:
                self.retries_made += 1
            self._sleep(delay)
            attempt += 1

    # -- routes ----------------------------------------------------------

    def list_repos(self, cursor: str | None = None, limit: int = LIST_REPOS_MAX) -> PagedResponse[RepoHead]:
        _check_limit(limit, LIST_REPOS_MAX)
        body = self._get(
            self.config.relay_base_url,
            "com.atproto.sync.listRepos",
            {"limit": limit, "cursor": cursor},
        )
        repos = body.get("repos", [])
        if not isinstance(repos, list):
            raise ProtocolError(200, str(body)[:200], "InvalidBody")
        heads = []
        for entry in repos:
            if not isinstance(entry, dict) or not is_did(entry.get("did")):
                raise ProtocolError(200, str(entry)[:200], "InvalidRepoEntry")
            heads.append(RepoHead(did=entry["did"], head=entry.get("head"), rev=entry.get("rev"), active=entry.get("active")))
        return PagedResponse(heads, _next_cursor(body, cursor))

    def describe_repo(self, did: Did) -> RepoDescription:
        validate_did(did)
        body = self._get(self.config.pds_base_url, "com.atproto.repo.describeRepo", {"repo": did})
        collections = body.get("collections", [])
        return RepoDescription(
            did=body.get("did", did),
            handle=body.get("handle", ""),
            collections=[c for c in collections if isinstance(c, str)] if isinstance(collections, list) else [],
        )

    def list_records(
        self,
        did: Did,
        collection: str,
        cursor: str | None = None,
        limit: int = LIST_RECORDS_MAX,
    ) -> PagedResponse[RawRecord]:
        validate_did(did)
        if collection not in COLLECTIONS:
            raise ValueError(f"unsupported collection {collection!r}")
        _check_limit(limit, LIST_RECORDS_MAX)
        body = self._get(
            self.config.pds_base_url,
            "com.atproto.repo.listRecords",
            {"repo": did, "collection": collection, "limit": limit, "cursor": cursor},
        )
        entries = body.get("records", [])
        if not isinstance(entries, list):
            raise ProtocolError(200, str(body)[:200], "InvalidBody")
        records = []
        for entry in entries:
            try:
                records.append(RawRecord.from_json(entry))
            except ValueError as exc:
                raise ProtocolError(200, str(entry)[:200], "InvalidRecordEntry") from exc
        return PagedResponse(records, _next_cursor(body, cursor))

    def iter_repos(self, limit: int = LIST_REPOS_MAX) -> Iterator[RepoHead]:
        return paginate(lambda cursor: self.list_repos(cursor, limit))

    def iter_records(self, did: Did, collection: str, limit: int = LIST_RECORDS_MAX) -> Iterator[RawRecord]:
        return paginate(lambda cursor: self.list_records(did, collection, cursor, limit))


def iter_pages(
    fetch_one_page: Callable[[str | None], PagedResponse[T]],
    cursor: str | None = None,
) -> Iterator[tuple[str | None, PagedResponse[T]]]:
    """Yield ``(cursor_sent, page)`` pairs until a page arrives without a cursor."""
    while True:
        page = fetch_one_page(cursor)
        yield cursor, page
        if page.next_cursor is None:
            return
        cursor = page.next_cursor


def paginate(fetch_one_page: Callable[[str | None], PagedResponse[T]]) -> Iterator[T]:
    for _, page in iter_pages(fetch_one_page):
        yield from page.items


def _next_cursor(body: dict[str, Any], sent: str | None) -> str | None:
    cursor = body.get("cursor")
    if cursor is None or cursor == "":
        return None
    if not isinstance(cursor, str):
        raise ProtocolError(200, str(body)[:200], "InvalidCursor")
    if cursor == sent:
        # the server made no progress; following it would loop forever
        raise ProtocolError(200, f"cursor did not advance: {cursor!r}", "StalledCursor")
    return cursor


def _check_limit(limit: int, maximum: int) -> None:
    if not 1 <= limit <= maximum:
        raise ValueError(f"limit must be in [1, {maximum}], got {limit}")


def _retry_after(value: str | None) -> float | None:
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


def _status_error(resp: httpx.Response) -> ProtocolError:
    error = None
    try:
        body = resp.json()
        if isinstance(body, dict) and isinstance(body.get("error"), str):
            error = body["error"]
    except ValueError:
        pass
    if 400 <= resp.status_code < 500 and error in NOT_FOUND_ERRORS:
        return RepoNotFoundError(resp.status_code, resp.text, error)
    return ProtocolError(resp.status_code, resp.text, error)
