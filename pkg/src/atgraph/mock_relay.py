"""In-process XRPC relay/PDS double serving fixture repositories.

The server answers ``com.atproto.sync.listRepos``,
``com.atproto.repo.describeRepo`` and ``com.atproto.repo.listRecords`` with the
real page limits and opaque offset cursors, and can inject timeouts, 429s and
503s at chosen request indexes.
"""

from __future__ import annotations

import base64
import json
import logging
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Sequence
from urllib.parse import parse_qs, urlsplit

import numpy as np

from .xrpc_client import (
    BLOCK,
    FOLLOW,
    LIST_RECORDS_MAX,
    LIST_REPOS_MAX,
    POST,
    PROFILE,
    REPOST,
    RawRecord,
    is_did,
)

LOGGER = logging.getLogger(__name__)

FAILURE_KINDS = ("timeout", "429", "503")


class FixtureError(ValueError):
    pass


@dataclass
class FixtureRepo:
    did: str
    handle: str
    collections: dict[str, list[RawRecord]] = field(default_factory=dict)

    def records(self, collection: str) -> list[RawRecord]:
        return self.collections.get(collection, [])


@dataclass(frozen=True)
class Failure:
    request_index: int  # 1-based, counted over every request the server receives
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in FAILURE_KINDS:
            raise FixtureError(f"unknown failure kind {self.kind!r}")
        if self.request_index < 1:
            raise FixtureError("request_index is 1-based")


@dataclass
class FixtureSet:
    repos: list[FixtureRepo] = field(default_factory=list)
    failure_plan: list[Failure] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> "FixtureSet":
        seen = set()
        for repo in self.repos:
            if not is_did(repo.did):
                raise FixtureError(f"bad DID {repo.did!r}")
            if repo.did in seen:
                raise FixtureError(f"duplicate DID {repo.did}")
            seen.add(repo.did)
            for collection, records in repo.collections.items():
                uris = [r.uri for r in records]
                if len(set(uris)) != len(uris):
                    raise FixtureError(f"duplicate record uri in {repo.did}/{collection}")
        return self

    def total_records(self, collections: Sequence[str] | None = None) -> int:
        return sum(
            len(records)
            for repo in self.repos
            for name, records in repo.collections.items()
            if collections is None or name in collections
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "repos": [
                {
                    "did": r.did,
                    "handle": r.handle,
                    "collections": {k: [rec.to_json() for rec in v] for k, v in r.collections.items()},
                }
                for r in self.repos
            ],
            "failure_plan": [{"request_index": f.request_index, "failure": f.kind} for f in self.failure_plan],
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "FixtureSet":
        try:
            repos = [
                FixtureRepo(
                    did=r["did"],
                    handle=r.get("handle", ""),
                    collections={k: [RawRecord.from_json(x) for x in v] for k, v in r.get("collections", {}).items()},
                )
                for r in obj.get("repos", [])
            ]
            plan = [Failure(int(f["request_index"]), str(f["failure"])) for f in obj.get("failure_plan", [])]
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise FixtureError(f"invalid fixture document: {exc}") from exc
        return cls(repos, plan, dict(obj.get("meta", {}))).validate()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FixtureSet":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# -- cursors -----------------------------------------------------------------

def encode_cursor(offset: int, fmt: str = "b64") -> str:
    if fmt == "b64":
        return base64.urlsafe_b64encode(f"o:{offset}".encode()).decode().rstrip("=")
    if fmt == "hex":
        return f"x{offset:08x}"
    raise ValueError(fmt)


def decode_cursor(token: str, fmt: str = "b64") -> int:
    try:
        if fmt == "b64":
            raw = base64.urlsafe_b64decode(token + "=" * (-len(token) % 4)).decode()
            if not raw.startswith("o:"):
                raise ValueError(token)
            offset = int(raw[2:])
        else:
            if not token.startswith("x"):
                raise ValueError(token)
            offset = int(token[1:], 16)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ValueError(f"bad cursor {token!r}") from exc
    if offset < 0:
        raise ValueError(f"bad cursor {token!r}")
    return offset


# -- server ------------------------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    disable_nagle_algorithm = True
    server: "_Server"

    def log_message(self, format: str, *args: Any) -> None:  # noqa: A002
        LOGGER.debug("%s " + format, self.address_string(), *args)

    def _send(self, status: int, body: dict[str, Any], headers: dict[str, str] | None = None) -> None:
        data = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self) -> None:  # noqa: N802
        relay = self.server.relay
        index = relay._enter()
        try:
            parts = urlsplit(self.path)
            params = {k: v[-1] for k, v in parse_qs(parts.query, keep_blank_values=True).items()}
            nsid = parts.path.removeprefix("/xrpc/")
            relay._log(index, nsid, params)
            failure = relay._failures.get(index)
            if failure == "timeout":
                time.sleep(relay.stall_seconds)
                self.close_connection = True
                return
            if failure is not None:
                self._send(int(failure), {"error": "InjectedFailure", "message": f"request {index}"},
                           {"Retry-After": "0"} if failure == "429" else None)
                return
            if relay.latency:
                time.sleep(relay.latency)
            status, body = relay.respond(nsid, params)
            self._send(status, body)
        finally:
            relay._exit()


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    relay: "MockRelay"


class MockRelay:
    """Serves a :class:`FixtureSet` over HTTP in a background thread.

    One server plays both the relay and the PDS role. ``request_count`` and
    ``max_in_flight`` are updated atomically for assertions in tests;
    ``latency`` delays every normal response, which makes overlap observable.
    """

    def __init__(
        self,
        fixtures: FixtureSet,
        host: str = "127.0.0.1",
        port: int = 0,
        *,
        stall_seconds: float = 1.0,
        cursor_format: str = "b64",
        latency: float = 0.0,
    ):
        self.fixtures = fixtures.validate()
        self.stall_seconds = stall_seconds
        self.latency = latency
        self.cursor_format = cursor_format
        self._by_did = {r.did: r for r in fixtures.repos}
        self._failures = {f.request_index: f.kind for f in fixtures.failure_plan}
        self._lock = threading.Lock()
        self.request_count = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self.requests: list[tuple[int, str, dict[str, str]]] = []
        self.records_served: Counter[str] = Counter()
        self._server = _Server((host, port), _Handler)
        self._server.relay = self
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockRelay":
        self._thread = threading.Thread(
            target=self._server.serve_forever, kwargs={"poll_interval": 0.05}, name="mock-relay", daemon=True
        )
        self._thread.start()
        return self

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def wait(self, timeout: float | None = None) -> None:
        """Block until the server thread exits (or ``timeout`` passes)."""
        if self._thread is not None:
            self._thread.join(timeout)

    def __enter__(self) -> "MockRelay":
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.shutdown()

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def _enter(self) -> int:
        with self._lock:
            self.request_count += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            return self.request_count

    def _exit(self) -> None:
        with self._lock:
            self.in_flight -= 1

    def _log(self, index: int, nsid: str, params: dict[str, str]) -> None:
        with self._lock:
            self.requests.append((index, nsid, params))

    # -- routes ------------------------------------------------------------

    def respond(self, nsid: str, params: dict[str, str]) -> tuple[int, dict[str, Any]]:
        if nsid == "com.atproto.sync.listRepos":
            return self._page(params, LIST_REPOS_MAX, [{"did": r.did, "head": "", "rev": "", "active": True}
                                                       for r in self.fixtures.repos], None)
        if nsid == "com.atproto.repo.describeRepo":
            repo = self._by_did.get(params.get("repo", ""))
            if repo is None:
                return 400, {"error": "RepoNotFound", "message": "Could not find repo"}
            return 200, {
                "did": repo.did,
                "handle": repo.handle,
                "handleIsCorrect": True,
                "collections": sorted(k for k, v in repo.collections.items() if v),
            }
        if nsid == "com.atproto.repo.listRecords":
            repo = self._by_did.get(params.get("repo", ""))
            if repo is None:
                return 400, {"error": "RepoNotFound", "message": "Could not find repo"}
            collection = params.get("collection", "")
            items = [r.to_json() for r in repo.records(collection)]
            return self._page(params, LIST_RECORDS_MAX, items, collection)
        return 404, {"error": "MethodNotImplemented", "message": nsid}

    def _page(self, params: dict[str, str], maximum: int, items: list[Any], collection: str | None):
        try:
            limit = int(params.get("limit", str(maximum)))
            offset = decode_cursor(params["cursor"], self.cursor_format) if params.get("cursor") else 0
        except ValueError as exc:
            return 400, {"error": "InvalidRequest", "message": str(exc)}
        if limit < 1:
            return 400, {"error": "InvalidRequest", "message": "limit must be >= 1"}
        limit = min(limit, maximum)
        page = items[offset:offset + limit]
        end = offset + len(page)
        body: dict[str, Any] = {"records" if collection is not None else "repos": page}
        if end < len(items):
            body["cursor"] = encode_cursor(end, self.cursor_format)
        if collection is not None:
            with self._lock:
                self.records_served[collection] += len(page)
        return 200, body


def serve(fixtures: FixtureSet, bind_address: str = "127.0.0.1:0", **kwargs: Any) -> MockRelay:
    """Start a relay on ``host:port`` and return its running handle."""
    host, _, port = bind_address.rpartition(":")
    return MockRelay(fixtures, host or "127.0.0.1", int(port or 0), **kwargs).start()


# -- fixture generation ------------------------------------------------------

_B32 = "234567abcdefghijklmnopqrstuvwxyz"


def make_tid(micros: int, clock_id: int = 0) -> str:
    """13-character sortable record key from a microsecond timestamp."""
    n = (micros << 10) | (clock_id & 0x3FF)
    chars = []
    for _ in range(13):
        chars.append(_B32[n & 31])
        n >>= 5
    return "".join(reversed(chars))


@dataclass(frozen=True)
class Burst:
    """A planted user blocking ``per_day`` accounts on each listed day offset."""

    user: int
    days: tuple[int, ...]
    per_day: int


def _ts(dt: datetime) -> str:
    return dt.strftime("%Y-%m-%dT%H:%M:%S.%f")[:-3] + "Z"


def generate_fixtures(
    seed: int,
    n_users: int = 100,
    start: date = date(2023, 8, 1),
    days: int = 31,
    block_rate: float = 1.0,
    bursts: Sequence[Burst] = (),
    follows_per_user: int = 0,
    posts_per_user: int = 0,
    reposts_per_user: int = 0,
    profiles: bool = True,
    malformed_fraction: float = 0.0,
) -> FixtureSet:
    """Deterministic synthetic network.

    Each ordinary user blocks Poisson(``block_rate``) accounts per day over
    ``days`` days from ``start``. Burst users are quiet except on their burst
    day offsets (0-based from ``start``). ``malformed_fraction`` of the
    block/follow/post/repost records are corrupted; the number corrupted per
    reason is recorded in ``meta["malformed"]``.
    """
    if n_users < 0 or days < 0 or block_rate < 0:
        raise FixtureError("n_users, days and block_rate must be non-negative")
    if not 0.0 <= malformed_fraction <= 1.0:
        raise FixtureError("malformed_fraction must lie in [0, 1]")
    bursters = {}
    for b in bursts:
        if not 0 <= b.user < n_users:
            raise FixtureError(f"burst user {b.user} out of range")
        if any(not 0 <= d < days for d in b.days) or b.per_day < 1:
            raise FixtureError("burst days must lie inside the window and per_day >= 1")
        bursters.setdefault(b.user, []).append(b)
    if n_users < 2 and (block_rate > 0 or bursts or follows_per_user):
        block_rate, follows_per_user = 0.0, 0
        if bursts:
            raise FixtureError("bursts need at least two users")

    rng = np.random.default_rng(seed)
    dids = []
    taken = set()
    while len(dids) < n_users:
        did = "did:plc:" + "".join(_B32[i] for i in rng.integers(0, 32, size=24))
        if did not in taken:
            taken.add(did)
            dids.append(did)
    origin = datetime(start.year, start.month, start.day, tzinfo=timezone.utc)
    epoch = datetime(1970, 1, 1, tzinfo=timezone.utc)

    def other(i: int) -> str:
        j = int(rng.integers(0, n_users - 1))
        return dids[j + 1 if j >= i else j]

    def when(day: int) -> datetime:
        return origin + timedelta(days=day, milliseconds=int(rng.integers(0, 86_400_000)))

    repos = []
    for i, did in enumerate(dids):
        collections: dict[str, list[RawRecord]] = {}
        seq = 0

        def record(nsid: str, at: datetime, value: dict[str, Any]) -> RawRecord:
            nonlocal seq
            seq += 1
            micros = (at - epoch) // timedelta(microseconds=1)
            rkey = make_tid(micros, seq % 1024)
            return RawRecord(f"at://{did}/{nsid}/{rkey}", f"bafyrei{rkey}{seq:06d}", {"$type": nsid, **value, "createdAt": _ts(at)})

        blocks = []
        for day in range(days):
            if i in bursters:
                n = sum(b.per_day for b in bursters[i] if day in b.days)
            else:
                n = int(rng.poisson(block_rate)) if block_rate > 0 else 0
            for _ in range(n):
                blocks.append(record(BLOCK, when(day), {"subject": other(i)}))
        blocks.sort(key=lambda r: r.value["createdAt"])
        if blocks:
            collections[BLOCK] = blocks
        if follows_per_user and n_users > 1:
            collections[FOLLOW] = [record(FOLLOW, when(int(rng.integers(0, max(days, 1)))), {"subject": other(i)})
                                   for _ in range(follows_per_user)]
        if posts_per_user:
            posts = []
            for k in range(posts_per_user):
                text = f"post {k} from user{i}"
                value: dict[str, Any] = {"text": text, "langs": ["en"]}
                roll = rng.random()
                if roll < 0.3:
                    value["text"] = f"{text} #topic{k % 5}"
                    value["facets"] = [{
                        "index": {"byteStart": len(text) + 1, "byteEnd": len(value["text"].encode())},
                        "features": [{"$type": "app.bsky.richtext.facet#tag", "tag": f"topic{k % 5}"}],
                    }]
                elif roll < 0.45:
                    value["text"] = f"{text} https://example.com/{i}/{k}"
                    value["facets"] = [{
                        "index": {"byteStart": len(text) + 1, "byteEnd": len(value["text"].encode())},
                        "features": [{"$type": "app.bsky.richtext.facet#link", "uri": f"https://example.com/{i}/{k}"}],
                    }]
                elif roll < 0.55 and n_users > 1:
                    target = other(i)
                    value["text"] = f"{text} @user"
                    value["facets"] = [{
                        "index": {"byteStart": len(text) + 1, "byteEnd": len(value["text"].encode())},
                        "features": [{"$type": "app.bsky.richtext.facet#mention", "did": target}],
                    }]
                posts.append(record(POST, when(int(rng.integers(0, max(days, 1)))), value))
            collections[POST] = posts
        if reposts_per_user and n_users > 1:
            collections[REPOST] = []
            for _ in range(reposts_per_user):
                target = other(i)
                collections[REPOST].append(record(REPOST, when(int(rng.integers(0, max(days, 1)))), {
                    "subject": {"uri": f"at://{target}/{POST}/{make_tid(int(rng.integers(1, 2**40)))}",
                                "cid": "bafyreisubject"},
                }))
        if profiles:
            profile = RawRecord(f"at://{did}/{PROFILE}/self", f"bafyreiprofile{i:06d}", {
                "$type": PROFILE,
                "displayName": f"User {i}",
                "description": f"synthetic account {i}\nline two",
                "createdAt": _ts(origin),
            })
            collections[PROFILE] = [profile]
        repos.append(FixtureRepo(did, f"user{i}.test", collections))

    malformed: Counter[str] = Counter()
    if malformed_fraction > 0:
        pool = [(ri, nsid, k) for ri, repo in enumerate(repos)
                for nsid in (BLOCK, FOLLOW, POST, REPOST) for k in range(len(repo.records(nsid)))]
        n_bad = int(round(malformed_fraction * len(pool)))
        picks = rng.choice(len(pool), size=n_bad, replace=False) if n_bad else []
        for pick in sorted(int(p) for p in picks):
            ri, nsid, k = pool[pick]
            repo = repos[ri]
            raw = repo.collections[nsid][k]
            value = dict(raw.value)
            mode = int(rng.integers(0, 3))
            if mode == 0 or nsid in (POST, REPOST):
                value.pop("createdAt")
                if mode == 1 and nsid == POST:
                    value.pop("text")
            elif mode == 1:
                value["subject"] = repo.did
            else:
                value["subject"] = "not-a-did"
            reason = "self_reference" if mode == 1 and nsid in (BLOCK, FOLLOW) else "malformed"
            malformed[reason] += 1
            repo.collections[nsid][k] = RawRecord(raw.uri, raw.cid, value)
    fixtures = FixtureSet(repos, [], {"seed": seed, "malformed": dict(sorted(malformed.items()))})
    return fixtures.validate()
