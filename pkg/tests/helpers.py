from __future__ import annotations

from atgraph.mock_relay import FixtureRepo, FixtureSet
from atgraph.xrpc_client import BLOCK, RawRecord


def block_records(did: str, n: int, subject: str = "did:plc:target") -> list[RawRecord]:
    return [
        RawRecord(
            f"at://{did}/{BLOCK}/3k{i:011d}",
            f"bafy{i}",
            {"$type": BLOCK, "subject": subject, "createdAt": f"2023-08-{1 + i % 28:02d}T10:00:00.000Z"},
        )
        for i in range(n)
    ]


def repo_fixtures(n_repos: int, blocks_per_repo: int = 0) -> FixtureSet:
    repos = []
    for i in range(n_repos):
        did = f"did:plc:repo{i:05d}"
        cols = {BLOCK: block_records(did, blocks_per_repo)} if blocks_per_repo else {}
        repos.append(FixtureRepo(did, f"repo{i}.test", cols))
    return FixtureSet(repos)


class SimulatedCrash(RuntimeError):
    """Stands in for a process kill at a chosen point."""


class CrashingClient:
    """Delegates to a real client but dies on the request after ``after`` calls."""

    def __init__(self, inner, after: int):
        self._inner = inner
        self._left = after

    def __getattr__(self, name):
        return getattr(self._inner, name)

    def _tick(self):
        if self._left <= 0:
            raise SimulatedCrash("client killed")
        self._left -= 1

    def list_repos(self, *args, **kwargs):
        self._tick()
        return self._inner.list_repos(*args, **kwargs)

    def describe_repo(self, *args, **kwargs):
        self._tick()
        return self._inner.describe_repo(*args, **kwargs)

    def list_records(self, *args, **kwargs):
        self._tick()
        return self._inner.list_records(*args, **kwargs)


class CrashingStore:
    """Delegates to a real store; the ``after``-th append writes and then dies."""

    def __init__(self, inner, after: int):
        self._inner = inner
        self._left = after

    def __getattr__(self, name):
        return getattr(self._inner, name)

    def append_rows(self, table, rows):
        n = self._inner.append_rows(table, rows)
        self._left -= 1
        if self._left <= 0:
            raise SimulatedCrash("store killed after write")
        return n
