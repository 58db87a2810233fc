import json
from collections import Counter
from datetime import date, datetime, timezone

import pytest

from atgraph.ingest import (
    RECORD_TABLES,
    Checkpoint,
    CheckpointBook,
    CheckpointError,
    CrawlConfig,
    crawl_repo,
    enumerate_repos,
    load_checkpoints,
    run_crawl,
    save_checkpoints,
)
from atgraph.mock_relay import Failure, FixtureRepo, FixtureSet, generate_fixtures
from atgraph.records import TAG_FEATURE
from atgraph.store import TABLES, DatasetStore
from atgraph.xrpc_client import BLOCK, COLLECTIONS, FOLLOW, POST, PROFILE, REPOST, RawRecord
from helpers import CrashingClient, CrashingStore, SimulatedCrash, block_records, repo_fixtures

RECORD_COLLECTIONS = (BLOCK, FOLLOW, POST, REPOST)


def fixed_clock():
    return datetime(2024, 1, 1, tzinfo=timezone.utc)


def post_records(did, n, tagged):
    out = []
    for i in range(n):
        value = {"$type": POST, "text": f"post {i}", "createdAt": "2023-08-05T00:00:00Z"}
        if i < tagged:
            value["text"] += " #rust"
            value["facets"] = [{"index": {"byteStart": 7, "byteEnd": 12},
                                "features": [{"$type": TAG_FEATURE, "tag": "rust"}]}]
        out.append(RawRecord(f"at://{did}/{POST}/p{i}", f"c{i}", value))
    return out


def mixed_fixtures(seed=11, n_users=12):
    return generate_fixtures(seed, n_users=n_users, days=10, block_rate=3, follows_per_user=15,
                             posts_per_user=12, reposts_per_user=6, malformed_fraction=0.03)


def table_multisets(store):
    return {name: Counter(store.read_rows(name)) for name in TABLES}


# -- enumerate ----------------------------------------------------------------

def test_enumerate_all(relay_factory, client_factory):
    relay = relay_factory(repo_fixtures(250))
    dids = list(enumerate_repos(client_factory(relay), limit=100))
    assert dids == [r.did for r in relay.fixtures.repos]
    assert relay.request_count == 3


def test_enumerate_max_repos(relay_factory, client_factory):
    relay = relay_factory(repo_fixtures(250))
    assert list(enumerate_repos(client_factory(relay), max_repos=10)) == [r.did for r in relay.fixtures.repos[:10]]
    assert relay.request_count == 1


def test_enumerate_empty(relay_factory, client_factory):
    assert list(enumerate_repos(client_factory(relay_factory(FixtureSet())))) == []


# -- crawl_repo ---------------------------------------------------------------

def test_crawl_repo_tables(relay_factory, client_factory):
    did = "did:plc:alice"
    fixtures = FixtureSet([FixtureRepo(did, "alice.test", {BLOCK: block_records(did, 150), POST: post_records(did, 3, 1)})])
    relay = relay_factory(fixtures)
    res = crawl_repo(client_factory(relay), did, (BLOCK, POST))
    assert res.completed and not res.unreachable
    assert len(res.tables["blocks"]) == 150
    assert len(res.tables["posts"]) == 3
    assert [t.tag for t in res.tables["tags"]] == ["rust"]


def test_crawl_repo_empty(relay_factory, client_factory):
    relay = relay_factory(repo_fixtures(1))
    book = CheckpointBook()
    did = relay.fixtures.repos[0].did
    res = crawl_repo(client_factory(relay), did, COLLECTIONS, checkpoints=book)
    assert res.completed
    assert all(not rows for name, rows in res.tables.items() if name != "users")
    assert len(res.tables["users"]) == 1
    assert all(book.get(did, c).completed for c in COLLECTIONS)


def test_crawl_repo_unreachable(relay_factory, client_factory):
    relay = relay_factory(repo_fixtures(1))
    res = crawl_repo(client_factory(relay), "did:plc:ghost", COLLECTIONS)
    assert res.unreachable and res.tables == {}


def test_crawl_repo_resumes_mid_collection(relay_factory, client_factory):
    did = "did:plc:repo00000"
    relay = relay_factory(repo_fixtures(1, 250))
    client = client_factory(relay)
    first = client.list_records(did, BLOCK, None, 100)
    book = CheckpointBook()
    book.record(Checkpoint(did, BLOCK, first.next_cursor, False))
    res = crawl_repo(client, did, (BLOCK,), checkpoints=book)
    assert len(res.tables["blocks"]) == 150
    cursors = [params.get("cursor") for _, nsid, params in relay.requests if nsid.endswith("listRecords")]
    assert cursors[1] == first.next_cursor
    assert book.get(did, BLOCK).completed


def test_crawl_repo_skips_completed(relay_factory, client_factory):
    did = "did:plc:repo00000"
    relay = relay_factory(repo_fixtures(1, 5))
    book = CheckpointBook()
    book.record(Checkpoint(did, BLOCK, None, True))
    res = crawl_repo(client_factory(relay), did, (BLOCK,), checkpoints=book)
    assert res.completed and relay.request_count == 0


def test_crawl_repo_keeps_last_good_cursor_on_failure(relay_factory, client_factory):
    did = "did:plc:repo00000"
    fixtures = repo_fixtures(1, 2500)
    fixtures.failure_plan = [Failure(i, "503") for i in range(14, 30)]
    relay = relay_factory(fixtures)
    book = CheckpointBook()
    client = client_factory(relay, max_retries=1)
    with pytest.raises(Exception):
        crawl_repo(client, did, (BLOCK,), checkpoints=book)
    cp = book.get(did, BLOCK)
    assert cp is not None and not cp.completed and cp.cursor is not None


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cps = [
        Checkpoint("did:plc:a", BLOCK, None, True),
        Checkpoint("did:plc:a", POST, "opaque/cursor==", False),
        Checkpoint("did:web:b.example", FOLLOW, None, False),
    ]
    path = tmp_path / "cp.jsonl"
    save_checkpoints(path, cps)
    lines = path.read_text().split("\n")
    assert len(lines) == 4 and lines[-1] == ""
    assert json.loads(lines[0]) == {"did": "did:plc:a", "collection": BLOCK, "cursor": None, "completed": True}
    assert load_checkpoints(path) == cps


def test_checkpoint_empty(tmp_path):
    path = tmp_path / "cp.jsonl"
    save_checkpoints(path, [])
    assert path.read_bytes() == b""
    assert load_checkpoints(path) == []
    assert load_checkpoints(tmp_path / "absent.jsonl") == []


def test_checkpoint_truncated_line(tmp_path):
    path = tmp_path / "cp.jsonl"
    save_checkpoints(path, [Checkpoint("did:plc:a", BLOCK, None, True), Checkpoint("did:plc:b", BLOCK, "c", False)])
    data = path.read_text()
    path.write_text(data[: len(data) - 12])
    with pytest.raises(CheckpointError) as err:
        load_checkpoints(path)
    assert err.value.line == 2


def test_checkpoint_rejects_duplicates_and_bad_fields(tmp_path):
    path = tmp_path / "cp.jsonl"
    row = {"did": "did:plc:a", "collection": BLOCK, "cursor": None, "completed": True}
    path.write_text(json.dumps(row) + "\n" + json.dumps(row) + "\n")
    with pytest.raises(CheckpointError):
        load_checkpoints(path)
    path.write_text(json.dumps({**row, "collection": "app.bsky.feed.like"}) + "\n")
    with pytest.raises(CheckpointError):
        load_checkpoints(path)
    with pytest.raises(ValueError):
        Checkpoint("did:plc:a", BLOCK, "c", True)


# -- run_crawl ----------------------------------------------------------------

def expected_totals(fixtures):
    """Row counts derived by reading the fixture directly with the parsers."""
    from atgraph.records import parse_records

    totals = Counter()
    for repo in fixtures.repos:
        for nsid in RECORD_COLLECTIONS:
            batch = parse_records(nsid, repo.records(nsid))
            totals[{BLOCK: "blocks", FOLLOW: "follows", POST: "posts", REPOST: "reposts"}[nsid]] += len(batch.rows)
            totals["tags"] += len(set((t.author, t.post_rkey, t.tag) for t in batch.tags))
            totals["links"] += len(set((t.author, t.post_rkey, t.uri) for t in batch.links))
            totals["mentions"] += len(set((t.author, t.post_rkey, t.mentioned) for t in batch.mentions))
    totals["users"] = len(fixtures.repos)
    return totals


def test_run_crawl_totals_and_idempotence(tmp_path, relay_factory, client_factory):
    fixtures = mixed_fixtures()
    relay = relay_factory(fixtures)
    store = DatasetStore(tmp_path / "data")
    config = CrawlConfig(worker_count=4, checkpoint_path=tmp_path / "cp.jsonl")
    summary = run_crawl(config, client_factory(relay), store)
    want = expected_totals(fixtures)
    assert {k: v for k, v in summary.rows_per_table.items() if v} == {k: v for k, v in want.items() if v}
    assert summary.repos_completed == summary.repos_seen == len(fixtures.repos)
    assert {name: store.count(name) for name in TABLES} == {name: want[name] for name in TABLES}

    again = run_crawl(config, client_factory(relay), store)
    assert sum(again.rows_per_table.values()) == 0

    fresh_book = CrawlConfig(worker_count=2, checkpoint_path=tmp_path / "other.jsonl")
    third = run_crawl(fresh_book, client_factory(relay), store)
    assert sum(third.rows_per_table.values()) == 0
    assert third.skipped_records["duplicate"] == summary.record_rows()


def test_run_crawl_conservation(tmp_path, relay_factory, client_factory):
    fixtures = mixed_fixtures(seed=12)
    relay = relay_factory(fixtures)
    config = CrawlConfig(collections=RECORD_COLLECTIONS, worker_count=3, since=date(2023, 8, 1), until=date(2023, 8, 6))
    summary = run_crawl(config, client_factory(relay), DatasetStore(tmp_path))
    served = sum(relay.records_served[c] for c in RECORD_COLLECTIONS)
    assert served == fixtures.total_records(RECORD_COLLECTIONS)
    assert summary.record_rows() + sum(summary.skipped_records.values()) == served
    assert summary.skipped_records["outside_window"] > 0


def test_run_crawl_counts_unreachable(tmp_path, relay_factory, client_factory):
    relay = relay_factory(repo_fixtures(3, 2))
    summary = run_crawl(CrawlConfig(collections=(BLOCK,)), client_factory(relay), DatasetStore(tmp_path),
                        dids=["did:plc:repo00000", "did:plc:ghost"])
    assert (summary.repos_completed, summary.unreachable, summary.rows_per_table["blocks"]) == (1, 1, 2)


def test_run_crawl_survives_repo_failure(tmp_path, relay_factory, client_factory):
    fixtures = repo_fixtures(3, 2)
    fixtures.failure_plan = [Failure(i, "503") for i in range(3, 6)]
    relay = relay_factory(fixtures)
    summary = run_crawl(CrawlConfig(collections=(BLOCK,), worker_count=1), client_factory(relay, max_retries=1),
                        DatasetStore(tmp_path))
    assert summary.failed == 1 and summary.repos_completed == 2


def test_bounded_parallelism(tmp_path, relay_factory, client_factory):
    relay = relay_factory(repo_fixtures(24, 3), latency=0.01)
    client = client_factory(relay)
    dids = list(enumerate_repos(client))
    run_crawl(CrawlConfig(collections=(BLOCK, FOLLOW), worker_count=3), client, DatasetStore(tmp_path), dids=dids)
    assert 2 <= relay.max_in_flight <= 3


def test_resumed_crawl_is_byte_identical(tmp_path, relay_factory, client_factory):
    fixtures = mixed_fixtures(seed=13, n_users=8)
    relay = relay_factory(fixtures)
    collections = (BLOCK, FOLLOW, POST, REPOST, PROFILE)

    def config(name):
        return CrawlConfig(collections=collections, worker_count=1, page_limit=7, flush_every=2,
                           checkpoint_path=tmp_path / f"{name}.jsonl")

    whole = DatasetStore(tmp_path / "whole", clock=fixed_clock)
    run_crawl(config("whole"), client_factory(relay), whole)

    parts = DatasetStore(tmp_path / "parts", clock=fixed_clock)
    with pytest.raises(SimulatedCrash):
        run_crawl(config("parts"), CrashingClient(client_factory(relay), 23), parts)
    resumed = DatasetStore(tmp_path / "parts", clock=fixed_clock)
    run_crawl(config("parts"), client_factory(relay), resumed)
    for name in TABLES:
        assert resumed.path(name).read_bytes() == whole.path(name).read_bytes(), name


def test_store_crash_then_resume(tmp_path, relay_factory, client_factory):
    fixtures = mixed_fixtures(seed=14, n_users=6)
    relay = relay_factory(fixtures)
    config = CrawlConfig(worker_count=2, page_limit=5, flush_every=1, checkpoint_path=tmp_path / "cp.jsonl")
    reference = DatasetStore(tmp_path / "ref")
    run_crawl(CrawlConfig(worker_count=2), client_factory(relay), reference)
    with pytest.raises(SimulatedCrash):
        run_crawl(config, client_factory(relay), CrashingStore(DatasetStore(tmp_path / "run"), 17))
    store = DatasetStore(tmp_path / "run")
    run_crawl(config, client_factory(relay), store)
    assert table_multisets(store) == table_multisets(reference)


def test_crawl_config_validation():
    with pytest.raises(ValueError):
        CrawlConfig(worker_count=0)
    with pytest.raises(ValueError):
        CrawlConfig(collections=("app.bsky.feed.like",))
    with pytest.raises(ValueError):
        CrawlConfig(since=date(2023, 9, 1), until=date(2023, 8, 1))
    assert set(RECORD_TABLES) == {"blocks", "follows", "posts", "reposts"}
