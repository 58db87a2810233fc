"""Crawl a synthetic network served by the in-process mock relay.

Run: python demos/crawl_mock_relay.py [DATA_DIR]
"""

from __future__ import annotations

import sys
import tempfile
from pathlib import Path

from atgraph.ingest import CrawlConfig, run_crawl
from atgraph.mock_relay import MockRelay, generate_fixtures
from atgraph.store import TABLES, DatasetStore
from atgraph.xrpc_client import ClientConfig, XrpcClient


def main(data_dir: Path) -> None:
    # Thirty accounts with a little of everything, 2% of records corrupted.
    fixtures = generate_fixtures(
        1, n_users=30, days=31, block_rate=1.0,
        follows_per_user=10, posts_per_user=8, reposts_per_user=3, malformed_fraction=0.02,
    )
    print(f"fixture holds {fixtures.total_records()} records in {len(fixtures.repos)} repos")

    with MockRelay(fixtures) as relay:
        # The mock plays both roles, so relay and PDS point at the same server.
        config = ClientConfig(relay_base_url=relay.url, pds_base_url=relay.url, max_requests_per_second=1000)
        store = DatasetStore(data_dir)
        crawl = CrawlConfig(worker_count=4, checkpoint_path=data_dir / "checkpoints.jsonl")
        with XrpcClient(config) as client:
            summary = run_crawl(crawl, client, store)
        print(summary.format())
        print(f"{relay.request_count} HTTP requests served")

        # A second pass finds every collection checkpointed as complete.
        with XrpcClient(config) as client:
            again = run_crawl(crawl, client, store)
        print(f"second pass added {sum(again.rows_per_table.values())} rows")

    for name in TABLES:
        print(f"{store.path(name)}: {store.count(name)} rows")


if __name__ == "__main__":
    target = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="atgraph-"))
    main(target)
