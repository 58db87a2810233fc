"""A month of blocking activity with two planted bursts, crawled and analyzed.

Every UTC day, each active blocker's count is turned into a z-score against
that day's blockers, and the top percentile is labeled anomalous. The planted
burst users should be among them on their burst days.

Run: python demos/planted_anomaly_month.py [DATA_DIR]
"""

from __future__ import annotations

import sys
import tempfile
from datetime import date, timedelta
from pathlib import Path

from atgraph.anomaly import classify_range
from atgraph.ingest import CrawlConfig, run_crawl
from atgraph.mock_relay import Burst, MockRelay, generate_fixtures
from atgraph.report import emit_report
from atgraph.store import DatasetStore
from atgraph.xrpc_client import BLOCK, ClientConfig, XrpcClient

START = date(2023, 8, 1)


def main(data_dir: Path) -> None:
    bursts = [Burst(user=7, days=(9, 10, 11), per_day=50), Burst(user=42, days=(20,), per_day=80)]
    fixtures = generate_fixtures(2023, n_users=300, days=31, block_rate=1.0, bursts=bursts)
    planted = {
        (START + timedelta(days=d), fixtures.repos[b.user].did) for b in bursts for d in b.days
    }

    with MockRelay(fixtures) as relay:
        config = ClientConfig(relay_base_url=relay.url, pds_base_url=relay.url, max_requests_per_second=1000)
        with XrpcClient(config) as client:
            run_crawl(CrawlConfig(collections=(BLOCK,), worker_count=4), client, DatasetStore(data_dir))

    result = classify_range(DatasetStore(data_dir), START, date(2023, 8, 31))
    emit_report(result.labels, result.stats, data_dir)

    flagged = {(x.day, x.did) for x in result.labels if x.anomalous}
    print(f"{len(result.labels)} user-days over {len(result.stats)} days, {len(flagged)} anomalous")
    for stats in result.stats[:5]:
        print(f"  {stats.day}: {stats.n_users} blockers, mean {stats.mean:.2f}, std {stats.std:.2f}, "
              f"threshold z {stats.threshold_z:.2f}")
    print("  ...")
    caught = planted & flagged
    print(f"planted burst user-days caught: {len(caught)} of {len(planted)}")
    for day, did in sorted(planted):
        item = next(x for x in result.labels if x.day == day and x.did == did)
        print(f"  {day} {did}: {item.count} blocks, z = {item.z:.1f}, {item.label}")
    print(f"reports in {data_dir}")


if __name__ == "__main__":
    target = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="atgraph-"))
    main(target)
