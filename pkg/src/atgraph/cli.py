"""``atgraph`` command line: crawl, analyze, report, mock-relay.

Every flag can also come from an ``ATGRAPH_*`` environment variable or from a
flat JSON config file given with ``--config``. Precedence is flag, then
environment, then config file, then built-in default.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable

import click

from . import __version__
from .anomaly import DEFAULT_PERCENTILE, classify_range
from .ingest import CheckpointError, CrawlConfig, run_crawl
from .mock_relay import FixtureError, FixtureSet, serve
from .report import ANOMALIES_FILE, SCATTER_FILE, ReportFormatError, emit_report, load_anomalies, render_scatter
from .store import DatasetStore, StoreError
from .xrpc_client import COLLECTIONS, ClientConfig, XrpcClient, XrpcError

SHORT_COLLECTIONS = {nsid.rsplit(".", 1)[-1]: nsid for nsid in COLLECTIONS}


def _load_config(ctx: click.Context, param: click.Parameter, value: str | None) -> str | None:
    if not value:
        return value
    try:
        doc = json.loads(Path(value).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise click.BadParameter(f"cannot read config: {exc}", ctx=ctx, param=param)
    if not isinstance(doc, dict):
        raise click.BadParameter("config must be a JSON object of flag names to values", ctx=ctx, param=param)
    defaults = dict(ctx.default_map or {})
    defaults.update({str(k).lstrip("-").replace("-", "_"): v for k, v in doc.items()})
    ctx.default_map = defaults
    return value


def _shared(fn: Callable) -> Callable:
    fn = click.option(
        "--log-level", envvar="ATGRAPH_LOG_LEVEL", show_envvar=True, default="WARNING", show_default=True,
        type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
        help="Logging verbosity (stderr).",
    )(fn)
    fn = click.option(
        "--data-dir", envvar="ATGRAPH_DATA_DIR", show_envvar=True, default="data", show_default=True,
        type=click.Path(file_okay=False, path_type=Path),
        help="Directory holding the table CSVs and reports.",
    )(fn)
    fn = click.option(
        "--config", envvar="ATGRAPH_CONFIG", show_envvar=True, is_eager=True, expose_value=False,
        callback=_load_config, type=click.Path(dir_okay=False),
        help="JSON file of flag defaults, e.g. {\"workers\": 8}.",
    )(fn)
    return fn


def _setup_logging(level: str) -> None:
    logging.basicConfig(level=level.upper(), stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _parse_collections(ctx: click.Context, param: click.Parameter, value: Any) -> tuple[str, ...]:
    if value is None or value == "":
        return COLLECTIONS
    items = value if isinstance(value, (list, tuple)) else str(value).split(",")
    out = []
    for item in (str(i).strip() for i in items):
        nsid = SHORT_COLLECTIONS.get(item, item)
        if nsid not in COLLECTIONS:
            raise click.BadParameter(f"unknown collection {item!r}; choose from {', '.join(SHORT_COLLECTIONS)}")
        if nsid not in out:
            out.append(nsid)
    return tuple(out)


@click.group()
@click.version_option(__version__, prog_name="atgraph")
def main() -> None:
    """Crawl AT Protocol repositories and flag anomalous blocking behaviour."""


@main.command()
@_shared
@click.option("--relay-url", envvar="ATGRAPH_RELAY_URL", show_envvar=True, default="https://bsky.network",
              show_default=True, help="Base URL serving com.atproto.sync.listRepos.")
@click.option("--pds-url", envvar="ATGRAPH_PDS_URL", show_envvar=True, default="https://bsky.social",
              show_default=True, help="Base URL serving describeRepo and listRecords.")
@click.option("--rate-limit", envvar="ATGRAPH_RATE_LIMIT", show_envvar=True, default=10.0, show_default=True,
              type=click.FloatRange(min=0, min_open=True), help="Maximum requests per second.")
@click.option("--workers", envvar="ATGRAPH_WORKERS", show_envvar=True, default=4, show_default=True,
              type=click.IntRange(min=1), help="Repositories crawled in parallel.")
@click.option("--max-repos", envvar="ATGRAPH_MAX_REPOS", show_envvar=True, default=None,
              type=click.IntRange(min=1), help="Stop after this many repositories.")
@click.option("--collections", envvar="ATGRAPH_COLLECTIONS", show_envvar=True, default=None,
              callback=_parse_collections,
              help="Comma-separated subset of block,follow,post,repost,profile (or full NSIDs). Default: all.")
@click.option("--checkpoint", envvar="ATGRAPH_CHECKPOINT", show_envvar=True, default=None,
              type=click.Path(dir_okay=False, path_type=Path),
              help="Checkpoint file. Default: <data-dir>/checkpoints.jsonl.")
@click.option("--since", envvar="ATGRAPH_SINCE", show_envvar=True, default=None,
              type=click.DateTime(["%Y-%m-%d"]), help="Drop records created before this UTC date.")
@click.option("--until", envvar="ATGRAPH_UNTIL", show_envvar=True, default=None,
              type=click.DateTime(["%Y-%m-%d"]), help="Drop records created after this UTC date.")
def crawl(data_dir: Path, log_level: str, relay_url: str, pds_url: str, rate_limit: float, workers: int,
          max_repos: int | None, collections: tuple[str, ...], checkpoint: Path | None, since, until) -> None:
    """Harvest repositories into the eight table CSVs under --data-dir."""
    _setup_logging(log_level)
    try:
        client_config = ClientConfig(relay_base_url=relay_url, pds_base_url=pds_url, max_requests_per_second=rate_limit)
        config = CrawlConfig(
            collections=collections,
            max_repos=max_repos,
            worker_count=workers,
            checkpoint_path=checkpoint or data_dir / "checkpoints.jsonl",
            since=since.date() if since else None,
            until=until.date() if until else None,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc))
    try:
        with XrpcClient(client_config) as client:
            summary = run_crawl(config, client, DatasetStore(data_dir))
    except (XrpcError, StoreError, CheckpointError, OSError) as exc:
        raise click.ClickException(str(exc))
    click.echo(summary.format())


@main.command()
@_shared
@click.option("--since", envvar="ATGRAPH_SINCE", show_envvar=True, default=None,
              type=click.DateTime(["%Y-%m-%d"]), help="First UTC day of the analysis window.")
@click.option("--until", envvar="ATGRAPH_UNTIL", show_envvar=True, default=None,
              type=click.DateTime(["%Y-%m-%d"]), help="Last UTC day of the analysis window (inclusive).")
@click.option("--percentile", envvar="ATGRAPH_PERCENTILE", show_envvar=True, default=DEFAULT_PERCENTILE,
              show_default=True, type=click.FloatRange(0, 100, min_open=True, max_open=True),
              help="Per-day z-score percentile above which a user is anomalous.")
def analyze(data_dir: Path, log_level: str, since, until, percentile: float) -> None:
    """Label each (day, blocker) as anomalous or regular; write anomalies.csv and day_stats.csv."""
    _setup_logging(log_level)
    if since and until and since > until:
        raise click.UsageError("--since must not be after --until")
    store = DatasetStore(data_dir)
    if not store.path("blocks").exists():
        raise click.ClickException(f"{store.path('blocks')} not found; run `atgraph crawl` first")
    try:
        result = classify_range(store, since.date() if since else None, until.date() if until else None, percentile)
        paths = emit_report(result.labels, result.stats, data_dir)
    except (StoreError, OSError) as exc:
        raise click.ClickException(str(exc))
    n_anom = sum(1 for x in result.labels if x.anomalous)
    click.echo(f"{len(result.stats)} days, {len(result.labels)} user-days, {n_anom} anomalous")
    for p in paths:
        click.echo(f"wrote {p}")


@main.command()
@_shared
@click.option("--out", envvar="ATGRAPH_OUT", show_envvar=True, default=None,
              type=click.Path(dir_okay=False, path_type=Path),
              help="SVG output path. Default: <data-dir>/scatter.svg.")
def report(data_dir: Path, log_level: str, out: Path | None) -> None:
    """Render anomalies.csv as a red/blue scatter SVG."""
    _setup_logging(log_level)
    source = data_dir / ANOMALIES_FILE
    if not source.exists():
        raise click.ClickException(f"{source} not found; run `atgraph analyze` first")
    try:
        labels = load_anomalies(source)
        path = render_scatter(labels, out or data_dir / SCATTER_FILE)
    except (ReportFormatError, OSError) as exc:
        raise click.ClickException(str(exc))
    click.echo(f"wrote {path} ({len(labels)} markers, {sum(1 for x in labels if x.anomalous)} anomalous)")


@main.command("mock-relay")
@click.option("--log-level", envvar="ATGRAPH_LOG_LEVEL", show_envvar=True, default="WARNING", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.option("--fixtures", envvar="ATGRAPH_FIXTURES", show_envvar=True, required=True,
              type=click.Path(exists=True, dir_okay=False), help="FixtureSet JSON document.")
@click.option("--bind", envvar="ATGRAPH_BIND", show_envvar=True, default="127.0.0.1:8000", show_default=True,
              help="host:port to listen on.")
def mock_relay(log_level: str, fixtures: str, bind: str) -> None:
    """Serve fixture repositories over the three XRPC read routes."""
    _setup_logging(log_level)
    try:
        fixture_set = FixtureSet.load(fixtures)
    except (FixtureError, ValueError, OSError) as exc:
        raise click.ClickException(str(exc))
    try:
        relay = serve(fixture_set, bind)
    except (OSError, ValueError) as exc:
        raise click.ClickException(f"cannot bind {bind}: {exc}")
    click.echo(f"serving {len(fixture_set.repos)} repos at {relay.url} (Ctrl-C to stop)")
    try:
        relay.wait()
    except KeyboardInterrupt:
        pass
    finally:
        relay.shutdown()


if __name__ == "__main__":
    main()
