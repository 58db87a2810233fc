"""Crawl AT Protocol repositories into a flat dataset and flag anomalous blockers."""

__version__ = "0.1.0"
