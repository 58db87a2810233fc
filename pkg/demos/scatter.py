"""Draw the red/blue scatter of daily block counts from an anomalies.csv.

Run the planted-anomaly demo first, then:
    python demos/scatter.py DATA_DIR [OUT.svg]
"""

from __future__ import annotations

import sys
from collections import Counter
from pathlib import Path

from atgraph.report import load_anomalies, render_scatter


def main(data_dir: Path, out: Path) -> None:
    labels = load_anomalies(data_dir / "anomalies.csv")
    by_label = Counter(x.label for x in labels)
    # One marker per (day, blocker): red when anomalous that day, blue otherwise.
    path = render_scatter(labels, out, title="Blocks per user per day")
    print(f"{by_label['anomalous']} red and {by_label['regular']} blue markers written to {path}")


if __name__ == "__main__":
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    root = Path(sys.argv[1])
    main(root, Path(sys.argv[2]) if len(sys.argv) > 2 else root / "scatter.svg")
