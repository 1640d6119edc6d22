#!/usr/bin/env python3
"""Build the synthetic demo dataset and evaluate its bundled predictions.

Everything runs offline through the file provider; outputs land in
demo-out/ (or the directory given as the first argument).
"""

import sys
from pathlib import Path

from colonyeval.cli import main
from colonyeval.synthetic import build_demo_dataset


def run(target: Path) -> int:
    manifest = build_demo_dataset(target / "dataset")
    predictions = target / "dataset" / "stub_predictions.json"
    code = main(
        [
            "run",
            "--manifest", str(manifest),
            "--provider", f"file:{predictions}",
            "--out", str(target / "out"),
            "--timestamp", "2026-01-01T00:00:00+00:00",
        ]
    )
    if code == 0:
        print(f"demo outputs in {target / 'out'}")
    return code


if __name__ == "__main__":
    root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo-out")
    sys.exit(run(root))
