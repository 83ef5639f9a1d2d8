#!/usr/bin/env python3
"""Multi-floor experiment on the UJIIndoorLoc CSV (not bundled; bring your own).

Usage:
    python scripts/run_uji_experiment.py --csv /path/to/trainingData.csv \
        [--rounds 100] [--out out]

Partitions the campus by building x floor (13 tasks), meta-trains on ten
floors, and fine-tunes the three held-out floors under both meta and random
initialization. Expect roughly an hour at rounds=100 on a laptop.
"""

import argparse
import json
import sys
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from fedmetaloc import experiments


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--csv", required=True, help="UJIIndoorLoc trainingData.csv")
    parser.add_argument("--rounds", type=int, default=100)
    parser.add_argument("--out", default="out")
    args = parser.parse_args()

    base = json.loads((REPO / "configs" / "uji_multi_floor.json").read_text())
    base["datasets"][0]["csv"] = str(Path(args.csv).resolve())
    base["datasets"][0]["schema"] = str(REPO / "configs" / "uji_schema.json")
    base["federation"]["rounds"] = args.rounds
    base["out_dir"] = str(Path(args.out).resolve())

    config_path = Path(args.out) / "uji_multi_floor_config.json"
    config_path.parent.mkdir(parents=True, exist_ok=True)
    config_path.write_text(json.dumps(base, indent=2))

    config = experiments.load_experiment_config(config_path)
    print("== preprocess ==")
    experiments.cmd_preprocess(config)
    print("== meta-train ==")
    meta, reports = experiments.cmd_meta_train(config)
    print(f"{meta.round} rounds; final mean query loss {reports[-1].mean_query_loss:.4f}")
    print("== meta-test ==")
    report = experiments.cmd_meta_test(config)
    for task_id, entry in report["tasks"].items():
        impr = entry["improvement"]
        print(f"{task_id}: improvement over random init {json.dumps(impr)}")
    print(f"outputs under {config.experiment_dir}")


if __name__ == "__main__":
    main()
