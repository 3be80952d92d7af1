"""Paired sweep of vanilla SDS, anchored guidance and the static negative source on the bimodal config.

    python3 scripts/bimodal_sweep.py --seeds 0-49 --out runs/bimodal_sweep
"""

import argparse
import json
import sys
from pathlib import Path

from anchorlab.cli import main

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="0-49")
    ap.add_argument("--out", default="runs/bimodal_sweep")
    ap.add_argument("--jobs", default="1")
    args = ap.parse_args()
    code = main(["sweep", "--config", str(ROOT / "configs" / "bimodal.json"), "--out", args.out,
                 "--seeds", args.seeds, "--variants", "vanilla-sds,anchords,neg-source",
                 "--jobs", args.jobs])
    if code == 0:
        main(["report", "--out", args.out])
        report = json.loads((Path(args.out) / "sweep.json").read_text())
        print(f"{'variant':<12} {'mean dist':>10} {'coherence':>10} {'win-rate':>9}")
        for row in report["aggregate"]:
            print(f"{row['variant']:<12} {row['mean_terminal_distance']:>10.3f} "
                  f"{row['mean_update_coherence']:>10.3f} {row['win_rate']:>9.2f}")
    sys.exit(code)
