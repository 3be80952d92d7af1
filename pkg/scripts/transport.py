"""Track the energy distance between a 256-particle ensemble and the target under anchored guidance."""

import argparse
from pathlib import Path

import numpy as np

from anchorlab.charts import write_chart
from anchorlab.config import load_config
from anchorlab.experiment import execute_to, read_csv_columns
from anchorlab.metrics import smoothed_violations

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/transport")
    ap.add_argument("--variants", default="anchords,vanilla-sds")
    args = ap.parse_args()
    base = load_config(ROOT / "configs" / "unimodal_transport.json")
    series = {}
    for variant in args.variants.split(","):
        out = Path(args.out) / variant
        summary = execute_to(base.with_run(guidance={"variant": variant}), out)
        cols = read_csv_columns(out / "trajectory.csv")
        d = np.concatenate([[summary["metrics"]["initial_source_target_distance"]],
                            cols["source_target_distance"]])
        series[variant] = (np.arange(d.size), d)
        print(f"{variant:<12} start {d[0]:.3f}  end {d[-1]:.3f}  ratio {d[0] / d[-1]:.1f}x  "
              f"smoothed violations {smoothed_violations(d, 100):.3f}")
    write_chart(Path(args.out) / "energy_distance.svg", series, "source-target energy distance",
                ylabel="energy distance", logy=True)
