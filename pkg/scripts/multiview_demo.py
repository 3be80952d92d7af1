"""Four rotated views of a 2-d asset: compare how each variant resolves the conflicting pulls."""

import argparse
from pathlib import Path

import numpy as np

from anchorlab.config import load_config
from anchorlab.experiment import execute
from anchorlab.metrics import update_coherence, view_consistency

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()
    base = load_config(ROOT / "configs" / "multiview.json")
    print(f"{'variant':<16} {'view consistency':>17} {'coherence':>10} {'|theta|':>8}")
    for variant in ("vanilla-sds", "anchords", "anchords-filter"):
        vc, coh, norm = [], [], []
        for seed in range(args.seeds):
            cfg = base.with_run(seed=seed, guidance={"variant": variant})
            traj = execute(cfg)
            vc.append(view_consistency(traj.theta[-1], cfg.views, cfg.prior, cfg.run.text))
            coh.append(update_coherence(traj.grad_theta))
            norm.append(np.linalg.norm(traj.theta[-1]))
        print(f"{variant:<16} {np.mean(vc):>17.3f} {np.mean(coh):>10.3f} {np.mean(norm):>8.3f}")
