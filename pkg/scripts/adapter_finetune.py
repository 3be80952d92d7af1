"""Perturb the adapter's last layer of a pretrained denoiser and fine-tune it back on L_rec.

Trains the denoiser first when the configured checkpoint is missing.
"""

import argparse
from pathlib import Path

import numpy as np
import torch

from anchorlab.charts import write_chart
from anchorlab.cli import main as cli_main
from anchorlab.config import load_config
from anchorlab.learned import (finetune_adapter_step, load_denoiser, perturb_adapter,
                               reconstruction_loss_torch)
from anchorlab.prior import Condition, sample
from anchorlab.schedule import add_noise

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--scale", type=float, default=0.1)
    ap.add_argument("--out", default="runs/adapter_finetune")
    args = ap.parse_args()
    cfg_path = ROOT / "configs" / "learned.json"
    cfg = load_config(cfg_path)
    ckpt = Path(cfg.learned["checkpoint"])
    if not ckpt.exists():
        cli_main(["train-prior", "--config", str(cfg_path), "--out", str(Path(args.out) / "train")])
    model = perturb_adapter(load_denoiser(ckpt), args.scale, seed=1)
    rng = np.random.default_rng(7)
    images = sample(cfg.prior, Condition("y"), rng, n=256)
    t = rng.integers(20, 981, size=256)
    z_t = add_noise(images, t, rng.standard_normal(images.shape), cfg.schedule)
    losses = [finetune_adapter_step(model, z_t, t, images, cfg.schedule, lr=args.lr)[1]
              for _ in range(args.steps)]
    with torch.no_grad():
        losses.append(float(reconstruction_loss_torch(model, z_t, t, images, cfg.schedule)))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    write_chart(Path(args.out) / "rec_loss.svg", {"L_rec": (np.arange(len(losses)), losses)},
                "adapter fine-tuning", ylabel="per-dimension L_rec", logy=True)
    print(f"L_rec {losses[0]:.4f} -> {losses[-1]:.4f} (ratio {losses[-1] / losses[0]:.3f})")
