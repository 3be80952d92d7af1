"""Wire a parsed config into a run and serialise its outputs."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .metrics import TargetDistance, update_coherence, view_consistency
from .optimizer import RunAborted, Trajectory, run

FLOAT_FMT = ".17g"


def build_prior(cfg: ExperimentConfig):
    """Returns ``(prior, finetuner)``; the finetuner is None for the analytic prior."""
    if cfg.run.prior_kind == "analytic":
        return cfg.prior, None
    from .learned import LearnedPrior, finetune_adapter_step, load_denoiser

    denoiser = load_denoiser(cfg.learned["checkpoint"])

    def finetuner(z_t, t, cond_image, render):
        _, loss = finetune_adapter_step(denoiser, z_t, t, cond_image, cfg.schedule,
                                        cfg.run.finetune_lr, target=render)
        return loss

    return LearnedPrior(denoiser), finetuner


def execute(cfg: ExperimentConfig, target_distance=None) -> Trajectory:
    prior, finetuner = build_prior(cfg)
    if target_distance is None and cfg.run.particles:
        target_distance = TargetDistance(cfg.prior, cfg.run.text,
                                         seed=cfg.metrics.get("target_seed", 0),
                                         n_target=cfg.metrics.get("n_target", 10_000))
    return run(cfg.run, prior, cfg.views, cfg.schedule, finetuner=finetuner,
               target_distance=target_distance, reference=cfg.prior)


def _fmt(x):
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, FLOAT_FMT)


def csv_columns(traj: Trajectory):
    D = traj.theta.shape[-1]
    if traj.is_ensemble:
        return (["tau"] + [f"theta_mean_{i}" for i in range(D)]
                + ["grad_norm_mean", "g_norm_mean", "m1_norm_mean", "m2_norm_mean",
                   "rec_loss_mean", "filter_pass_fraction", "finetune_loss",
                   "nearest_mode_distance_mean", "source_target_distance"])
    return (["tau", "t", "view"] + [f"theta_{i}" for i in range(D)]
            + [f"grad_theta_{i}" for i in range(D)]
            + ["grad_norm", "g_norm", "m1_norm", "m2_norm", "rec_loss", "filter_mask",
               "finetune_loss", "nearest_mode_distance", "mode_id"])


def csv_rows(traj: Trajectory):
    for k in range(len(traj)):
        if traj.is_ensemble:
            yield ([str(int(traj.tau[k]))] + [_fmt(x) for x in traj.theta[k].mean(axis=0)]
                   + [_fmt(np.mean(a[k])) for a in (traj.grad_norm, traj.g_norm, traj.m1_norm,
                                                     traj.m2_norm, traj.rec_loss, traj.filter_mask)]
                   + [_fmt(traj.finetune_loss[k]), _fmt(np.mean(traj.nearest_mode_distance[k])),
                      _fmt(traj.source_target_distance[k])])
        else:
            yield ([str(int(traj.tau[k])), str(int(traj.t[k])), str(int(traj.view[k]))]
                   + [_fmt(x) for x in traj.theta[k]] + [_fmt(x) for x in traj.grad_theta[k]]
                   + [_fmt(a[k]) for a in (traj.grad_norm, traj.g_norm, traj.m1_norm,
                                           traj.m2_norm, traj.rec_loss)]
                   + [str(int(traj.filter_mask[k])), _fmt(traj.finetune_loss[k]),
                      _fmt(traj.nearest_mode_distance[k]), str(int(traj.mode_id[k]))])


def write_trajectory_csv(traj: Trajectory, path):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(csv_columns(traj)) + "\n")
        for row in csv_rows(traj):
            fh.write(",".join(row) + "\n")


def read_csv_columns(path) -> dict:
    """Numeric columns of a trajectory CSV keyed by header name."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = [line.strip().split(",") for line in fh if line.strip()]
    cols = {}
    for j, name in enumerate(header):
        cols[name] = np.array([float(r[j]) for r in data])
    return cols


def summarize(traj: Trajectory, cfg: ExperimentConfig, status="ok") -> dict:
    final = traj.theta[-1] if len(traj) else traj.theta0
    v0 = cfg.views[0]
    summary = {
        "status": status,
        "seed": cfg.run.seed,
        "variant": cfg.run.guidance.variant,
        "steps_completed": len(traj),
        "stream_hash": traj.stream_hash,
        "config": cfg.raw,
    }
    metrics = {}
    if len(traj):
        metrics["nearest_mode_distance"] = float(np.mean(traj.nearest_mode_distance[-1]))
        if not traj.is_ensemble:
            metrics["mode_id"] = int(traj.mode_id[-1])
        try:
            metrics["update_coherence"] = update_coherence(traj.grad_theta)
        except ValueError:
            metrics["update_coherence"] = None
        metrics["filter_reject_fraction"] = float(1 - np.mean(traj.filter_mask))
        ft = traj.finetune_loss[~np.isnan(traj.finetune_loss)]
        metrics["finetune_calls"] = int(ft.size)
        if len(cfg.views) >= 2:
            metrics["view_consistency"] = view_consistency(final, cfg.views, cfg.prior,
                                                           cfg.run.text)
        if traj.is_ensemble:
            metrics["initial_source_target_distance"] = traj.initial_distance
            metrics["source_target_distance"] = float(traj.source_target_distance[-1])
        else:
            metrics["initial_nearest_mode_distance"] = traj.initial_distance
        metrics["final_theta_render"] = np.asarray(final @ v0.T).mean(axis=0).tolist() \
            if traj.is_ensemble else (final @ v0.T).tolist()
    summary["metrics"] = metrics
    return summary


def write_outputs(traj: Trajectory, cfg: ExperimentConfig, out_dir, status="ok") -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(traj, out / "trajectory.csv")
    summary = summarize(traj, cfg, status)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def execute_to(cfg: ExperimentConfig, out_dir) -> dict:
    """Run and write outputs; on abort the partial trajectory is still written and re-raised."""
    try:
        traj = execute(cfg)
    except RunAborted as exc:
        if exc.trajectory is not None:
            write_outputs(exc.trajectory, cfg, out_dir, status=f"aborted: {exc}")
        raise
    return write_outputs(traj, cfg, out_dir)
