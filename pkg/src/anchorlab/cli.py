"""Command-line runner: run, sweep, validate, train-prior, report.

Exit codes: 0 success, 1 configuration error, 2 runtime failure,
3 validation failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .guidance import VARIANTS

log = logging.getLogger("anchorlab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2, 3
OUT_ENV = "ANCHORLAB_OUT"


def default_out(config_path, cfg=None):
    if cfg is not None and cfg.out:
        return Path(cfg.out)
    root = Path(os.environ.get(OUT_ENV, "runs"))
    return root / Path(config_path).stem


def parse_seeds(text):
    """``"0,1,5"`` or ``"0-49"`` or a mix of both."""
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ConfigError("--seeds: at least one seed is required")
    return seeds


def parse_variants(text):
    variants = [v.strip() for v in str(text).split(",") if v.strip()]
    if not variants:
        raise ConfigError("--variants: at least one variant is required")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"--variants: unknown variant {v!r}; expected one of {list(VARIANTS)}")
    return variants


def cmd_run(args):
    from .experiment import execute_to
    from .optimizer import RunAborted

    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.variant is not None:
        parse_variants(args.variant)
        changes["guidance"] = {"variant": args.variant}
    cfg = cfg.with_run(**changes) if changes else cfg
    out = Path(args.out) if args.out else default_out(args.config, cfg)
    try:
        summary = execute_to(cfg, out)
    except RunAborted as exc:
        log.error("run aborted: %s (partial outputs in %s)", exc, out)
        return EXIT_RUNTIME
    print(json.dumps({"out": str(out), **summary["metrics"]}, sort_keys=True))
    return EXIT_OK


def _sweep_child(config_path, seed, variant, out_dir):
    from .experiment import execute_to

    try:
        cfg = load_config(config_path).with_run(seed=seed, guidance={"variant": variant})
        summary = execute_to(cfg, out_dir)
        return {"seed": seed, "variant": variant, "ok": True, "summary": summary}
    except Exception as exc:  # recorded, the sweep continues
        return {"seed": seed, "variant": variant, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


def aggregate_sweep(results, variants, seeds):
    """Per-variant means and win-rates of terminal nearest-mode distance."""
    dist = {v: {} for v in variants}
    coh = {v: [] for v in variants}
    for r in results:
        if r["ok"]:
            m = r["summary"]["metrics"]
            dist[r["variant"]][r["seed"]] = m["nearest_mode_distance"]
            if m.get("update_coherence") is not None:
                coh[r["variant"]].append(m["update_coherence"])
    rows = []
    for v in variants:
        vals = np.array(list(dist[v].values()), dtype=float)
        row = {"variant": v, "n_runs": int(vals.size),
               "mean_terminal_distance": float(vals.mean()) if vals.size else float("nan"),
               "std_terminal_distance": float(vals.std()) if vals.size else float("nan"),
               "mean_update_coherence": float(np.mean(coh[v])) if coh[v] else float("nan")}
        best = 0
        paired_seeds = [s for s in seeds if all(s in dist[u] for u in variants)]
        for s in paired_seeds:
            others = [dist[u][s] for u in variants if u != v]
            if all(dist[v][s] < o for o in others):
                best += 1
        row["win_rate"] = best / len(paired_seeds) if paired_seeds else float("nan")
        for u in variants:
            if u == v:
                continue
            common = [s for s in seeds if s in dist[v] and s in dist[u]]
            wins = sum(dist[v][s] < dist[u][s] for s in common)
            row[f"beats_{u}"] = wins / len(common) if common else float("nan")
        rows.append(row)
    return rows


def cmd_sweep(args):
    from .experiment import _fmt

    cfg = load_config(args.config)
    seeds = parse_seeds(args.seeds)
    variants = parse_variants(args.variants)
    out = Path(args.out) if args.out else default_out(args.config, cfg)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(args.config, s, v, str(out / f"seed{s}_{v}")) for s in seeds for v in variants]
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_child, *zip(*jobs)))
    else:
        results = [_sweep_child(*j) for j in jobs]
    failures = [r for r in results if not r["ok"]]
    for f in failures:
        log.error("seed %s variant %s failed: %s", f["seed"], f["variant"], f["error"])
    pairing = {}
    for s in seeds:
        hashes = {r["variant"]: r["summary"]["stream_hash"] for r in results
                  if r["ok"] and r["seed"] == s}
        pairing[str(s)] = {"hashes": hashes, "paired": len(set(hashes.values())) <= 1}
    rows = aggregate_sweep(results, variants, seeds)
    cols = list(dict.fromkeys(c for row in rows for c in row))

    def cell(v):
        if v is None:
            return ""
        return str(v) if isinstance(v, (str, int)) else _fmt(v)

    with open(out / "sweep.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(cell(row.get(c)) for c in cols) + "\n")
    (out / "sweep.json").write_text(json.dumps({
        "seeds": seeds, "variants": variants, "pairing": pairing,
        "failures": [{k: f[k] for k in ("seed", "variant", "error")} for f in failures],
        "aggregate": rows}, indent=2, sort_keys=True) + "\n")
    unpaired = [s for s, p in pairing.items() if not p["paired"]]
    if unpaired:
        log.error("random streams differ across variants for seeds %s", unpaired)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return EXIT_RUNTIME if failures or unpaired else EXIT_OK


def cmd_validate(args):
    from .checks import run_checks

    checks = run_checks(seed=args.seed)
    report = {"passed": all(c["passed"] for c in checks), "n_checks": len(checks), "checks": checks}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_VALIDATION


def cmd_train_prior(args):
    import torch

    from .experiment import _fmt
    from .learned import (Denoiser, TrainingDiverged, denoising_loss, pretrain, save_denoiser,
                          validation_batch)

    cfg = load_config(args.config)
    lc = cfg.learned
    out = Path(args.out) if args.out else default_out(args.config, cfg)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
    elif lc.get("checkpoint"):
        ckpt = Path(lc["checkpoint"])
    else:
        ckpt = out / "denoiser.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    seed = lc.get("seed", 0)
    steps = args.steps if args.steps is not None else lc.get("train_steps", 20_000)
    model = Denoiser(cfg.prior.dim, sorted(cfg.prior.text_map), cfg.schedule.total_steps, seed=seed)
    vb = validation_batch(cfg.prior, cfg.schedule, model.labels)
    with torch.no_grad():
        init_loss = float(denoising_loss(model, vb))
    try:
        model, curve = pretrain(model, cfg.prior, cfg.schedule, steps,
                                seed, batch=lc.get("batch", 256), lr=lc.get("lr", 1e-3))
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_RUNTIME
    with torch.no_grad():
        final_loss = float(denoising_loss(model, vb))
    save_denoiser(model, ckpt)
    with open(out / "loss_curve.csv", "w") as fh:
        fh.write("step,train_loss\n")
        for k, v in curve:
            fh.write(f"{k},{_fmt(v)}\n")
    summary = {"checkpoint": str(ckpt), "initial_validation_loss": init_loss,
               "final_validation_loss": final_loss, "steps": steps,
               "config": cfg.raw}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: summary[k] for k in ("checkpoint", "initial_validation_loss",
                                              "final_validation_loss")}))
    return EXIT_OK


def cmd_report(args):
    from .charts import write_chart
    from .experiment import read_csv_columns

    root = Path(args.out)
    csvs = sorted(root.glob("**/trajectory.csv"))
    if not csvs:
        raise ConfigError(f"--out: no trajectory.csv under {root}")
    charts = {"nearest_mode_distance": ("nearest_mode_distance", "nearest_mode_distance_mean"),
              "grad_norm": ("grad_norm", "grad_norm_mean"),
              "rec_loss": ("rec_loss", "rec_loss_mean"),
              "source_target_distance": ("source_target_distance",)}
    written = []
    for name, keys in charts.items():
        series = {}
        for path in csvs:
            cols = read_csv_columns(path)
            key = next((k for k in keys if k in cols), None)
            if key is None:
                continue
            label = str(path.parent.relative_to(root)) if path.parent != root else "run"
            series[label] = (cols["tau"], cols[key])
        if series and any(np.isfinite(y).any() for _, y in series.values()):
            target = root / f"{name}.svg"
            write_chart(target, series, name.replace("_", " "), ylabel=name,
                        logy=name in ("grad_norm", "source_target_distance", "rec_loss"))
            written.append(str(target))
    print(json.dumps({"charts": written}))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="anchorlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="execute one run")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--variant")
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("sweep", help="seeds x variants with common random numbers")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--seeds", default="0")
    s.add_argument("--variants", default="vanilla-sds,anchords")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    v = sub.add_parser("validate", help="oracle and identity checks")
    v.add_argument("--out")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_validate)
    t = sub.add_parser("train-prior", help="pretrain the learned denoiser")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--checkpoint")
    t.add_argument("--steps", type=int, help="override learned.train_steps")
    t.set_defaults(func=cmd_train_prior)
    rp = sub.add_parser("report", help="SVG charts from trajectory CSVs")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (OSError, RuntimeError) as exc:
        log.error("runtime failure: %s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
