"""Per-step score-distillation loop: render, noise, guide, pull back, update."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .guidance import GuidanceConfig, GuidanceResult, guide
from .metrics import TargetDistance, nearest_mode
from .scene import Asset, ViewSet, backproject_per_particle, encode, render_per_particle
from .schedule import NoiseSchedule


class RunAborted(RuntimeError):
    """A step produced a non-finite gradient; ``trajectory`` holds the steps completed."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class RunConfig:
    steps: int = 2000
    lr: float = 0.01
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    t_min_frac: float = 0.02
    t_max_frac: float = 0.98
    seed: int = 0
    finetune_period: int = 10
    finetune_lr: float = 1e-4
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    prior_kind: str = "analytic"
    text: str = "y"
    encoding: str = "identity"
    init: tuple = (0.0, 0.0)
    particles: int = 0
    init_spread: float = 0.0
    metrics_every: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not (0 < self.t_min_frac < self.t_max_frac < 1):
            raise ValueError("need 0 < t_min_frac < t_max_frac < 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.prior_kind not in ("analytic", "learned"):
            raise ValueError(f"unknown prior kind {self.prior_kind!r}")
        if self.lr < 0 or self.finetune_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.finetune_period < 1 or self.metrics_every < 1:
            raise ValueError("finetune_period and metrics_every must be positive")
        object.__setattr__(self, "init", tuple(float(x) for x in self.init))


class ParamOptimizer:
    """Plain SGD or Adam on a numpy parameter array."""

    def __init__(self, cfg: RunConfig, shape):
        self.cfg = cfg
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.k = 0

    def update(self, theta, grad):
        c = self.cfg
        if c.optimizer == "sgd":
            return theta - c.lr * grad
        self.k += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad ** 2
        mhat = self.m / (1 - c.beta1 ** self.k)
        vhat = self.v / (1 - c.beta2 ** self.k)
        return theta - c.lr * mhat / (np.sqrt(vhat) + c.adam_eps)


def time_range(cfg: RunConfig, sched: NoiseSchedule):
    T = sched.total_steps
    lo = max(1, int(np.ceil(cfg.t_min_frac * T)))
    hi = min(T, int(np.floor(cfg.t_max_frac * T)))
    return lo, hi


def draw_step(rng, n_views, n, d, t_range):
    """One step's (view, t, eps) draws, always in this order so variants stay paired."""
    view = rng.integers(n_views, size=n)
    t = rng.integers(t_range[0], t_range[1] + 1, size=n)
    eps = rng.standard_normal((n, d))
    return view, t, eps


def initial_theta(cfg: RunConfig, d_world: int):
    init = np.asarray(cfg.init, dtype=float)
    if init.size != d_world:
        raise ValueError(f"init has {init.size} entries, views expect {d_world}")
    if cfg.particles:
        rng = np.random.default_rng([cfg.seed, 1])
        return init + cfg.init_spread * rng.standard_normal((cfg.particles, d_world))
    return init.copy()


def step(theta, views: ViewSet, prior, sched, cfg: RunConfig, tau: int, rng, opt: ParamOptimizer,
         finetuner=None):
    """Advance the asset by one optimisation step.

    ``theta`` is (D,) or (P, D). Returns the new parameters, the guidance
    result, the pulled-back gradient, the draws and the fine-tune loss (NaN
    when no fine-tune happened).
    """
    single = theta.ndim == 1
    th = np.atleast_2d(theta)
    n, d = th.shape[0], views[0].shape[0]
    view, t, eps = draw_step(rng, len(views), n, d, time_range(cfg, sched))
    z = render_per_particle(th, views, view)
    cond_image = encode(z, cfg.encoding)
    ab = sched.alpha_bar(t)
    z_t = np.sqrt(ab)[:, None] * z + np.sqrt(1 - ab)[:, None] * eps
    res = guide(prior, z_t, t, cfg.text, z, cfg.guidance, eps, sched, cond_image=cond_image)
    grad_theta = backproject_per_particle(np.sqrt(ab)[:, None] * res.grad_z, views, view)
    if not np.all(np.isfinite(grad_theta)):
        raise RunAborted(f"non-finite gradient at step {tau} (t={t.tolist()})")
    ft_loss = np.nan
    if finetuner is not None and cfg.guidance.variant == "anchords-finetune":
        if np.any(np.asarray(res.filter_mask) == 0) or tau % cfg.finetune_period == 0:
            ft_loss = finetuner(z_t, t, cond_image, z)
    new = opt.update(th, grad_theta)
    if single:
        return new[0], res, grad_theta[0], (view[0], t[0], eps[0]), ft_loss
    return new, res, grad_theta, (view, t, eps), ft_loss


@dataclass
class Trajectory:
    tau: np.ndarray
    t: np.ndarray
    view: np.ndarray
    theta: np.ndarray
    grad_theta: np.ndarray
    grad_norm: np.ndarray
    g_norm: np.ndarray
    m1_norm: np.ndarray
    m2_norm: np.ndarray
    rec_loss: np.ndarray
    filter_mask: np.ndarray
    finetune_loss: np.ndarray
    nearest_mode_distance: np.ndarray
    mode_id: np.ndarray
    source_target_distance: np.ndarray
    theta0: np.ndarray
    initial_distance: float
    stream_hash: str
    config: RunConfig | None = None

    def __len__(self):
        return len(self.tau)

    @property
    def is_ensemble(self):
        return self.theta.ndim == 3


class _Recorder:
    def __init__(self):
        self.rows = {k: [] for k in (
            "tau", "t", "view", "theta", "grad_theta", "grad_norm", "g_norm", "m1_norm",
            "m2_norm", "rec_loss", "filter_mask", "finetune_loss", "nearest_mode_distance",
            "mode_id", "source_target_distance")}

    def add(self, **kw):
        for k, v in kw.items():
            self.rows[k].append(v)

    def build(self, **extra):
        arrays = {k: np.asarray(v) for k, v in self.rows.items()}
        return Trajectory(**arrays, **extra)


def _norm(x):
    return np.linalg.norm(np.asarray(x), axis=-1)


def run(cfg: RunConfig, prior, views: ViewSet, sched: NoiseSchedule, finetuner=None,
        target_distance: TargetDistance | None = None, reference=None) -> Trajectory:
    """Execute ``cfg.steps`` steps; deterministic given ``cfg.seed``.

    ``prior`` drives the guidance; metrics are measured against ``reference``
    (default ``prior``), which must be analytic. Distances use the render
    through the first view.
    """
    ref = prior if reference is None else reference
    d_world = views[0].shape[1]
    theta = initial_theta(cfg, d_world)
    theta0 = theta.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = ParamOptimizer(cfg, theta.shape)
    hasher = hashlib.sha256()
    rec = _Recorder()
    v0 = views[0]
    ens = theta.ndim == 2
    if target_distance is None and ens:
        target_distance = TargetDistance(ref, cfg.text, seed=cfg.seed)
    init_dist = (target_distance(theta0 @ v0.T) if ens
                 else float(nearest_mode(theta0 @ v0.T, ref, cfg.text)[0]))

    def finish():
        return rec.build(theta0=theta0, initial_distance=init_dist,
                         stream_hash=hasher.hexdigest(), config=cfg)

    for tau in range(1, cfg.steps + 1):
        try:
            theta, res, gth, (view, t, eps), ft = step(
                theta, views, prior, sched, cfg, tau, rng, opt, finetuner)
        except RunAborted as exc:
            exc.trajectory = finish()
            raise
        for arr in (np.asarray(view), np.asarray(t), np.asarray(eps)):
            hasher.update(np.ascontiguousarray(arr).tobytes())
        dist, mode = nearest_mode(theta @ v0.T, ref, cfg.text)
        std = np.nan
        if ens and (tau % cfg.metrics_every == 0 or tau == cfg.steps):
            std = target_distance(theta @ v0.T)
        g = res.extras["g"]
        pick = (lambda x: np.asarray(x)) if ens else (lambda x: np.asarray(x).reshape(-1)[0])
        rec.add(tau=tau, t=t, view=view, theta=theta.copy(), grad_theta=gth,
                grad_norm=_norm(gth), g_norm=pick(_norm(g)), m1_norm=pick(_norm(res.m1)),
                m2_norm=pick(_norm(res.m2)), rec_loss=pick(res.rec_loss_per_dim),
                filter_mask=pick(res.filter_mask), finetune_loss=ft,
                nearest_mode_distance=dist, mode_id=mode, source_target_distance=std)
    return finish()
