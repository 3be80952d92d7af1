"""Score-distillation guidance variants and the algebra they share.

Every function accepts a single latent of shape (d,) or a batch of shape
(n, d) together with a scalar or (n,) timestep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .prior import Condition
from .schedule import NoiseSchedule, eta, weight_w

VARIANTS = ("vanilla-sds", "anchords", "anchords-filter", "anchords-finetune", "neg-source")
ANCHORED = ("anchords", "anchords-filter", "anchords-finetune")


@dataclass(frozen=True)
class GuidanceConfig:
    variant: str = "anchords"
    omega: float | None = None
    gamma: float = 0.03
    include_m2: bool = True
    target_cfg: bool = False
    weight_mode: str = "constant-one"
    anchor_text: str | None = None
    neg_label: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.omega is None:
            object.__setattr__(self, "omega", 100.0 if self.variant == "vanilla-sds" else 7.5)
        if self.omega < 0:
            raise ValueError("omega must be non-negative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.variant == "neg-source" and self.neg_label is None:
            raise ValueError("neg-source guidance needs neg_label")


@dataclass
class GuidanceResult:
    eps_target: np.ndarray
    eps_source: np.ndarray
    eps_uncond: np.ndarray | None
    m1: np.ndarray
    m2: np.ndarray
    zhat_target: np.ndarray
    zhat_source: np.ndarray
    zhat_anchored: np.ndarray | None
    rec_loss: np.ndarray | float
    filter_mask: np.ndarray | int
    grad_z: np.ndarray
    extras: dict = field(default_factory=dict)

    @property
    def rec_loss_per_dim(self):
        return np.asarray(self.rec_loss) / self.grad_z.shape[-1]


def _check_same(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch: {sorted(shapes)}")


def _per_sample(x, like):
    x = np.asarray(x, dtype=float)
    return x[..., None] if x.ndim and np.ndim(like) > 1 else x


def cfg_combine(eps_cond, eps_uncond, omega):
    eps_cond = np.asarray(eps_cond, dtype=float)
    eps_uncond = np.asarray(eps_uncond, dtype=float)
    _check_same(eps_cond, eps_uncond)
    return (1.0 + omega) * eps_cond - omega * eps_uncond


def sds_residual(eps_cfg, eps, t, sched: NoiseSchedule, mode: str = "constant-one"):
    eps_cfg = np.asarray(eps_cfg, dtype=float)
    eps = np.asarray(eps, dtype=float)
    _check_same(eps_cfg, eps)
    return _per_sample(weight_w(t, sched, mode), eps) * (eps_cfg - eps)


def decompose(eps_cond, eps_uncond, eps):
    """Split the CFG residual into the mode-seeking and variance-reduction terms."""
    eps_cond, eps_uncond, eps = (np.asarray(a, dtype=float) for a in (eps_cond, eps_uncond, eps))
    _check_same(eps_cond, eps_uncond, eps)
    return eps_cond - eps_uncond, eps_uncond - eps


def cfg_residual_from_terms(m1, m2, omega):
    """Rebuild ε̂_CFG - ε from (m1, m2); the coefficient on m1 is 1 + ω."""
    return (1.0 + omega) * np.asarray(m1) + np.asarray(m2)


def pseudo_reconstruct(z_t, eps_hat, t, sched: NoiseSchedule):
    """One-step clean estimate (z_t - √(1-ᾱ_t) ε̂) / √ᾱ_t."""
    z_t = np.asarray(z_t, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    _check_same(z_t, eps_hat)
    ab = _per_sample(sched.alpha_bar(t), z_t)
    if np.any(ab <= 0):
        raise ValueError("alpha_bar is zero; the clean latent is unrecoverable")
    return (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def reconstruction_loss(zhat, image):
    """Squared error per sample; the decoder is the identity."""
    return np.sum((np.asarray(zhat) - np.asarray(image)) ** 2, axis=-1)


def filter_mask(rec_loss_per_dim, gamma):
    """1 where the reconstruction is trusted (strictly below γ), else 0."""
    return (np.asarray(rec_loss_per_dim) < gamma).astype(int)[()]


def _apply_mask(grad_z, mask):
    return grad_z * _per_sample(mask, grad_z)


def anchords_guidance(prior, z_t, t, text, image, cfg: GuidanceConfig, eps, sched,
                      cond_image=None):
    """Target prediction minus an image-anchored source prediction, plus m2.

    ``image`` is the render the reconstruction is scored against;
    ``cond_image`` is the signal fed to the model and defaults to ``image``.
    """
    if image is None:
        raise ValueError("anchored guidance needs the rendered image")
    z_t = np.asarray(z_t, dtype=float)
    eps = np.asarray(eps, dtype=float)
    _check_same(z_t, eps)
    eps_text = prior.predict_noise(z_t, t, Condition(text), sched)
    eps_uncond = prior.predict_noise(z_t, t, Condition(None), sched)
    eps_target = cfg_combine(eps_text, eps_uncond, cfg.omega) if cfg.target_cfg else eps_text
    cond_image = image if cond_image is None else cond_image
    eps_source = prior.predict_noise(z_t, t, Condition(cfg.anchor_text, cond_image), sched)
    m1, m2 = decompose(eps_text, eps_uncond, eps)
    g = eps_target - eps_source
    resid = g + m2 if cfg.include_m2 else g
    grad_z = _per_sample(weight_w(t, sched, cfg.weight_mode), z_t) * resid
    zhat_anchored = pseudo_reconstruct(z_t, eps_source, t, sched)
    rec = reconstruction_loss(zhat_anchored, image)
    mask = filter_mask(rec / z_t.shape[-1], cfg.gamma)
    if cfg.variant == "anchords-filter":
        grad_z = _apply_mask(grad_z, mask)
    return GuidanceResult(
        eps_target=eps_target, eps_source=eps_source, eps_uncond=eps_uncond,
        m1=m1, m2=m2,
        zhat_target=pseudo_reconstruct(z_t, eps_text, t, sched),
        zhat_source=pseudo_reconstruct(z_t, eps_uncond, t, sched),
        zhat_anchored=zhat_anchored, rec_loss=rec, filter_mask=mask, grad_z=grad_z,
        extras={"g": g},
    )


def vanilla_sds_guidance(prior, z_t, t, text, cfg: GuidanceConfig, eps, sched, image=None):
    z_t = np.asarray(z_t, dtype=float)
    eps = np.asarray(eps, dtype=float)
    _check_same(z_t, eps)
    eps_text = prior.predict_noise(z_t, t, Condition(text), sched)
    eps_uncond = prior.predict_noise(z_t, t, Condition(None), sched)
    eps_cfg = cfg_combine(eps_text, eps_uncond, cfg.omega)
    m1, m2 = decompose(eps_text, eps_uncond, eps)
    zhat_source = pseudo_reconstruct(z_t, eps_uncond, t, sched)
    rec = reconstruction_loss(zhat_source, image) if image is not None else np.zeros(z_t.shape[:-1])[()]
    return GuidanceResult(
        eps_target=eps_cfg, eps_source=eps_uncond, eps_uncond=eps_uncond, m1=m1, m2=m2,
        zhat_target=pseudo_reconstruct(z_t, eps_text, t, sched), zhat_source=zhat_source,
        zhat_anchored=None, rec_loss=rec, filter_mask=np.ones(z_t.shape[:-1], dtype=int)[()],
        grad_z=sds_residual(eps_cfg, eps, t, sched, cfg.weight_mode),
        extras={"g": eps_cfg - eps_uncond},
    )


def neg_source_guidance(prior, z_t, t, text, y_neg, cfg: GuidanceConfig, eps, sched, image=None):
    """Static negative-prompt source: ε̂(y) - ε̂(y_neg), plus m2 when configured."""
    z_t = np.asarray(z_t, dtype=float)
    eps = np.asarray(eps, dtype=float)
    _check_same(z_t, eps)
    eps_text = prior.predict_noise(z_t, t, Condition(text), sched)
    eps_uncond = prior.predict_noise(z_t, t, Condition(None), sched)
    eps_target = cfg_combine(eps_text, eps_uncond, cfg.omega) if cfg.target_cfg else eps_text
    eps_source = prior.predict_noise(z_t, t, Condition(y_neg), sched)
    m1, m2 = decompose(eps_text, eps_uncond, eps)
    g = eps_target - eps_source
    resid = g + m2 if cfg.include_m2 else g
    zhat_source = pseudo_reconstruct(z_t, eps_source, t, sched)
    rec = reconstruction_loss(zhat_source, image) if image is not None else np.zeros(z_t.shape[:-1])[()]
    return GuidanceResult(
        eps_target=eps_target, eps_source=eps_source, eps_uncond=eps_uncond, m1=m1, m2=m2,
        zhat_target=pseudo_reconstruct(z_t, eps_text, t, sched), zhat_source=zhat_source,
        zhat_anchored=None, rec_loss=rec, filter_mask=np.ones(z_t.shape[:-1], dtype=int)[()],
        grad_z=_per_sample(weight_w(t, sched, cfg.weight_mode), z_t) * resid,
        extras={"g": g},
    )


def guide(prior, z_t, t, text, image, cfg: GuidanceConfig, eps, sched, cond_image=None):
    """Dispatch on ``cfg.variant``."""
    if cfg.variant == "vanilla-sds":
        return vanilla_sds_guidance(prior, z_t, t, text, cfg, eps, sched, image=image)
    if cfg.variant == "neg-source":
        return neg_source_guidance(prior, z_t, t, text, cfg.neg_label, cfg, eps, sched, image=image)
    return anchords_guidance(prior, z_t, t, text, image, cfg, eps, sched, cond_image=cond_image)


def m1_via_reconstructions(z_t, eps_cond, eps_uncond, t, sched):
    """m1 rebuilt from the one-step reconstructions: η (ẑ_source - ẑ_target).

    Since ẑ = (z_t - √(1-ᾱ) ε̂)/√ᾱ, the reconstruction gap is -m1/η, so the
    source-minus-target ordering is the one that reproduces m1 exactly.
    """
    zt_target = pseudo_reconstruct(z_t, eps_cond, t, sched)
    zt_source = pseudo_reconstruct(z_t, eps_uncond, t, sched)
    return _per_sample(eta(t, sched), np.asarray(z_t)) * (zt_source - zt_target)
