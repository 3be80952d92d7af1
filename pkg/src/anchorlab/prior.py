"""Gaussian-mixture diffusion prior with closed-form conditional noise predictions.

A text label restricts the mixture to a subset of components. An image
condition multiplies the clean density by an isotropic Gaussian kernel of
bandwidth ``image_bandwidth`` centred on the image, which keeps every
conditional a Gaussian mixture.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import ENCODINGS, decode
from .schedule import NoiseSchedule


def logsumexp(a, axis=-1, keepdims=False):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class Condition:
    """Conditioning pair. ``text=None`` is the null prompt; ``image`` may be (d,) or (n, d)."""

    text: str | None = None
    image: np.ndarray | None = None

    def with_image(self, image):
        return Condition(self.text, image)

    @property
    def is_unconditional(self):
        return self.text is None and self.image is None


NULL = Condition()


@dataclass(frozen=True)
class GmmPrior:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    text_map: dict = field(default_factory=dict)
    image_bandwidth: float = 0.1
    image_encoding: str = "identity"

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        var = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if mu.shape[0] != w.size or var.size != w.size:
            raise ValueError("weights, means and variances disagree on component count")
        if np.any(w < 0):
            raise ValueError("component weights must be non-negative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        if np.any(var < 0):
            raise ValueError("component variances must be non-negative")
        if not self.image_bandwidth > 0:
            raise ValueError("image_bandwidth must be positive")
        if self.image_encoding not in ENCODINGS:
            raise ValueError(f"unknown image encoding {self.image_encoding!r}")
        tmap = {}
        for label, idx in dict(self.text_map).items():
            idx = tuple(int(i) for i in idx)
            if not idx or min(idx) < 0 or max(idx) >= w.size:
                raise ValueError(f"text label {label!r} maps to invalid components {idx}")
            if not w[list(idx)].sum() > 0:
                raise ValueError(f"text label {label!r} selects only zero-weight components")
            tmap[str(label)] = tuple(sorted(set(idx)))
        for arr in (w, mu, var):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "text_map", tmap)

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.weights.size

    def subset(self, text):
        if text is None:
            return tuple(range(self.n_components))
        try:
            return self.text_map[text]
        except KeyError:
            raise ValueError(f"unknown text label {text!r}") from None

    def predict_noise(self, z_t, t, cond, sched):
        return predict_noise(self, z_t, t, cond, sched)


def conditioned_components(prior: GmmPrior, cond: Condition):
    """Clean-space mixture parameters after text restriction and image product.

    Returns ``(log_weights, means, variances)`` with shapes ``(..., K)``,
    ``(..., K, d)``, ``(..., K)``; the leading axis is present only for a
    batched image. Log-weights are normalised.
    """
    idx = np.asarray(prior.subset(cond.text))
    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights[idx])
    mu = prior.means[idx]
    var = prior.variances[idx]
    if cond.image is not None:
        img = decode(np.asarray(cond.image, dtype=float), prior.image_encoding)
        if img.shape[-1] != prior.dim:
            raise ValueError(f"image has dimension {img.shape[-1]}, prior has {prior.dim}")
        rho2 = prior.image_bandwidth ** 2
        tot = var + rho2
        img_ = img[..., None, :]
        d2 = np.sum((img_ - mu) ** 2, axis=-1)
        logw = logw - 0.5 * prior.dim * np.log(2 * np.pi * tot) - 0.5 * d2 / tot
        mu = (rho2 * mu + var[:, None] * img_) / tot[:, None]
        var = var * rho2 / tot
        var = np.broadcast_to(var, logw.shape)
    logw = logw - logsumexp(logw, axis=-1, keepdims=True)
    return logw, mu, var


def noised_mixture(prior: GmmPrior, t: int, cond: Condition, sched: NoiseSchedule) -> GmmPrior:
    """The (conditioned) mixture describing z_t, as a standalone prior."""
    if cond.image is not None and np.ndim(cond.image) != 1:
        raise ValueError("noised_mixture takes a single image vector")
    logw, mu, var = conditioned_components(prior, cond)
    ab = float(sched.alpha_bar(t))
    w = np.exp(logw)
    return GmmPrior(w / w.sum(), np.sqrt(ab) * mu, ab * var + (1.0 - ab),
                    image_bandwidth=prior.image_bandwidth,
                    image_encoding=prior.image_encoding)


def _noised_params(prior, t, cond, sched):
    logw, mu, var = conditioned_components(prior, cond)
    ab = np.asarray(sched.alpha_bar(t), dtype=float)
    a = np.sqrt(ab)
    if ab.ndim:
        # batch of timesteps: broadcast against the (n, K, d) layout
        mu = a[:, None, None] * mu
        s = ab[:, None] * var + (1.0 - ab)[:, None]
    else:
        mu = a * mu
        s = ab * var + (1.0 - ab)
    if np.any(s <= 0):
        raise ValueError("degenerate noised variance (alpha_bar == 1 with a point mass)")
    return logw, mu, s


def log_responsibilities(prior, z_t, t, cond, sched):
    """Posterior component probabilities (log) and the noised parameters."""
    z_t = np.asarray(z_t, dtype=float)
    if z_t.shape[-1] != prior.dim:
        raise ValueError(f"z_t has dimension {z_t.shape[-1]}, prior has {prior.dim}")
    logw, mu, s = _noised_params(prior, t, cond, sched)
    d2 = np.sum((z_t[..., None, :] - mu) ** 2, axis=-1)
    logp = logw - 0.5 * prior.dim * np.log(2 * np.pi * s) - 0.5 * d2 / s
    return logp - logsumexp(logp, axis=-1, keepdims=True), mu, s


def predict_noise(prior: GmmPrior, z_t, t, cond: Condition, sched: NoiseSchedule):
    """Exact ε̂ = -σ_t ∇ log p(z_t; t, c) for the noised conditioned mixture."""
    logr, mu, s = log_responsibilities(prior, z_t, t, cond, sched)
    z_t = np.asarray(z_t, dtype=float)
    r = np.exp(logr)
    score = np.sum((r / s)[..., None] * (mu - z_t[..., None, :]), axis=-2)
    sigma = np.sqrt(1.0 - np.asarray(sched.alpha_bar(t), dtype=float))
    if sigma.ndim:
        sigma = sigma[:, None]
    return -sigma * score


def sample(prior: GmmPrior, cond: Condition, seed, n: int | None = None):
    """Ancestral draw(s) from the conditioned clean mixture; one vector when ``n`` is None."""
    if cond.image is not None and np.ndim(cond.image) != 1:
        raise ValueError("sampling takes a single image vector")
    rng = np.random.default_rng(seed)
    logw, mu, var = conditioned_components(prior, cond)
    w = np.exp(logw)
    m = 1 if n is None else int(n)
    k = rng.choice(w.size, size=m, p=w / w.sum())
    x = mu[k] + np.sqrt(var[k])[:, None] * rng.standard_normal((m, prior.dim))
    return x[0] if n is None else x


def standard_bimodal(separation: float = 2.0, variance: float = 0.1,
                     blob_variance: float = 1.0, blob_weight: float = 0.5,
                     image_bandwidth: float = 0.1) -> GmmPrior:
    """Two text-selected modes at (±separation, 0) over a diffuse blob at the origin.

    Labels: ``y`` (both modes), ``left``, ``right``, ``blob``.
    """
    wm = (1.0 - blob_weight) / 2
    return GmmPrior(
        weights=[wm, wm, blob_weight],
        means=[[-separation, 0.0], [separation, 0.0], [0.0, 0.0]],
        variances=[variance, variance, blob_variance],
        text_map={"y": [0, 1], "left": [0], "right": [1], "blob": [2]},
        image_bandwidth=image_bandwidth,
    )


def standard_unimodal(center=(2.0, 0.0), variance: float = 0.1, blob_variance: float = 1.0,
                      blob_weight: float = 0.5, image_bandwidth: float = 0.1) -> GmmPrior:
    """One text-selected mode over the diffuse blob; labels ``y`` and ``blob``."""
    return GmmPrior(
        weights=[1.0 - blob_weight, blob_weight],
        means=[list(center), [0.0, 0.0]],
        variances=[variance, blob_variance],
        text_map={"y": [0], "blob": [1]},
        image_bandwidth=image_bandwidth,
    )
