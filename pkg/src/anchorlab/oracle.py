"""Brute-force validators.

Nothing here calls the closed-form paths in ``prior`` or ``guidance``: the
conditioned densities are rebuilt from the joint Gaussian of (clean latent,
image observation, noisy latent) for each component.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from .scene import decode


class OracleError(RuntimeError):
    pass


def _components(prior, cond):
    if cond.text is None:
        idx = list(range(len(prior.weights)))
    else:
        if cond.text not in prior.text_map:
            raise ValueError(f"unknown text label {cond.text!r}")
        idx = list(prior.text_map[cond.text])
    return idx


def _joint_blocks(prior, k, ab, with_image):
    """Per-coordinate mean offsets and covariance of (z, [I], z_t) for component k."""
    v = prior.variances[k]
    a = np.sqrt(ab)
    s2 = 1.0 - ab
    if with_image:
        r2 = prior.image_bandwidth ** 2
        cov = np.array([[v, v, a * v],
                        [v, v + r2, a * v],
                        [a * v, a * v, ab * v + s2]])
        scale = np.array([1.0, 1.0, a])
    else:
        cov = np.array([[v, a * v], [a * v, ab * v + s2]])
        scale = np.array([1.0, a])
    return scale, cov


def _observed_logpdf(prior, z_t, ab, cond):
    """Per-component log of w_k · p(observations | k), observations = ([I], z_t)."""
    idx = _components(prior, cond)
    with_image = cond.image is not None
    d = prior.dim
    out = []
    for k in idx:
        scale, cov = _joint_blocks(prior, k, ab, with_image)
        obs_cov = cov[1:, 1:]
        mu = prior.means[k]
        if with_image:
            img = decode(np.asarray(cond.image, dtype=float), prior.image_encoding)
            obs = np.concatenate([img, z_t])
            mean = np.concatenate([mu, np.sqrt(ab) * mu])
        else:
            obs = np.asarray(z_t, dtype=float)
            mean = np.sqrt(ab) * mu
        full = np.kron(obs_cov, np.eye(d))
        with np.errstate(divide="ignore"):
            logw = np.log(prior.weights[k])
        out.append(logw + multivariate_normal(mean, full).logpdf(obs))
    return idx, np.array(out)


def log_density(prior, z_t, t, cond, sched):
    """log p(z_t | c) up to a z_t-independent constant, by direct density summation."""
    ab = float(sched.alpha_bar(t))
    _, logs = _observed_logpdf(prior, np.asarray(z_t, dtype=float), ab, cond)
    dens = np.exp(logs)
    total = dens.sum()
    if not np.isfinite(total) or total <= 0:
        raise OracleError(
            f"mixture density underflowed at z_t={np.asarray(z_t).tolist()} (t={t}); "
            f"largest component log-density {logs.max():.1f}")
    return float(np.log(total))


def numeric_score(prior, z_t, t, cond, sched, h: float = 1e-5):
    """-σ_t times the central-difference gradient of the log noised density."""
    if not h > 0:
        raise ValueError("step h must be positive")
    z_t = np.asarray(z_t, dtype=float)
    grad = np.empty_like(z_t)
    for i in range(z_t.size):
        e = np.zeros_like(z_t)
        e[i] = h
        grad[i] = (log_density(prior, z_t + e, t, cond, sched)
                   - log_density(prior, z_t - e, t, cond, sched)) / (2 * h)
    return -np.sqrt(1.0 - float(sched.alpha_bar(t))) * grad


def fd_gradient(loss, theta, h: float = 1e-6):
    """Central differences of a deterministic scalar loss."""
    if not h > 0:
        raise ValueError("step h must be positive")
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    flat = grad.reshape(-1)
    for i in range(theta.size):
        e = np.zeros(theta.size)
        e[i] = h
        e = e.reshape(theta.shape)
        hi, lo = loss(theta + e), loss(theta - e)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise OracleError(f"non-finite loss at coordinate {i}")
        flat[i] = (hi - lo) / (2 * h)
    return grad


def posterior_mean(prior, z_t, t, cond, sched):
    """E[z | z_t, c] by Gaussian conditioning inside each component, then mixing."""
    ab = float(sched.alpha_bar(t))
    z_t = np.asarray(z_t, dtype=float)
    idx, logs = _observed_logpdf(prior, z_t, ab, cond)
    resp = np.exp(logs - logsumexp(logs))
    with_image = cond.image is not None
    if with_image:
        img = decode(np.asarray(cond.image, dtype=float), prior.image_encoding)
    out = np.zeros(prior.dim)
    for r, k in zip(resp, idx):
        scale, cov = _joint_blocks(prior, k, ab, with_image)
        mu = prior.means[k]
        obs = np.stack([img, z_t]) if with_image else z_t[None]
        resid = obs - scale[1:, None] * mu[None]
        gain = np.linalg.solve(cov[1:, 1:], cov[1:, 0])
        out += r * (mu + gain @ resid)
    return out
