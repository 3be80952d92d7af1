"""Mechanism-level measurements: mode fidelity, update coherence, view agreement, transport."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .prior import Condition, GmmPrior, sample
from .scene import ViewSet, render


@dataclass
class MetricReport:
    nearest_mode_distance: float
    mode_id: int
    update_coherence: float | None = None
    view_consistency: float | None = None
    source_target_distance: float | None = None

    def as_dict(self):
        return {k: v for k, v in self.__dict__.items()}


def nearest_mode(x, prior: GmmPrior, text):
    """Distance to the closest text-selected component mean and that component's index.

    Ties go to the lowest index. Batched ``x`` of shape (n, d) returns arrays.
    """
    idx = np.asarray(prior.subset(text))
    x = np.asarray(x, dtype=float)
    dist = np.linalg.norm(x[..., None, :] - prior.means[idx], axis=-1)
    j = np.argmin(dist, axis=-1)
    d = np.take_along_axis(dist, np.asarray(j)[..., None], axis=-1)[..., 0]
    return d[()], idx[j][()]


def update_coherence(grads) -> float:
    """Mean cosine between consecutive non-zero gradients.

    ``grads`` is (S, D), or (S, P, D) for an ensemble where the result is the
    mean over particles. A trajectory object is accepted too.
    """
    grads = getattr(grads, "grad_theta", grads)
    grads = np.asarray(grads, dtype=float)
    if grads.ndim == 3:
        return float(np.mean([update_coherence(grads[:, p]) for p in range(grads.shape[1])]))
    norms = np.linalg.norm(grads, axis=1)
    keep = norms > 0
    g = grads[keep] / norms[keep, None]
    if g.shape[0] < 2:
        raise ValueError("need at least two steps with a non-zero gradient")
    return float(np.mean(np.sum(g[1:] * g[:-1], axis=1)))


def view_consistency(theta, views: ViewSet, prior: GmmPrior, text) -> float:
    """Fraction of (particle, view pair) combinations whose renders share a nearest mode."""
    if len(views) < 2:
        raise ValueError("view consistency needs at least two views")
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    ids = np.stack([nearest_mode(render(theta, v), prior, text)[1] for v in views.views], axis=1)
    iu, ju = np.triu_indices(len(views), k=1)
    return float(np.mean(ids[:, iu] == ids[:, ju]))


def energy_distance(x, y) -> float:
    """V-statistic energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'|."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    return float(2 * cdist(x, y).mean() - cdist(x, x).mean() - cdist(y, y).mean())


def _mean_pairwise(y, chunk=2048):
    total = 0.0
    for i in range(0, len(y), chunk):
        total += cdist(y[i:i + chunk], y).sum()
    return total / (len(y) ** 2)


class TargetDistance:
    """Energy distance to a fixed set of seeded target samples; the target self-term is cached."""

    def __init__(self, prior: GmmPrior, text, seed=0, n_target: int = 10_000):
        self.samples = sample(prior, Condition(text), seed, n=n_target)
        self._yy = _mean_pairwise(self.samples)

    def __call__(self, x) -> float:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xy = cdist(x, self.samples).mean()
        return float(2 * xy - cdist(x, x).mean() - self._yy)


def source_target_distance(renders, prior: GmmPrior, text, seed=0, n_target: int = 10_000) -> float:
    renders = np.atleast_2d(np.asarray(renders, dtype=float))
    if renders.shape[0] < 2:
        raise ValueError("ensemble needs at least two particles")
    return TargetDistance(prior, text, seed, n_target)(renders)


def smoothed_violations(series, window: int) -> float:
    """Fraction of upward steps in the moving average of ``series``."""
    s = np.asarray(series, dtype=float)
    if s.size < window + 1:
        raise ValueError("series shorter than the smoothing window")
    sm = np.convolve(s, np.ones(window) / window, mode="valid")
    return float(np.mean(np.diff(sm) > 0))
