"""Linear asset analog: parameters rendered through orthonormal-row view maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Asset:
    """Optimisable parameters, shape (d_world,) or an ensemble of shape (P, d_world)."""

    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=float)
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("asset parameters must be finite")

    @property
    def is_ensemble(self):
        return self.theta.ndim == 2


@dataclass(frozen=True)
class ViewSet:
    views: tuple

    def __post_init__(self):
        mats = tuple(np.array(v, dtype=float) for v in self.views)
        if not mats:
            raise ValueError("a view set needs at least one view")
        for a in mats:
            if a.ndim != 2 or not np.allclose(a @ a.T, np.eye(a.shape[0]), atol=1e-10):
                raise ValueError("render matrices must have orthonormal rows")
            a.setflags(write=False)
        object.__setattr__(self, "views", mats)

    def __len__(self):
        return len(self.views)

    def __getitem__(self, i):
        return self.views[i]

    @property
    def stacked(self):
        return np.stack(self.views)


def render(theta, view):
    """A_v θ; batched parameters of shape (P, d_world) render row-wise."""
    theta = np.asarray(theta, dtype=float)
    view = np.asarray(view, dtype=float)
    if theta.shape[-1] != view.shape[1]:
        raise ValueError(f"cannot render {theta.shape[-1]}-d parameters with a {view.shape} view")
    return theta @ view.T


def backproject_grad(grad_z, view):
    """Adjoint of :func:`render`: A_vᵀ g."""
    grad_z = np.asarray(grad_z, dtype=float)
    view = np.asarray(view, dtype=float)
    if grad_z.shape[-1] != view.shape[0]:
        raise ValueError(f"gradient of dimension {grad_z.shape[-1]} does not match view {view.shape}")
    return grad_z @ view


def render_per_particle(theta, views: ViewSet, idx):
    """Render particle p through view ``idx[p]``."""
    a = views.stacked[idx]
    return np.einsum("pij,pj->pi", a, theta)


def backproject_per_particle(grad_z, views: ViewSet, idx):
    a = views.stacked[idx]
    return np.einsum("pij,pi->pj", a, grad_z)


def make_views(d_world: int, d: int, count: int, seed=0) -> ViewSet:
    """Deterministic view maps; planar rotations by 2πk/count when d_world = d = 2."""
    if d > d_world:
        raise ValueError(f"latent dimension {d} exceeds world dimension {d_world}")
    if count < 1:
        raise ValueError("count must be at least 1")
    if d_world == d == 2:
        views = []
        for k in range(count):
            a = 2 * np.pi * k / count
            c, s = np.cos(a), np.sin(a)
            views.append(np.array([[c, -s], [s, c]]))
        return ViewSet(tuple(views))
    rng = np.random.default_rng(seed)
    views = []
    for _ in range(count):
        q, r = np.linalg.qr(rng.standard_normal((d_world, d)))
        q = q * np.sign(np.diag(r))
        views.append(q.T.copy())
    return ViewSet(tuple(views))


ENCODINGS = ("identity", "normal")


def encode(image, mode: str = "identity"):
    """Condition signal derived from a render.

    ``identity`` passes the render through. ``normal`` is a fixed orthogonal
    re-encoding (reverse and negate the coordinates) standing in for a
    derived signal that keeps the full content. Both maps are involutions,
    so :func:`decode` is the same map.
    """
    image = np.asarray(image, dtype=float)
    if mode == "identity":
        return image
    if mode == "normal":
        return -image[..., ::-1]
    raise ValueError(f"unknown encoding {mode!r}; expected one of {ENCODINGS}")


decode = encode
