"""Small trainable denoiser with a separable image adapter.

Only the adapter's last linear layer is ever updated by fine-tuning; the
trunk and the text table stay frozen.
"""

from __future__ import annotations

import copy
import math

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .prior import Condition, GmmPrior, sample
from .schedule import NoiseSchedule


class TrainingDiverged(RuntimeError):
    pass


def time_embedding(t_frac: torch.Tensor, n_freqs: int = 8) -> torch.Tensor:
    freqs = math.pi * 2.0 ** torch.arange(n_freqs, dtype=t_frac.dtype)
    ang = t_frac[:, None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class Denoiser(nn.Module):
    def __init__(self, dim: int, labels, total_steps: int = 1000, width: int = 128,
                 depth: int = 3, text_dim: int = 8, cond_dim: int = 16,
                 adapter_width: int = 32, n_freqs: int = 8, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.labels = list(labels)
        self.total_steps = total_steps
        self.n_freqs = n_freqs
        self.cond_dim = cond_dim
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.text_table = nn.Embedding(len(self.labels) + 1, text_dim)
        self.adapter = nn.Sequential(
            nn.Linear(dim, adapter_width), nn.SiLU(), nn.Linear(adapter_width, cond_dim))
        layers, n_in = [], dim + 2 * n_freqs + text_dim + cond_dim
        for _ in range(depth):
            layers += [nn.Linear(n_in, width), nn.SiLU()]
            n_in = width
        layers.append(nn.Linear(n_in, dim))
        self.trunk = nn.Sequential(*layers)
        torch.random.set_rng_state(gen_state)
        self.double()
        self._ft_opt = None

    @property
    def adapter_final(self) -> nn.Linear:
        return self.adapter[-1]

    def label_index(self, text):
        if text is None:
            return 0
        try:
            return self.labels.index(text) + 1
        except ValueError:
            raise ValueError(f"unknown text label {text!r}") from None

    def forward(self, z_t, t, label_idx, image=None, image_mask=None):
        n = z_t.shape[0]
        temb = time_embedding(t.to(z_t.dtype) / self.total_steps, self.n_freqs)
        text = self.text_table(label_idx)
        if image is None:
            cond = z_t.new_zeros(n, self.cond_dim)
        else:
            cond = self.adapter(image)
            if image_mask is not None:
                cond = cond * image_mask[:, None]
        return self.trunk(torch.cat([z_t, temb, text, cond], dim=1))

    def predict(self, z_t, t, cond: Condition):
        """Numpy in, numpy out; ``z_t`` may be (d,) or (n, d)."""
        z = np.asarray(z_t, dtype=float)
        single = z.ndim == 1
        z2 = np.atleast_2d(z)
        n = z2.shape[0]
        tt = torch.as_tensor(np.broadcast_to(np.asarray(t), (n,)).copy(), dtype=torch.float64)
        lab = torch.full((n,), self.label_index(cond.text), dtype=torch.long)
        img = None
        if cond.image is not None:
            img = torch.as_tensor(np.broadcast_to(np.asarray(cond.image, dtype=float), z2.shape).copy())
        with torch.no_grad():
            out = self(torch.as_tensor(z2), tt, lab, img).numpy()
        return out[0] if single else out


class LearnedPrior:
    """Adapter exposing the analytic prior's ``predict_noise`` signature."""

    def __init__(self, denoiser: Denoiser):
        self.denoiser = denoiser

    def predict_noise(self, z_t, t, cond, sched=None):
        return self.denoiser.predict(z_t, t, cond)


def predict_noise_learned(denoiser: Denoiser, z_t, t, cond: Condition):
    return denoiser.predict(z_t, t, cond)


def _training_batch(rng, prior: GmmPrior, sched: NoiseSchedule, labels, batch: int):
    n_lab = len(labels)
    use_text = rng.random(batch) >= 0.5
    lab_idx = np.where(use_text, rng.integers(1, n_lab + 1, size=batch), 0)
    z = np.empty((batch, prior.dim))
    for li in np.unique(lab_idx):
        rows = np.flatnonzero(lab_idx == li)
        text = None if li == 0 else labels[li - 1]
        z[rows] = sample(prior, Condition(text), rng, n=rows.size)
    t = rng.integers(1, sched.total_steps + 1, size=batch)
    eps = rng.standard_normal((batch, prior.dim))
    ab = sched.alpha_bar(t)[:, None]
    z_t = np.sqrt(ab) * z + np.sqrt(1 - ab) * eps
    img_mask = (rng.random(batch) < 0.5).astype(float)
    return (torch.as_tensor(z_t), torch.as_tensor(t, dtype=torch.float64),
            torch.as_tensor(lab_idx), torch.as_tensor(z), torch.as_tensor(img_mask),
            torch.as_tensor(eps))


def denoising_loss(denoiser: Denoiser, batch) -> torch.Tensor:
    z_t, t, lab, img, mask, eps = batch
    pred = denoiser(z_t, t, lab, img, mask)
    return torch.mean((pred - eps) ** 2)


def validation_batch(prior, sched, labels, seed=12345, size=1024):
    return _training_batch(np.random.default_rng(seed), prior, sched, labels, size)


def pretrain(denoiser: Denoiser, prior: GmmPrior, sched: NoiseSchedule, steps: int, seed,
             batch: int = 256, lr: float = 1e-3, log_every: int = 100, callback=None):
    """Denoising score matching; returns ``(denoiser, loss_curve)``.

    ``loss_curve`` holds ``(step, train_loss)`` pairs every ``log_every`` steps.
    ``callback(step, denoiser)`` runs after each step when given.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(denoiser.parameters(), lr=lr, betas=(0.9, 0.999))
    curve = []
    for k in range(1, steps + 1):
        b = _training_batch(rng, prior, sched, denoiser.labels, batch)
        loss = denoising_loss(denoiser, b)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite training loss at step {k}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if k % log_every == 0 or k == steps:
            curve.append((k, float(loss.detach())))
        if callback is not None:
            callback(k, denoiser)
    return denoiser, curve


def reconstruction_loss_torch(denoiser: Denoiser, z_t, t, image, sched: NoiseSchedule,
                              target=None):
    """Mean per-dimension squared error of the image-anchored one-step reconstruction.

    ``target`` is what the reconstruction is scored against (default: ``image``).
    """
    z_t = torch.as_tensor(np.atleast_2d(np.asarray(z_t, dtype=float)))
    img = torch.as_tensor(np.atleast_2d(np.asarray(image, dtype=float)))
    tgt = img if target is None else torch.as_tensor(np.atleast_2d(np.asarray(target, dtype=float)))
    n = z_t.shape[0]
    t_np = np.broadcast_to(np.asarray(t), (n,)).copy()
    ab = torch.as_tensor(sched.alpha_bar(t_np))[:, None]
    lab = torch.zeros(n, dtype=torch.long)
    eps_hat = denoiser(z_t, torch.as_tensor(t_np, dtype=torch.float64), lab, img)
    zhat = (z_t - torch.sqrt(1 - ab) * eps_hat) / torch.sqrt(ab)
    return torch.mean(torch.sum((zhat - tgt) ** 2, dim=1)) / denoiser.dim


def finetune_adapter_step(denoiser: Denoiser, z_t, t, image, sched: NoiseSchedule,
                          lr: float = 1e-4, target=None):
    """One Adam step on the adapter's last layer against the reconstruction loss.

    Returns ``(denoiser, loss_before_step)``. Optimiser state persists on the
    denoiser across calls.
    """
    params = list(denoiser.adapter_final.parameters())
    loss = reconstruction_loss_torch(denoiser, z_t, t, image, sched, target)
    grads = torch.autograd.grad(loss, params)
    if not all(torch.all(torch.isfinite(g)) for g in grads):
        raise TrainingDiverged("non-finite adapter gradient")
    if denoiser._ft_opt is None:
        denoiser._ft_opt = torch.optim.Adam(params, lr=lr)
    for group in denoiser._ft_opt.param_groups:
        group["lr"] = lr
    for p, g in zip(params, grads):
        p.grad = g
    if lr > 0:
        denoiser._ft_opt.step()
    for p in params:
        p.grad = None
    return denoiser, float(loss.detach())


def perturb_adapter(denoiser: Denoiser, scale: float, seed=0) -> Denoiser:
    """Copy of ``denoiser`` with Gaussian noise added to the adapter's last layer."""
    out = copy.deepcopy(denoiser)
    out._ft_opt = None
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for p in out.adapter_final.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return out


def state_arrays(denoiser: Denoiser) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in denoiser.state_dict().items()}


def save_denoiser(denoiser: Denoiser, path):
    meta = {"dim": denoiser.dim, "labels": denoiser.labels, "total_steps": denoiser.total_steps,
            "width": denoiser.trunk[0].out_features,
            "depth": sum(isinstance(m, nn.Linear) for m in denoiser.trunk) - 1,
            "text_dim": denoiser.text_table.embedding_dim, "cond_dim": denoiser.cond_dim,
            "adapter_width": denoiser.adapter[0].out_features, "n_freqs": denoiser.n_freqs}
    checkpoint.save_tensors(path, state_arrays(denoiser), meta)


def load_denoiser(path) -> Denoiser:
    tensors, meta = checkpoint.load_tensors(path)
    model = Denoiser(meta["dim"], meta["labels"], meta["total_steps"], meta["width"],
                     meta["depth"], meta["text_dim"], meta["cond_dim"], meta["adapter_width"],
                     meta["n_freqs"])
    model.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
    return model
