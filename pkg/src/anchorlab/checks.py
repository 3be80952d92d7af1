"""Oracle and algebraic-identity checks behind the ``validate`` command.

Each check returns ``{"name", "tolerance", "observed", "passed"}``. The
functions under test can be swapped through keyword arguments so a
deliberately broken implementation can be shown to fail.
"""

from __future__ import annotations

import numpy as np

from . import guidance, oracle, schedule
from .prior import Condition, GmmPrior, predict_noise, sample
from .scene import backproject_grad, make_views, render

OMEGAS = (0.0, 1.0, 7.5, 100.0)


def random_mixture(rng, d=None, k=None, rho=None):
    d = d or int(rng.integers(1, 5))
    k = k or int(rng.integers(1, 6))
    w = rng.random(k) + 0.1
    w = w / w.sum()
    w[-1] = 1.0 - w[:-1].sum()
    labels = {"a": list(range(0, max(1, k // 2))), "b": list(range(k // 2, k)) or [0], "all": list(range(k))}
    return GmmPrior(w, rng.normal(scale=1.5, size=(k, d)), rng.uniform(0.0, 0.8, size=k),
                    labels, image_bandwidth=rho if rho is not None else float(rng.uniform(0.05, 1.0)))


def random_instance(rng, sched, rho=None, with_image=None):
    """(prior, z_t, t, cond) with z_t drawn from the forward process of the conditioned prior."""
    prior = random_mixture(rng, rho=rho)
    t = int(rng.integers(1, sched.total_steps + 1))
    text = rng.choice([None, "a", "b", "all"])
    if with_image is None:
        with_image = rng.random() < 0.5
    image = None
    if with_image:
        image = sample(prior, Condition(text), rng) + rng.normal(scale=0.2, size=prior.dim)
    cond = Condition(text, image)
    z0 = sample(prior, cond, rng)
    z_t = schedule.add_noise(z0, t, rng.standard_normal(prior.dim), sched)
    return prior, z_t, t, cond


def _result(name, tol, observed):
    observed = float(observed)
    return {"name": name, "tolerance": tol, "observed": observed,
            "passed": bool(np.isfinite(observed) and observed <= tol)}


def _rel(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-12)


def check_schedule(sched):
    rel = np.abs(sched.alpha_bars / np.cumprod(1 - sched.betas) - 1).max()
    return _result("schedule_cumprod", 1e-12, rel)


def check_round_trip(sched, rng, n=1000):
    z = rng.normal(size=(n, 3))
    eps = rng.normal(size=(n, 3))
    t = rng.integers(1, sched.total_steps + 1, size=n)
    zt = schedule.add_noise(z, t, eps, sched)
    ab = sched.alpha_bar(t)[:, None]
    back = (zt - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
    return _result("add_noise_round_trip", 1e-10, np.abs(back - z).max())


def check_eta_identity(sched, eta_fn=schedule.eta):
    t = np.arange(1, sched.total_steps + 1)
    err = np.abs(eta_fn(t, sched) ** 2 * (1 - sched.alpha_bars) - sched.alpha_bars).max()
    return _result("eta_squared_identity", 1e-12, err)


def m1_identity_errors(sched, rng, eta_fn=schedule.eta, n=10_000, n_times=10):
    """Max error of m1 against +η(ẑ_target - ẑ_source) and against -η(ẑ_target - ẑ_source)."""
    times = rng.choice(np.arange(1, sched.total_steps + 1), size=n_times, replace=False)
    t = np.repeat(times, n // n_times)
    z_t, e_c, e_u = (rng.normal(size=(t.size, 4)) for _ in range(3))
    m1 = e_c - e_u
    gap = (guidance.pseudo_reconstruct(z_t, e_c, t, sched)
           - guidance.pseudo_reconstruct(z_t, e_u, t, sched))
    scaled = eta_fn(t, sched)[:, None] * gap
    return float(np.abs(m1 - scaled).max()), float(np.abs(m1 + scaled).max())


def check_m1_identity(sched, rng, eta_fn=schedule.eta):
    """m1 == η (ẑ_source - ẑ_target); the target-minus-source ordering is reported alongside."""
    plus, minus = m1_identity_errors(sched, rng, eta_fn)
    res = _result("m1_reconstruction_identity", 1e-10, minus)
    res["error_target_minus_source"] = plus
    return res


def cfg_coefficients(rng, n=1000, omegas=OMEGAS):
    """For each ω, the error of rebuilding ε̂_CFG - ε as c·m1 + m2 for c ∈ {ω-1, ω, 1+ω}."""
    e_c, e_u, e = (rng.normal(size=(n, 4)) for _ in range(3))
    table = {}
    for w in omegas:
        direct = guidance.cfg_combine(e_c, e_u, w) - e
        m1, m2 = guidance.decompose(e_c, e_u, e)
        table[w] = {name: float(np.abs(c * m1 + m2 - direct).max() / max(1.0, abs(c)))
                    for name, c in (("omega-1", w - 1), ("omega", w), ("1+omega", 1 + w))}
    return table


def check_cfg_decomposition(rng):
    table = cfg_coefficients(rng)
    worst = max(v["1+omega"] for v in table.values())
    res = _result("cfg_decomposition_1_plus_omega", 1e-12, worst)
    res["coefficient_errors"] = {str(k): v for k, v in table.items()}
    return res


def check_score(sched, rng, n=40, with_image=False):
    worst = 0.0
    for _ in range(n):
        prior, z_t, t, cond = random_instance(rng, sched, with_image=with_image)
        worst = max(worst, _rel(predict_noise(prior, z_t, t, cond, sched),
                                oracle.numeric_score(prior, z_t, t, cond, sched)))
    name = "score_vs_numeric_image" if with_image else "score_vs_numeric"
    return _result(name, 1e-5, worst)


def check_tweedie(sched, rng, n=40, rhos=(1.0, 0.1, 0.01)):
    worst = 0.0
    for i in range(n):
        prior, z_t, t, cond = random_instance(rng, sched, rho=rhos[i % len(rhos)])
        eps_hat = predict_noise(prior, z_t, t, cond, sched)
        fast = guidance.pseudo_reconstruct(z_t, eps_hat, t, sched)
        worst = max(worst, np.abs(fast - oracle.posterior_mean(prior, z_t, t, cond, sched)).max())
    return _result("tweedie_vs_posterior_mean", 1e-8, worst)


def check_point_mass(sched, rng):
    mu = np.array([0.7, -1.2])
    prior = GmmPrior([1.0], [mu], [0.0])
    t = 400
    eps = rng.normal(size=2)
    z_t = schedule.add_noise(mu, t, eps, sched)
    eps_hat = predict_noise(prior, z_t, t, Condition(), sched)
    return _result("point_mass_inversion", 1e-8, np.abs(eps_hat - eps).max())


def check_text_all_equals_null(sched, rng):
    prior = random_mixture(rng, d=3, k=4)
    z = rng.normal(size=(50, 3))
    t = rng.integers(1, sched.total_steps + 1, size=50)
    err = np.abs(predict_noise(prior, z, t, Condition("all"), sched)
                 - predict_noise(prior, z, t, Condition(), sched)).max()
    return _result("text_all_equals_null", 1e-12, err)


def check_image_inversion(sched, rng, rhos=(1.0, 0.3, 0.1, 0.03, 0.01, 1e-3)):
    """Anchored reconstruction error is monotone in ρ and tiny at the smallest ρ."""
    base = random_mixture(rng, d=2, k=3)
    image = rng.normal(size=2)
    t = 500
    z_t = schedule.add_noise(image, t, rng.normal(size=2), sched)
    errs = []
    for rho in rhos:
        prior = GmmPrior(base.weights, base.means, base.variances, base.text_map, rho)
        eps_hat = predict_noise(prior, z_t, t, Condition(None, image), sched)
        errs.append(np.sum((guidance.pseudo_reconstruct(z_t, eps_hat, t, sched) - image) ** 2))
    increase = max(0.0, float(np.max(np.diff(errs))))
    res = _result("image_inversion_monotone", 1e-12, increase)
    res["errors"] = [float(e) for e in errs]
    res["passed"] = bool(res["passed"] and errs[-1] < 1e-4)
    return res


def check_adjoint(rng, n=100):
    worst = 0.0
    for k in range(n):
        v = make_views(5, 3, 1, seed=k)[0]
        th, g = rng.normal(size=5), rng.normal(size=3)
        worst = max(worst, abs(render(th, v) @ g - th @ backproject_grad(g, v)))
    return _result("render_adjoint", 1e-10, worst)


def check_pullback(sched, rng, n=20):
    worst = 0.0
    for k in range(n):
        v = make_views(4, 2, 1, seed=k)[0]
        theta = rng.normal(size=4)
        t = int(rng.integers(20, 981))
        eps = rng.normal(size=2)
        g = rng.normal(size=2)
        a = np.sqrt(sched.alpha_bar(t))

        def loss(th):
            return float(g @ schedule.add_noise(render(th, v), t, eps, sched))

        fast = backproject_grad(a * g, v)
        worst = max(worst, _rel(fast, oracle.fd_gradient(loss, theta, h=1e-5)))
    return _result("pullback_vs_finite_difference", 1e-5, worst)


def check_filter(sched):
    gamma = 0.03
    cases = {0.05: 0, 0.01: 1, gamma: 0}
    bad = sum(int(guidance.filter_mask(v, gamma)) != m for v, m in cases.items())
    return _result("filter_threshold_strict", 0, bad)


def run_checks(seed=0, eta_fn=schedule.eta, sched=None):
    sched = sched or schedule.make_schedule()
    rng = np.random.default_rng(seed)
    return [
        check_schedule(sched),
        check_round_trip(sched, rng),
        check_eta_identity(sched, eta_fn),
        check_m1_identity(sched, rng, eta_fn),
        check_cfg_decomposition(rng),
        check_score(sched, rng),
        check_score(sched, rng, with_image=True),
        check_tweedie(sched, rng),
        check_point_mass(sched, rng),
        check_text_all_equals_null(sched, rng),
        check_image_inversion(sched, rng),
        check_adjoint(rng),
        check_pullback(sched, rng),
        check_filter(sched),
    ]
