import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from anchorlab.config import load_config
from anchorlab.learned import Denoiser, pretrain, state_arrays

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE.setdefault(criterion, []).append((bool(passed), detail))
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE, key=lambda c: (len(c.split()[0]), c)):
        for passed, detail in ACCEPTANCE[crit]:
            terminalreporter.write_line(f"{crit}: {'PASS' if passed else 'FAIL'} | {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def learned_cfg():
    return load_config(CONFIGS / "learned.json")


@pytest.fixture(scope="session")
def trained(learned_cfg):
    """Denoiser pretrained on the learned config prior, plus a 1k-step snapshot."""
    cfg = learned_cfg
    model = Denoiser(cfg.prior.dim, sorted(cfg.prior.text_map), cfg.schedule.total_steps, seed=0)
    snaps = {}

    def keep(k, m):
        if k == 1000:
            snaps[1000] = Denoiser(m.dim, m.labels, m.total_steps, seed=0)
            snaps[1000].load_state_dict(m.state_dict())

    steps = cfg.learned.get("train_steps", 20_000)
    model, curve = pretrain(model, cfg.prior, cfg.schedule, steps, seed=0, callback=keep)
    return {"model": model, "early": snaps[1000], "curve": curve, "state": state_arrays(model)}
