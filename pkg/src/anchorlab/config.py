"""JSON experiment configuration.

Sections: ``schedule``, ``prior``, ``views``, ``guidance``, ``run``,
``metrics``, ``learned``. All are optional except ``prior``; see
``docs/formats.md`` for every field.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .guidance import VARIANTS, GuidanceConfig
from .optimizer import RunConfig
from .prior import GmmPrior, standard_bimodal, standard_unimodal
from .scene import ENCODINGS, ViewSet, make_views
from .schedule import WEIGHT_MODES, NoiseSchedule, make_schedule

SECTIONS = ("schedule", "prior", "views", "guidance", "run", "metrics", "learned", "out")
PRESETS = {"bimodal": standard_bimodal, "unimodal": standard_unimodal}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    schedule: NoiseSchedule
    prior: GmmPrior
    views: ViewSet
    run: RunConfig
    metrics: dict = field(default_factory=dict)
    learned: dict = field(default_factory=dict)
    out: str | None = None
    raw: dict = field(default_factory=dict)

    def with_run(self, **changes):
        """Copy with run fields replaced; ``guidance`` takes a dict of guidance fields.

        Switching the variant re-derives the default ω unless the config set it.
        """
        raw = copy.deepcopy(self.raw)
        run = self.run
        gchanges = changes.pop("guidance", None)
        if gchanges:
            g = dataclasses.asdict(run.guidance)
            if "variant" in gchanges and "omega" not in raw.get("guidance", {}):
                g["omega"] = None
            g.update(gchanges)
            try:
                run = dataclasses.replace(run, guidance=GuidanceConfig(**g))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"guidance: {exc}") from None
            raw.setdefault("guidance", {}).update(gchanges)
        if changes:
            try:
                run = dataclasses.replace(run, **changes)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"run: {exc}") from None
            raw.setdefault("run", {}).update(changes)
        return dataclasses.replace(self, run=run, raw=raw)


def _check_keys(section, data, allowed):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object, got {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}: unknown field")


def _build(section, factory, data, allowed):
    _check_keys(section, data, allowed)
    try:
        return factory(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _parse_prior(data):
    if "preset" in data:
        _check_keys("prior", data, ("preset", "image_bandwidth", "image_encoding"))
        if data["preset"] not in PRESETS:
            raise ConfigError(f"prior.preset: unknown preset {data['preset']!r}; "
                              f"expected one of {sorted(PRESETS)}")
        prior = PRESETS[data["preset"]]()
        kw = {k: data[k] for k in ("image_bandwidth", "image_encoding") if k in data}
        return dataclasses.replace(prior, **kw) if kw else prior
    _check_keys("prior", data, ("components", "text_map", "image_bandwidth", "image_encoding"))
    comps = data.get("components")
    if not comps:
        raise ConfigError("prior.components: at least one component is required")
    for i, c in enumerate(comps):
        _check_keys(f"prior.components[{i}]", c, ("weight", "mean", "variance"))
        missing = {"weight", "mean", "variance"} - set(c)
        if missing:
            raise ConfigError(f"prior.components[{i}].{sorted(missing)[0]}: missing")
    enc = data.get("image_encoding", "identity")
    if enc not in ENCODINGS:
        raise ConfigError(f"prior.image_encoding: unknown encoding {enc!r}")
    try:
        return GmmPrior(
            weights=[c["weight"] for c in comps], means=[c["mean"] for c in comps],
            variances=[c["variance"] for c in comps], text_map=data.get("text_map", {}),
            image_bandwidth=data.get("image_bandwidth", 0.1), image_encoding=enc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"prior: {exc}") from None


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a JSON object")
    _check_keys("top level", raw, SECTIONS)
    if "prior" not in raw:
        raise ConfigError("prior: section is required")
    sched = _build("schedule", make_schedule, raw.get("schedule", {}),
                   ("total_steps", "beta_start", "beta_end"))
    prior = _parse_prior(raw["prior"])
    vdata = dict(raw.get("views", {}))
    _check_keys("views", vdata, ("d_world", "d", "count", "seed"))
    vdata.setdefault("d_world", prior.dim)
    vdata.setdefault("d", prior.dim)
    vdata.setdefault("count", 1)
    views = _build("views", make_views, vdata, ("d_world", "d", "count", "seed"))
    if views[0].shape[0] != prior.dim:
        raise ConfigError(f"views.d: latent dimension {views[0].shape[0]} does not match prior "
                          f"dimension {prior.dim}")
    gdata = raw.get("guidance", {})
    gfields = [f.name for f in dataclasses.fields(GuidanceConfig)]
    _check_keys("guidance", gdata, gfields)
    if "variant" in gdata and gdata["variant"] not in VARIANTS:
        raise ConfigError(f"guidance.variant: unknown variant {gdata['variant']!r}; "
                          f"expected one of {list(VARIANTS)}")
    if gdata.get("weight_mode", "constant-one") not in WEIGHT_MODES:
        raise ConfigError(f"guidance.weight_mode: unknown mode {gdata['weight_mode']!r}")
    for key in ("anchor_text", "neg_label"):
        if gdata.get(key) is not None and gdata[key] not in prior.text_map:
            raise ConfigError(f"guidance.{key}: unknown text label {gdata[key]!r}")
    guid = _build("guidance", GuidanceConfig, gdata, gfields)
    rdata = dict(raw.get("run", {}))
    rfields = [f.name for f in dataclasses.fields(RunConfig) if f.name != "guidance"]
    _check_keys("run", rdata, rfields)
    if rdata.get("text", "y") not in prior.text_map:
        raise ConfigError(f"run.text: unknown text label {rdata.get('text', 'y')!r}")
    if "init" in rdata:
        if len(rdata["init"]) != views[0].shape[1]:
            raise ConfigError(f"run.init: expected {views[0].shape[1]} entries")
    else:
        rdata["init"] = [0.0] * views[0].shape[1]
    if rdata.get("encoding", "identity") not in ENCODINGS:
        raise ConfigError(f"run.encoding: unknown encoding {rdata['encoding']!r}")
    run = _build("run", lambda **kw: RunConfig(guidance=guid, **kw), rdata, rfields)
    mdata = raw.get("metrics", {})
    _check_keys("metrics", mdata, ("n_target", "target_seed"))
    ldata = raw.get("learned", {})
    _check_keys("learned", ldata, ("checkpoint", "train_steps", "batch", "lr", "seed"))
    if run.prior_kind == "learned" and not ldata.get("checkpoint"):
        raise ConfigError("learned.checkpoint: required when run.prior_kind is 'learned'")
    return ExperimentConfig(sched, prior, views, run, dict(mdata), dict(ldata),
                            raw.get("out"), copy.deepcopy(raw))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: "
                          f"{exc.msg}") from None
    cfg = parse_config(raw)
    ck = cfg.learned.get("checkpoint")
    if ck and not Path(ck).is_absolute():
        cfg.learned["checkpoint"] = str((path.parent / ck).resolve())
    return cfg
