"""Run configuration: INI-style sections parsed strictly.

Unknown sections or keys are errors, values are type-checked against the
dataclass fields, and :meth:`RunConfig.to_text` writes a canonical form
that parses back to an equal config.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

from ..latent_intent import DECODER_INITS
from ..recommender import LOSS_MODES, VARIANTS


class ConfigError(ValueError):
    """Invalid configuration text; the message names the offending key."""


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    variant: str = "experiment"


@dataclass(frozen=True)
class SimSection:
    n_users: int = 400
    n_intents: int = 4
    n_topics: int = 8
    catalog_size: int = 500
    traj_len: int = 200
    window: int = 5
    switch_prob: float = 0.05
    repeat_prob: float = 0.3
    device_change_prob: float = 0.02


@dataclass(frozen=True)
class IntentSection:
    d_z: int = 4
    hidden: tuple[int, ...] = (32, 32)
    init_epsilon: float = 1e-3
    decoder_init: str = "glorot_hidden"
    clip: bool = True
    clip_a: float = -8.0
    clip_b: float = 4.0


@dataclass(frozen=True)
class RecommenderSection:
    d_emb: int = 16
    d_hidden: int = 32
    post_fusion_hidden: tuple[int, ...] = (32,)
    d_user: int = 16
    history_len: int = 10
    loss_mode: str = "ce"
    lambda_elbo: float = 0.1
    use_prior_mean: bool = False
    baseline_decay: float = 0.9


@dataclass(frozen=True)
class TrainSection:
    steps: int = 5000
    batch_size: int = 64
    learning_rate: float = 3e-3
    checkpoint_every: int = 1000
    heldout_fraction: float = 0.2


@dataclass(frozen=True)
class AnalysisSection:
    n_clusters: int = 16
    factor_rank: int = 8
    als_sweeps: int = 20
    kmeans_iters: int = 50
    probe_test_fraction: float = 0.5


@dataclass(frozen=True)
class GradcheckSection:
    batch_size: int = 3
    history_len: int = 3
    catalog_size: int = 64
    fd_step: float = 1e-3
    order: int = 4
    kink_margin: float = 5e-3
    tolerance: float = 1e-4


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    sim: SimSection = field(default_factory=SimSection)
    intent: IntentSection = field(default_factory=IntentSection)
    recommender: RecommenderSection = field(default_factory=RecommenderSection)
    train: TrainSection = field(default_factory=TrainSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    def __post_init__(self):
        _validate(self)

    # -- text round trip --------------------------------------------------
    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        parser.optionxform = str  # keep key case
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        sections = {f.name: f for f in fields(cls)}
        kwargs = {}
        for name in parser.sections():
            if name not in sections:
                raise ConfigError(f"unknown section [{name}]")
            section_cls = sections[name].default_factory
            hints = get_type_hints(section_cls)
            known = {f.name for f in fields(section_cls)}
            values = {}
            for key, raw in parser.items(name):
                if key not in known:
                    raise ConfigError(f"unknown key {name}.{key}")
                values[key] = _parse_value(f"{name}.{key}", raw, hints[key])
            kwargs[name] = section_cls(**values)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            section = getattr(self, sec.name)
            for f in fields(section):
                lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def replace(self, **overrides) -> "RunConfig":
        """``replace(run={"seed": 3})`` returns a copy with those fields changed."""
        updated = {
            name: dataclasses.replace(getattr(self, name), **vals) for name, vals in overrides.items()
        }
        return dataclasses.replace(self, **updated)


def _parse_value(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typ == tuple[int, ...]:
            if not raw:
                return ()
            return tuple(int(p) for p in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
    raise ConfigError(f"unsupported type for {key}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _check(cond: bool, key: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"invalid {key}: {msg}")


def _validate(cfg: RunConfig) -> None:
    _check(cfg.run.variant in VARIANTS, "run.variant", f"must be one of {VARIANTS}")
    _check(cfg.recommender.loss_mode in LOSS_MODES, "recommender.loss_mode", f"must be one of {LOSS_MODES}")
    _check(cfg.intent.decoder_init in DECODER_INITS, "intent.decoder_init", f"must be one of {DECODER_INITS}")
    _check(cfg.intent.init_epsilon > 0, "intent.init_epsilon", "must be positive")
    _check(cfg.intent.clip_a < cfg.intent.clip_b, "intent.clip_a", "must be below clip_b")
    _check(0 < cfg.intent.d_z < 8, "intent.d_z", "must be positive and below d_y = 8")
    _check(cfg.recommender.lambda_elbo >= 0, "recommender.lambda_elbo", "must be non-negative")
    _check(cfg.recommender.history_len >= 1, "recommender.history_len", "must be positive")
    _check(cfg.train.steps >= 0, "train.steps", "must be non-negative")
    _check(cfg.train.batch_size >= 1, "train.batch_size", "must be positive")
    _check(cfg.train.learning_rate > 0, "train.learning_rate", "must be positive")
    _check(cfg.train.checkpoint_every >= 1, "train.checkpoint_every", "must be positive")
    _check(0 < cfg.train.heldout_fraction < 1, "train.heldout_fraction", "must lie in (0, 1)")
    _check(cfg.sim.n_users >= 2, "sim.n_users", "must be at least 2")
    _check(cfg.analysis.n_clusters >= 1, "analysis.n_clusters", "must be positive")
    _check(cfg.gradcheck.fd_step > 0, "gradcheck.fd_step", "must be positive")
    _check(cfg.gradcheck.order in (2, 4), "gradcheck.order", "must be 2 or 4")
    _check(cfg.gradcheck.catalog_size >= cfg.sim.n_topics, "gradcheck.catalog_size", "must be at least sim.n_topics")
    _check(cfg.gradcheck.batch_size >= 1, "gradcheck.batch_size", "must be positive")
