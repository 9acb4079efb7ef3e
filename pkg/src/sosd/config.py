"""Run configuration and its INI text form.

A config file is a flat sectioned ``key = value`` document::

    [model]
    n = 16
    d = 32
    classes = 8
    init_sigma = 0.01
    seed = 0

    [data]
    noise = 2.0
    seed = 1
    resample = false

    [schedule]
    kind = constant
    base_lr = 0.05

    [optimizer]
    kind = gd

    [training]
    total_steps = 5000

Missing keys take the defaults of the dataclasses below. A run manifest uses
the same format with extra ``[run]`` and ``[snapshots]`` sections, so a
manifest can be fed back in as a config.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from sosd.model import ModelConfig
from sosd.optim import OptimizerSpec, ScheduleSpec

__all__ = ["ConfigError", "RunConfig", "dump_config", "load_config", "parse_config", "to_parser"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    noise: float = 2.0
    data_seed: int = 1
    resample: bool = False
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    total_steps: int = 5000
    snapshot_dense_until: int = 1000
    snapshot_every: int = 10
    window: int = 50

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be at least 1")
        if self.snapshot_every < 1:
            raise ConfigError("snapshot_every must be at least 1")
        if self.window < 1:
            raise ConfigError("window must be at least 1")
        try:
            self.schedule.validate_total(self.total_steps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def snapshot_due(self, t: int) -> bool:
        return (
            t <= self.snapshot_dense_until
            or t % self.snapshot_every == 0
            or t == self.total_steps
        )

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return str(v)


_MODEL_KEYS = {"n": "n", "d": "d", "classes": "C", "init_sigma": "init_sigma", "seed": "seed"}


def to_parser(cfg: RunConfig) -> configparser.ConfigParser:
    p = configparser.ConfigParser(interpolation=None)
    p.optionxform = str
    p["model"] = {k: _fmt(getattr(cfg.model, attr)) for k, attr in _MODEL_KEYS.items()}
    p["data"] = {"noise": _fmt(cfg.noise), "seed": _fmt(cfg.data_seed), "resample": _fmt(cfg.resample)}
    p["schedule"] = {f.name: _fmt(getattr(cfg.schedule, f.name)) for f in fields(ScheduleSpec)}
    p["optimizer"] = {f.name: _fmt(getattr(cfg.optimizer, f.name)) for f in fields(OptimizerSpec)}
    p["training"] = {
        k: _fmt(getattr(cfg, k))
        for k in ("total_steps", "snapshot_dense_until", "snapshot_every", "window")
    }
    return p


def dump_config(cfg: RunConfig) -> str:
    buf = io.StringIO()
    to_parser(cfg).write(buf)
    return buf.getvalue()


def _convert(section: str, key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "optfloat":
            return None if raw.lower() in ("none", "") else float(raw)
        if kind == "floats":
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


_SCHEDULE_TYPES = {
    "kind": str, "base_lr": float, "milestones": "floats", "factor": float,
    "warmup": int, "stable": int, "decay": int, "min_ratio": float,
}
_OPT_TYPES = {
    "kind": str, "beta1": float, "beta2": float, "eps": float, "momentum": float,
    "ns_steps": int, "weight_decay": float, "clip_norm": "optfloat",
}
_MODEL_TYPES = {"n": int, "d": int, "classes": int, "init_sigma": float, "seed": int}
_DATA_TYPES = {"noise": float, "seed": int, "resample": bool}
_TRAIN_TYPES = {"total_steps": int, "snapshot_dense_until": int, "snapshot_every": int, "window": int}
_KNOWN = {
    "model": _MODEL_TYPES, "data": _DATA_TYPES, "schedule": _SCHEDULE_TYPES,
    "optimizer": _OPT_TYPES, "training": _TRAIN_TYPES,
}


def _section(p: configparser.ConfigParser, name: str) -> dict:
    if not p.has_section(name):
        return {}
    types = _KNOWN[name]
    out = {}
    for key, raw in p.items(name):
        if key not in types:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        out[key] = _convert(name, key, raw, types[key])
    return out


def parse_config(text: str, extra_sections: tuple[str, ...] = ("run", "snapshots")) -> RunConfig:
    p = configparser.ConfigParser(interpolation=None)
    p.optionxform = str
    try:
        p.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for s in p.sections():
        if s not in _KNOWN and s not in extra_sections:
            raise ConfigError(f"unknown section [{s}]")
    try:
        m = _section(p, "model")
        if "classes" in m:
            m["C"] = m.pop("classes")
        model = ModelConfig(**m)
        data = _section(p, "data")
        schedule = ScheduleSpec(**_section(p, "schedule"))
        optimizer = OptimizerSpec(**_section(p, "optimizer"))
        train = _section(p, "training")
        return RunConfig(
            model=model,
            noise=data.get("noise", 2.0),
            data_seed=data.get("seed", 1),
            resample=data.get("resample", False),
            schedule=schedule,
            optimizer=optimizer,
            **train,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
