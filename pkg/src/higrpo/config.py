"""Run configuration: a flat dataclass, a ``key = value`` file format and validation."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .optim import LossConfig
from .policy import Dims
from .reward import ALL_MEMBERS, STEP1_MEMBERS, STEP2_MEMBERS

CONFIG_ENV = "HIGRPO_CONFIG"

_ALIASES = {"lambda": "lam", "seed": "run_seed", "G": "group_size", "rho": "density"}
_AGG_SHORT = {"token": "token_mean", "sequence": "sequence_mean"}


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    run_seed: int = 0
    group_size: int = 8
    iterations: int = 1200
    prompts_per_iteration: int = 8
    lam: float = 1.0
    beta: float = 0.01
    clip_low: float = 0.2
    clip_high: float = 0.28
    decoupled_clip: bool = True
    eps_adv: float = 1e-4
    dynamic_sampling: bool = True
    tau_ds: float = 1e-3
    max_retries: int = 3
    kl_enabled: bool = True
    aggregation: str = "token_mean"
    ratio_level: str = "token"
    inner_epochs: int = 1
    lr: float = 5e-3
    init_scale: float = 0.01
    ref_refresh: int = 0
    reasoning: bool = True
    hierarchical: bool = True
    flat_reward: str = "step2"
    reward_members: str = "hpm1,unified1,consist1,hpm2,unified2,consist2,part2"
    part_scorer: str = "points"
    density: float = 8.0
    cell_size: float = 1.0
    remote_judge: str = ""
    remote_slots: str = "hpm2"
    remote_timeout: float = 10.0
    remote_max_inflight: int = 4
    side: int = 4
    colors: int = 7
    len_s: int = 8
    len_v: int = 8
    context: int = 4
    features: int = 512
    difficulty_mix: str = "easy:1,medium:1,hard:1"
    eval_prompts: int = 384
    eval_seed: int = 1_000_003
    eval_sample: bool = False
    checkpoint_every: int = 0
    workers: int = 1

    def __post_init__(self):
        self.validate()

    # --- validation ---------------------------------------------------------------

    def validate(self) -> None:
        positive_int = ("group_size", "prompts_per_iteration", "inner_epochs", "side", "colors",
                        "context", "features", "remote_max_inflight", "workers", "eval_prompts")
        for name in positive_int:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        for name in ("iterations", "max_retries", "ref_refresh", "checkpoint_every", "len_s", "len_v"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("lam", "beta", "clip_low", "clip_high", "tau_ds", "init_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("eps_adv", "lr", "density", "cell_size", "remote_timeout"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.clip_low >= 1:
            raise ConfigError("clip_low must be < 1")
        if self.aggregation not in ("token_mean", "sequence_mean"):
            raise ConfigError("aggregation must be token_mean or sequence_mean")
        if self.ratio_level not in ("token", "sequence"):
            raise ConfigError("ratio_level must be token or sequence")
        if self.flat_reward not in ("step1", "step2"):
            raise ConfigError("flat_reward must be step1 or step2")
        if self.part_scorer not in ("points", "voxel"):
            raise ConfigError("part_scorer must be points or voxel")
        if self.colors + 1 > 255:
            raise ConfigError("too many color classes")
        self.members()
        self.difficulty_weights()
        if self.remote_judge:
            bad = set(self.remote_slot_set()) - ALL_MEMBERS
            if bad:
                raise ConfigError(f"unknown remote slots {sorted(bad)}")

    # --- derived views ----------------------------------------------------------------

    def members(self) -> frozenset:
        return parse_members(self.reward_members)

    def remote_slot_set(self) -> frozenset:
        return parse_members(self.remote_slots)

    def difficulty_weights(self) -> dict[str, float]:
        out = {}
        for item in filter(None, (s.strip() for s in self.difficulty_mix.split(","))):
            name, _, weight = item.partition(":")
            if name not in ("easy", "medium", "hard"):
                raise ConfigError(f"unknown difficulty {name!r}")
            try:
                out[name] = float(weight or 1)
            except ValueError as exc:
                raise ConfigError(f"bad difficulty weight {item!r}") from exc
            if out[name] < 0:
                raise ConfigError("difficulty weights must be >= 0")
        if not out or sum(out.values()) <= 0:
            raise ConfigError("difficulty_mix needs a positive weight")
        return out

    def dims(self) -> Dims:
        return Dims(self.side, self.colors, self.context, self.features, self.len_s, self.len_v)

    def loss_config(self) -> LossConfig:
        high = self.clip_high if self.decoupled_clip else self.clip_low
        return LossConfig(self.clip_low, high, self.beta, self.aggregation, self.ratio_level,
                          self.kl_enabled, self.lam, self.inner_epochs)

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **normalize_keys(changes))

    def to_text(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))


def parse_members(text: str) -> frozenset:
    """``hpm,unified`` enables both steps' members; ``hpm1`` or ``part2`` pick one step."""
    text = text.strip()
    if text.lower() in ("", "none"):
        return frozenset()
    if text.lower() == "all":
        return ALL_MEMBERS
    out = set()
    for name in (s.strip() for s in text.split(",")):
        if not name:
            continue
        if name in ALL_MEMBERS:
            out.add(name)
        elif name in STEP1_MEMBERS or name in STEP2_MEMBERS:
            out.update(m for m in (f"{name}1", f"{name}2") if m in ALL_MEMBERS)
        else:
            raise ConfigError(f"unknown reward member {name!r}")
    return frozenset(out)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, raw, kind):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def normalize_keys(values: dict) -> dict:
    out = {}
    for key, raw in values.items():
        name = _ALIASES.get(key, key.replace("-", "_"))
        if name not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        if name == "aggregation" and isinstance(raw, str):
            raw = _AGG_SHORT.get(raw.strip(), raw.strip())
        out[name] = _coerce(name, raw, _FIELD_TYPES[name])
    return out


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, overrides: dict | None = None) -> Config:
    """File values (``path`` or ``$HIGRPO_CONFIG``), then ``overrides`` on top."""
    path = path or os.environ.get(CONFIG_ENV)
    values = {}
    if path:
        try:
            values = parse_config_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = normalize_keys(values)
    values.update(normalize_keys(overrides or {}))
    try:
        return Config(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
