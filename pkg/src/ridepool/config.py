"""Simulator and trainer configuration, plus the flat YAML config loader."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised when a config value violates a field invariant."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


@dataclass(frozen=True)
class SimConfig:
    n_drivers: int = 1000
    capacity: int = 3
    speed_kmh: float = 60.0
    step_len: float = 60.0  # seconds
    horizon: int = 30  # steps per episode
    city_width: float = 10.0  # km
    city_height: float = 10.0  # km
    max_wait: float = 300.0  # seconds before a pending order is cancelled

    # economics of the reward
    fare_base: float = 2.0
    fare_km: float = 1.0
    payout_km: float = 0.6
    beta: tuple[float, float, float, float, float] = (1.0, 1.0, 1.0, 0.5, 0.1)

    # synthetic demand: Poisson arrivals per step, OD from a uniform/hotspot mixture
    order_rate: float = 10.0
    hotspot_frac: float = 0.5
    hotspots: tuple[tuple[float, float, float], ...] = (
        (3.0, 3.0, 1.0),
        (7.0, 6.5, 1.2),
        (4.5, 8.0, 0.8),
    )
    seed: int = 0

    def validate(self) -> "SimConfig":
        if self.n_drivers < 1:
            raise ConfigError("n_drivers", "must be >= 1")
        if self.capacity < 1:
            raise ConfigError("capacity", "must be >= 1")
        if self.speed_kmh <= 0:
            raise ConfigError("speed_kmh", "must be > 0")
        if self.step_len <= 0:
            raise ConfigError("step_len", "must be > 0")
        if self.horizon < 1:
            raise ConfigError("horizon", "must be >= 1")
        if self.city_width <= 0 or self.city_height <= 0:
            raise ConfigError("city_width", "city extent must be positive")
        if self.max_wait < 0:
            raise ConfigError("max_wait", "must be >= 0")
        if len(self.beta) != 5:
            raise ConfigError("beta", "needs exactly five weights")
        if any(b < 0 for b in self.beta):
            raise ConfigError("beta", "weights must be non-negative")
        if min(self.fare_base, self.fare_km, self.payout_km) < 0:
            raise ConfigError("fare_base", "fare and payout parameters must be non-negative")
        if self.order_rate < 0:
            raise ConfigError("order_rate", "must be >= 0")
        if not 0.0 <= self.hotspot_frac <= 1.0:
            raise ConfigError("hotspot_frac", "must lie in [0, 1]")
        if self.hotspot_frac > 0 and not self.hotspots:
            raise ConfigError("hotspots", "hotspot_frac > 0 needs at least one hotspot")
        for h in self.hotspots:
            if len(h) != 3 or h[2] <= 0:
                raise ConfigError("hotspots", "each hotspot is (x, y, sigma) with sigma > 0")
        return self

    @property
    def episode_seconds(self) -> float:
        return self.horizon * self.step_len

    @property
    def feature_dim(self) -> int:
        return 10 + 5 * self.capacity


METHODS = ("grpo", "ospo", "ospo-episode-norm", "ippo", "ipg")


@dataclass(frozen=True)
class TrainerConfig:
    method: str = "ospo"
    episodes: int = 1000
    gamma: float = 0.95
    alpha: float = 0.1  # deviation-penalty weight
    clip_low: float = 0.2
    clip_high: float = 0.28
    kl_coef: float = 0.01
    epochs: int = 4
    batch_size: int = 256
    lr: float = 1e-4
    lr_decay: float = 0.99  # applied once per training episode
    hidden: int = 128
    gae_lambda: float = 0.95  # IPPO only
    critic_lr: float = 1e-3  # IPPO only
    noise_start: float = 0.1
    noise_decay: float = 0.99
    noise_floor: float = 0.0
    eval_every: int = 10
    eval_seeds: tuple[int, ...] = tuple(range(1000, 1010))
    seed: int = 0

    def validate(self) -> "TrainerConfig":
        if self.method == "greedy":
            raise ConfigError("method", "greedy is an evaluation-only baseline and cannot be trained")
        if self.method not in METHODS:
            raise ConfigError("method", f"unknown method {self.method!r}; trainable methods are {', '.join(METHODS)}")
        if self.episodes < 0:
            raise ConfigError("episodes", "must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma", "must lie in [0, 1]")
        if self.alpha < 0:
            raise ConfigError("alpha", "must be >= 0")
        if self.clip_low <= 0:
            raise ConfigError("clip_low", "must be > 0")
        if self.clip_high < self.clip_low:
            raise ConfigError("clip_high", "must be >= clip_low")
        if self.kl_coef < 0:
            raise ConfigError("kl_coef", "must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr", "must be > 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay", "must lie in (0, 1]")
        if self.hidden < 1:
            raise ConfigError("hidden", "must be >= 1")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("gae_lambda", "must lie in [0, 1]")
        for name in ("noise_start", "noise_decay", "noise_floor"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(name, "must lie in [0, 1]")
        if self.eval_every < 1:
            raise ConfigError("eval_every", "must be >= 1")
        if not self.eval_seeds:
            raise ConfigError("eval_seeds", "needs at least one seed")
        return self

    def noise_at(self, episode: int) -> float:
        return max(self.noise_start * self.noise_decay**episode, self.noise_floor)


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    orders_csv: str | None = None  # replay source; synthetic demand when unset

    def validate(self) -> "RunConfig":
        self.sim.validate()
        self.trainer.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for part in (self.sim, self.trainer):
            for f in fields(part):
                out[_key(part, f.name)] = _plain(getattr(part, f.name))
        out["orders_csv"] = self.orders_csv
        return out


# SimConfig.seed and TrainerConfig.seed share a name; the flat file keeps them apart.
_RENAMES = {("SimConfig", "seed"): "sim_seed"}


def _key(part: Any, name: str) -> str:
    return _RENAMES.get((type(part).__name__, name), name)


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def _coerce(field_type: Any, name: str, value: Any) -> Any:
    kind = str(field_type)
    if kind.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(name, "expected a list")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    return value


def config_from_dict(raw: dict[str, Any]) -> RunConfig:
    """Build a validated RunConfig from a flat mapping; unknown keys are errors."""
    sim_fields = {f.name: f for f in fields(SimConfig)}
    sim_fields["sim_seed"] = sim_fields.pop("seed")
    trainer_fields = {f.name: f for f in fields(TrainerConfig)}
    sim_kwargs: dict[str, Any] = {}
    trainer_kwargs: dict[str, Any] = {}
    orders_csv = None
    for key, value in raw.items():
        if key == "orders_csv":
            orders_csv = None if value is None else str(value)
        elif key in sim_fields:
            f = sim_fields[key]
            sim_kwargs[f.name] = _coerce(f.type, key, value)
        elif key in trainer_fields:
            f = trainer_fields[key]
            trainer_kwargs[f.name] = _coerce(f.type, key, value)
        else:
            raise ConfigError(key, "unknown config key")
    cfg = RunConfig(SimConfig(**sim_kwargs), TrainerConfig(**trainer_kwargs), orders_csv)
    return cfg.validate()


def load_config(path: str | Path) -> RunConfig:
    text = Path(path).read_text()
    raw = yaml.safe_load(text) or {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a flat key: value mapping")
    for key, value in raw.items():
        if isinstance(value, dict):
            raise ConfigError(str(key), "nested sections are not allowed")
    return config_from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def replace(cfg: Any, **changes: Any) -> Any:
    return dataclasses.replace(cfg, **changes)
