"""Training configuration with strict validation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .causal import ENV_MODES
from .sampler import SAMPLER_KINDS


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 1024
    lr: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    d: int = 64
    K: int = 3
    T: int = 20
    t0: int = 1
    stride: int | None = None          # None -> ceil(T / 5)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lambda1: float = 1e-3
    lambda2: float = 1e-3
    lambda3: float = 1e-3
    tau_temp: float = 0.2
    mix_initial: list = field(default_factory=lambda: [2.0, 8.0])
    mix_final: list = field(default_factory=lambda: [9.0, 1.0])
    sampler: str = "cnsdiff"
    dns_candidates: int = 32
    num_envs: int = 4
    env_mode: str = "popularity"
    uniform_prior: bool = False
    global_kl: bool = False
    hidden: int = 64
    time_dim: int = 16
    env_dim: int = 8
    init_std: float = 0.01
    reverse_noise: bool = True
    warmup_epochs: int = 0
    seed: int = 0
    eval_every: int = 5
    fhns_threshold: float = 0.99
    save_checkpoints: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def stepset_stride(self) -> int:
        return self.stride if self.stride else math.ceil(self.T / 5)

    def validate(self) -> None:
        ints_pos = ("batch_size", "d", "T", "t0", "dns_candidates", "num_envs", "hidden", "time_dim",
                    "env_dim", "eval_every")
        for name in ints_pos:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(name, f"expected an integer >= 1, got {v!r}")
        for name in ("epochs", "K", "seed", "warmup_epochs"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(name, f"expected an integer >= 0, got {v!r}")
        if self.stride is not None and (not isinstance(self.stride, int) or self.stride < 1):
            raise ConfigError("stride", "expected null or an integer >= 1")
        if not _num(self.lr) or self.lr < 0:
            raise ConfigError("lr", "expected a non-negative number")
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not _num(v) or v < 0:
                raise ConfigError(name, "expected a non-negative number")
        if not _num(self.tau_temp) or self.tau_temp <= 0:
            raise ConfigError("tau_temp", "expected a positive number")
        if not _num(self.init_std) or self.init_std <= 0:
            raise ConfigError("init_std", "expected a positive number")
        if not (_num(self.beta_start) and _num(self.beta_end) and 0 < self.beta_start <= self.beta_end < 1):
            raise ConfigError("beta_start", "need 0 < beta_start <= beta_end < 1")
        if self.t0 > self.T:
            raise ConfigError("t0", "initial step exceeds T")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer", "expected 'adam' or 'sgd'")
        if self.sampler not in SAMPLER_KINDS:
            raise ConfigError("sampler", f"expected one of {SAMPLER_KINDS}")
        if self.env_mode not in ENV_MODES:
            raise ConfigError("env_mode", f"expected one of {ENV_MODES}")
        for name in ("mix_initial", "mix_final"):
            v = getattr(self, name)
            if not isinstance(v, (list, tuple)) or len(v) != 2 or not all(_num(x) and x >= 0 for x in v) \
                    or sum(v) <= 0:
                raise ConfigError(name, "expected [alpha, beta] with non-negative entries and positive sum")
        if not (_num(self.fhns_threshold) and 0 < self.fhns_threshold <= 1):
            raise ConfigError("fhns_threshold", "expected a value in (0, 1]")
        for name in ("adam_beta1", "adam_beta2"):
            if not (_num(getattr(self, name)) and 0 <= getattr(self, name) < 1):
                raise ConfigError(name, "expected a value in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {f.name: {} for f in fields(TrainConfig)},
}
