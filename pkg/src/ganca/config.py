"""Run configuration: a JSON file plus command-line overrides (flags win)."""

from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .gan import GanConfig
from .supervised import TrainConfig

MODES = ("supervised", "ganca")


@dataclass
class RunConfig:
    # where things live
    manifest: str | None = None
    out_dir: str = "runs/default"
    mode: str = "supervised"
    seed: int = 0
    # shared
    steps: int = 10000
    batch_size: int = 16
    iter_lo: int = 50
    iter_hi: int = 60
    depth: int = 16
    hidden: int = 128
    checkpoint_every: int = 1000
    # supervised
    lr: float = 2e-3
    lr_decay_at: float = 0.8
    lr_decay: float = 0.1
    reuse_prob: float = 0.5
    pool_capacity: int = 8
    val_every: int = 100
    # adversarial
    loss_kind: str = "bce_smoothed"
    noise_sigma: float = 0.1
    noise_sigma_final: float | None = None
    label_real: float = 0.9
    label_fake: float = 0.1
    n_critic: int = 5
    clip_c: float = 0.01
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1_g: float = 0.5
    beta1_d: float = 0.5

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, raw: dict, source: str = "config") -> "RunConfig":
        unknown = sorted(set(raw) - set(cls.field_names()))
        if unknown:
            raise ConfigError(f"{source}: unknown keys: {', '.join(unknown)}")
        cfg = cls()
        bad = []
        for key, value in raw.items():
            try:
                setattr(cfg, key, _coerce(key, value))
            except (TypeError, ValueError) as exc:
                bad.append(f"{key}: {exc}")
        if bad:
            raise ConfigError(f"{source}: " + "; ".join(bad))
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw, str(path))

    def override(self, **values) -> "RunConfig":
        raw = asdict(self)
        raw.update({k: v for k, v in values.items() if v is not None})
        return RunConfig.from_dict(raw, "overrides")

    def _sub(self, cls):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in asdict(self).items() if k in names})

    def train_config(self) -> TrainConfig:
        return self._sub(TrainConfig)

    def gan_config(self) -> GanConfig:
        return self._sub(GanConfig)

    def validate(self) -> "RunConfig":
        bad = []
        if self.mode not in MODES:
            bad.append(f"mode must be one of {MODES} (got {self.mode!r})")
        if not self.manifest:
            bad.append("manifest is required")
        bad += self.train_config().errors() if self.mode == "supervised" else self.gan_config().errors()
        if bad:
            raise ConfigError("invalid run config:\n  " + "\n  ".join(bad))
        return self


_HINTS = typing.get_type_hints(RunConfig)


def _coerce(key: str, value):
    hint = _HINTS[key]
    args = typing.get_args(hint)
    optional = type(None) in args
    base = next((a for a in args if a is not type(None)), hint) if args else hint
    if value is None or (optional and isinstance(value, str) and value.lower() in ("none", "null")):
        if optional:
            return None
        raise ValueError("may not be null")
    if base is bool:
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes")
        return bool(value)
    if base is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"expected an integer, got {value!r}")
        if isinstance(value, bool):
            raise ValueError(f"expected an integer, got {value!r}")
        return int(float(value)) if isinstance(value, str) else int(value)
    if base is float:
        if isinstance(value, bool):
            raise ValueError(f"expected a number, got {value!r}")
        return float(value)
    return str(value)


def parse_assignments(items) -> dict:
    """``["steps=10", "lr=1e-3"]`` -> ``{"steps": "10", "lr": "1e-3"}``."""
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out
