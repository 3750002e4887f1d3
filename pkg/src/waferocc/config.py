"""Training configuration and its ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

MODEL_KINDS = ("dsvdd", "aae", "aae_dsvdd")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    model_kind: str = "aae_dsvdd"
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    # discriminator lr = learning_rate * disc_lr_scale; >1 is a two-timescale update
    disc_lr_scale: float = 1.0
    latent_dim: int = 32
    image_size: int = 64
    encoder_widths: tuple[int, ...] = (512, 256)
    decoder_widths: tuple[int, ...] = (256, 512)
    discriminator_widths: tuple[int, ...] = (128, 64)
    nu_svdd: float = 0.1
    nu_prior: float = 1.0
    w_rec: float = 1.0
    w_adv: float = 1.0
    w_svdd: float = 1.0
    weight_decay: float = 1e-6
    seed: int = 0
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    checkpoint_path: str = "model.wmck"
    log_path: str = ""
    debug: bool = False

    # fields that do not change what a checkpoint's parameters mean
    RUNTIME_FIELDS = ("epochs", "train_path", "valid_path", "test_path",
                      "checkpoint_path", "log_path", "debug")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if not 0 < self.nu_svdd <= 1:
            raise ConfigError("nu_svdd must lie in (0, 1]")
        if self.nu_prior <= 0:
            raise ConfigError("nu_prior must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1 or self.latent_dim < 1 or self.image_size < 1:
            raise ConfigError("batch_size, latent_dim and image_size must be positive")
        if self.learning_rate <= 0 or self.disc_lr_scale <= 0:
            raise ConfigError("learning_rate and disc_lr_scale must be positive")
        if min(self.w_rec, self.w_adv, self.w_svdd) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")

    @property
    def loss_weights(self) -> tuple[float, float, float]:
        return (self.w_rec, self.w_adv, self.w_svdd)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            else:
                v = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, _, val = (s.strip() for s in line.partition("="))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, types[key], val, lineno)
        try:
            return cls(**values)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def digest(self) -> bytes:
        """SHA-256 over every field except the runtime-only ones."""
        text = "\n".join(line for line in self.to_text().splitlines()
                         if line.split(" = ", 1)[0] not in self.RUNTIME_FIELDS)
        return hashlib.sha256(text.encode()).digest()


def _coerce(key: str, typ, val: str, lineno: int):
    typ = str(typ)
    try:
        if typ.startswith("tuple"):
            return tuple(int(x) for x in val.split(",") if x.strip())
        if typ == "bool":
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {val!r} for {key} ({typ})") from None
