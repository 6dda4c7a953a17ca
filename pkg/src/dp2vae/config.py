"""Run configuration: defaults < ``key = value`` file < ``DP2VAE_*`` env < flags."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .errors import DP2VAEError

ENV_PREFIX = "DP2VAE_"


class UsageError(DP2VAEError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


@dataclass
class RunConfig:
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    out: str = "runs/desk"
    seed: int = 0
    K: int = 20
    B: int = 32
    T_p: int = 300
    T: int = 500
    lr_p: float = 1e-3
    lr: float = 1e-3
    C: float = 1.0
    sigma: float = 8.0
    delta: float = 1e-5
    d_z: int = 8
    freeze_encoders: bool = False
    amplification: str = "subset"
    workers: int = 1
    eps_every: int = 50
    samples_per_class: int = 200
    feature_dim: int = 64
    eval_runs: int = 5
    audit_batches: int = 1000
    audit_batch_size: int = 8
    audit_alpha: float = 8.0

    def validate(self) -> "RunConfig":
        def need(ok, key, what):
            if not ok:
                raise UsageError(f"invalid value for {key}: {getattr(self, key)!r} ({what})", key)

        for key in ("K", "B", "d_z", "workers", "eps_every", "samples_per_class",
                    "feature_dim", "eval_runs", "audit_batches", "audit_batch_size"):
            need(getattr(self, key) >= 1, key, "must be >= 1")
        for key in ("T_p", "T", "seed"):
            need(getattr(self, key) >= 0, key, "must be >= 0")
        need(self.seed < 2 ** 64, "seed", "must fit in 64 bits")
        for key in ("lr_p", "lr"):
            need(getattr(self, key) >= 0, key, "must be >= 0")
        need(self.C > 0, "C", "must be > 0")
        need(self.sigma > 0, "sigma", "must be > 0")
        need(0 < self.delta < 1, "delta", "must lie in (0, 1)")
        need(self.audit_alpha > 1, "audit_alpha", "must be > 1")
        need(self.amplification in ("subset", "batch"), "amplification", "subset or batch")
        return self

    def artifact_dict(self) -> dict:
        """Config as embedded in artifacts; the output location is not part of it."""
        d = dataclasses.asdict(self)
        d.pop("out")
        return d

    def lines(self) -> list:
        return [f"{k} = {v}" for k, v in dataclasses.asdict(self).items()]


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, raw):
    if key not in FIELD_TYPES:
        raise UsageError(f"unknown config key {key!r}", key)
    kind = FIELD_TYPES[key]
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise UsageError(f"cannot parse {key} = {raw!r} as {kind}", key) from None
    return raw.strip()


def read_config_file(path) -> dict:
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key in values:
                raise UsageError(f"{path}:{lineno}: duplicate key {key!r}", key)
            values[key] = coerce(key, raw)
    return values


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    by_upper = {name.upper(): name for name in FIELD_TYPES}
    out = {}
    for var, raw in environ.items():
        if var.startswith(ENV_PREFIX):
            name = by_upper.get(var[len(ENV_PREFIX):].upper())
            if name is None:
                raise UsageError(f"unknown environment override {var}", var)
            out[name] = coerce(name, raw)
    return out


def parse_config(flags: dict, config_file=None, environ=None) -> RunConfig:
    """Resolve a config. ``flags`` maps keys to values already given on the command line."""
    values = {}
    if config_file:
        values.update(read_config_file(config_file))
    values.update(env_overrides(environ))
    values.update({k: coerce(k, v) for k, v in flags.items() if v is not None})
    return RunConfig(**values).validate()
