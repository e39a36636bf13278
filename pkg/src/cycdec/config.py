"""key=value configuration files.

One ``key = value`` pair per line, ``#`` starts a comment, blank lines are
ignored.  Values are typed by the dataclass field they land in; tuples are
comma separated.  Any field may be overridden from the environment with
``CYC_<KEY>`` (upper case), which takes precedence over the file.
"""
from __future__ import annotations

import dataclasses
import math
import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path

ENV_PREFIX = "CYC_"


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if origin is tuple:
            inner = typing.get_args(typ)[0]
            return tuple(_parse_value(p, inner, key) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    raise ConfigError(f"unsupported field type for {key!r}: {typ}")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def parse_kv(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def from_mapping(cls, mapping: dict, env: dict | None = None):
    """Build dataclass ``cls`` from string values, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = dict(mapping)
    if env is not None:
        for name in names:
            key = ENV_PREFIX + name.upper()
            if key in env:
                values[name] = env[key]
    kwargs = {k: _parse_value(v, hints[k], k) for k, v in values.items()}
    return cls(**kwargs)


def dumps(obj) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(obj, f.name))}\n" for f in fields(obj))


def loads(cls, text: str, use_env: bool = False):
    return from_mapping(cls, parse_kv(text), dict(os.environ) if use_env else None)


@dataclass(frozen=True)
class RunConfig:
    # paths
    data_path: str = "data/trials.mitr"
    out_dir: str = "runs/default"
    seed: int = 0
    # synthetic data (used by the synth subcommand)
    synth_subjects: int = 9
    synth_trials_per_class: int = 72
    synth_channels: int = 22
    synth_times: int = 750
    synth_sample_rate: int = 250
    synth_class_freqs: tuple[float, ...] = (8.0, 13.0, 19.0, 27.0)
    synth_active_channels: int = 6
    synth_noise_std: float = 1.0
    synth_gain_jitter: float = 0.2
    # model
    backbone: str = "compact"
    use_mhsp: bool = True
    use_iue: bool = True
    windows: tuple[int, ...] = (16,)
    stride: int = 0  # 0 -> half of each window
    d: int = 8
    d_h: int = 32
    L_max: int = 4
    rms_eps: float = 1e-5
    tau_ens: float = 4.0
    tau_stop: float = 0.85
    # search targets
    n_simulations: int = 8
    ucb_c: float = math.sqrt(2.0)
    # objective / optimiser
    lambda_halt: float = 0.05
    lambda_iue: float = 0.5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 100
    batch_size: int = 16
    val_fraction: float = 0.2
    # reporting
    sample_std: bool = False

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def load_run_config(path, use_env: bool = True) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return loads(RunConfig, path.read_text(encoding="utf-8"), use_env=use_env)
