"""Compact convolutional front end: raw trial (C, T) -> flat feature vector z.

Pipeline per trial: temporal convolution, spatial collapse over channels,
nonlinearity, non-overlapping mean pooling, then optional extra depthwise
temporal stages.  The pooled map (F, T_pool) is flattened filters-major, so
z[f * T_pool + t] is filter f at pooled time t.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numcore as nc
from .numcore import Param, Tensor


class ConfigError(ValueError):
    pass


ACTIVATIONS = ("elu", "square_log", "linear")


@dataclass(frozen=True)
class BackboneConfig:
    temporal_kernel: int = 25
    temporal_filters: int = 8
    pool_stride: int = 15
    activation: str = "elu"
    extra_stages: int = 0
    stage_kernel: int = 9
    log_eps: float = 1e-6

    def validate(self, T: int | None = None, w_max: int | None = None):
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError(f"temporal_kernel must be odd and positive, got {self.temporal_kernel}")
        if self.stage_kernel < 1 or self.stage_kernel % 2 == 0:
            raise ConfigError(f"stage_kernel must be odd and positive, got {self.stage_kernel}")
        if self.temporal_filters < 1 or self.pool_stride < 1 or self.extra_stages < 0:
            raise ConfigError(f"invalid backbone config {self}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if T is not None:
            if self.temporal_kernel > T:
                raise ConfigError(f"temporal_kernel {self.temporal_kernel} longer than T={T}")
            if T // self.pool_stride < 1:
                raise ConfigError(f"pool_stride {self.pool_stride} leaves no samples from T={T}")
            if w_max is not None and self.output_length(T) < w_max:
                raise ConfigError(
                    f"feature length {self.output_length(T)} shorter than patch window {w_max}")

    def pooled_length(self, T: int) -> int:
        return T // self.pool_stride

    def output_length(self, T: int) -> int:
        return self.temporal_filters * self.pooled_length(T)


PRESETS = {
    "shallow": BackboneConfig(temporal_kernel=25, temporal_filters=8, pool_stride=15,
                              activation="square_log"),
    "compact": BackboneConfig(temporal_kernel=25, temporal_filters=8, pool_stride=15,
                              activation="elu"),
    "deep": BackboneConfig(temporal_kernel=11, temporal_filters=12, pool_stride=15,
                           activation="elu", extra_stages=2, stage_kernel=5),
}


def preset(name: str, **overrides) -> BackboneConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides)


def conv_temporal(x, kernels) -> Tensor:
    """(B, C, T) -> (B, F, C, T): every filter run along time on every channel."""
    x = nc.as_tensor(x)
    if kernels.shape[-1] > x.shape[-1]:
        raise ConfigError(f"kernel length {kernels.shape[-1]} exceeds T={x.shape[-1]}")
    return nc.temporal_conv(x, kernels)


def spatial_collapse(u, weights) -> Tensor:
    """(B, F, C, T) with weights (F, C) -> (B, F, T)."""
    u, weights = nc.as_tensor(u), nc.as_tensor(weights)
    B, F, C, T = u.shape
    if weights.shape != (F, C):
        raise nc.DimensionError(f"spatial weights {weights.shape} do not match (F, C)=({F}, {C})")
    out = np.einsum("bfct,fc->bft", u.data, weights.data, optimize=True)

    def backward(g):
        return (np.einsum("bft,fc->bfct", g, weights.data, optimize=True),
                np.einsum("bft,bfct->fc", g, u.data, optimize=True))

    return nc._make(out, (u, weights), backward)


def _activation(v: Tensor, cfg: BackboneConfig) -> Tensor:
    if cfg.activation == "elu":
        return nc.elu(v)
    if cfg.activation == "square_log":
        return nc.square(v)
    return v


def init_params(cfg: BackboneConfig, n_channels: int, rng: np.random.Generator,
                prefix: str = "backbone") -> dict:
    F, k = cfg.temporal_filters, cfg.temporal_kernel
    params = {
        f"{prefix}.temporal": Param(rng.normal(0, 1.0 / np.sqrt(k), (F, k)), f"{prefix}.temporal"),
        f"{prefix}.spatial": Param(rng.normal(0, 1.0 / np.sqrt(n_channels), (F, n_channels)),
                                   f"{prefix}.spatial"),
        f"{prefix}.bias": Param(np.zeros((F, 1)), f"{prefix}.bias"),
    }
    for i in range(cfg.extra_stages):
        ks = cfg.stage_kernel
        name = f"{prefix}.stage{i}"
        kern = np.zeros((F, ks))
        kern[:, ks // 2] = 1.0
        kern += rng.normal(0, 0.1 / np.sqrt(ks), (F, ks))
        params[name] = Param(kern, name)
        params[name + ".bias"] = Param(np.zeros((F, 1)), name + ".bias")
    return params


def backbone_forward(x, cfg: BackboneConfig, params: dict, prefix: str = "backbone") -> Tensor:
    """(B, C, T) -> (B, T') with T' = filters * (T // pool_stride).

    The temporal and spatial stages are both linear, so they are evaluated as
    spatial mixing followed by a depthwise temporal pass; this equals
    spatial_collapse(conv_temporal(x)) at a fraction of the cost.
    """
    x = nc.as_tensor(x)
    B, C, T = x.shape
    cfg.validate(T)
    W = params[f"{prefix}.spatial"]
    if W.shape != (cfg.temporal_filters, C):
        raise ConfigError(f"spatial weights {W.shape} incompatible with {C} channels")
    mixed = _spatial_mix(x, W)
    v = nc.temporal_conv(mixed, params[f"{prefix}.temporal"], depthwise=True)
    v = nc.add(v, params[f"{prefix}.bias"])
    a = _activation(v, cfg)
    pooled = nc.mean_pool(a, cfg.pool_stride)
    if cfg.activation == "square_log":
        pooled = nc.log(nc.add(pooled, cfg.log_eps))
    for i in range(cfg.extra_stages):
        name = f"{prefix}.stage{i}"
        pooled = nc.elu(nc.add(nc.temporal_conv(pooled, params[name], depthwise=True),
                               params[name + ".bias"]))
    return nc.reshape(pooled, (B, cfg.output_length(T)))


def _spatial_mix(x: Tensor, W: Tensor) -> Tensor:
    """(B, C, T) mixed by W (F, C) -> (B, F, T)."""
    out = np.einsum("fc,bct->bft", W.data, x.data, optimize=True)

    def backward(g):
        return (np.einsum("fc,bft->bct", W.data, g, optimize=True),
                np.einsum("bft,bct->fc", g, x.data, optimize=True))

    return nc._make(out, (x, W), backward)
