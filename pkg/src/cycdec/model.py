"""Backbone + cycle encoder + reliability head, wired into one decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import iue, mhsp
from . import numcore as nc
from .config import RunConfig
from .mhsp import CycleOutput, CycleTrace


@dataclass(frozen=True)
class DecoderConfig:
    n_channels: int
    n_times: int
    n_classes: int = 4
    temporal_kernel: int = 25
    temporal_filters: int = 8
    pool_stride: int = 15
    activation: str = "elu"
    extra_stages: int = 0
    stage_kernel: int = 9
    use_mhsp: bool = True
    use_iue: bool = True
    windows: tuple[int, ...] = (16,)
    stride: int = 0
    d: int = 8
    d_h: int = 32
    L_max: int = 4
    rms_eps: float = 1e-5
    tau_ens: float = 4.0
    tau_stop: float = 0.85

    @classmethod
    def from_run_config(cls, rc: RunConfig, n_channels: int, n_times: int,
                        n_classes: int) -> "DecoderConfig":
        b = bb.preset(rc.backbone)
        return cls(n_channels=n_channels, n_times=n_times, n_classes=n_classes,
                   temporal_kernel=b.temporal_kernel, temporal_filters=b.temporal_filters,
                   pool_stride=b.pool_stride, activation=b.activation,
                   extra_stages=b.extra_stages, stage_kernel=b.stage_kernel,
                   use_mhsp=rc.use_mhsp, use_iue=rc.use_iue and rc.use_mhsp,
                   windows=tuple(rc.windows), stride=rc.stride, d=rc.d, d_h=rc.d_h,
                   L_max=rc.L_max, rms_eps=rc.rms_eps, tau_ens=rc.tau_ens, tau_stop=rc.tau_stop)

    @property
    def backbone(self) -> bb.BackboneConfig:
        return bb.BackboneConfig(self.temporal_kernel, self.temporal_filters, self.pool_stride,
                                 self.activation, self.extra_stages, self.stage_kernel)

    @property
    def mhsp(self) -> mhsp.MHSPConfig:
        return mhsp.MHSPConfig(tuple(self.windows), self.stride or None, self.d, self.d_h,
                               self.L_max, self.rms_eps)

    @property
    def feature_length(self) -> int:
        return self.backbone.output_length(self.n_times)

    def validate(self):
        w_max = max(self.windows) if self.use_mhsp else None
        self.backbone.validate(self.n_times, w_max)
        if self.use_mhsp:
            self.mhsp.validate(self.feature_length)
        if self.use_iue and not self.use_mhsp:
            raise bb.ConfigError("the reliability head needs the cycle encoder (use_mhsp)")


class Decoder:
    """Holds named parameters and runs the forward pass.

    Variants: backbone + linear head (use_mhsp=False); backbone + cycle
    encoder classified from the last cycle (use_iue=False); full model with
    reliability-weighted aggregation and early halting.
    """

    def __init__(self, cfg: DecoderConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params = bb.init_params(cfg.backbone, cfg.n_channels, rng)
        if cfg.use_mhsp:
            self.params.update(mhsp.init_params(cfg.mhsp, cfg.n_classes, rng))
            if cfg.use_iue:
                self.params.update(iue.init_params(cfg.d_h, cfg.n_classes, rng))
        else:
            T = cfg.feature_length
            self.params["base.W"] = nc.Param(rng.normal(0, 1.0 / np.sqrt(T), (cfg.n_classes, T)),
                                             "base.W")
            self.params["base.b"] = nc.Param(np.zeros(cfg.n_classes), "base.b")

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data[...] = v

    def features(self, X) -> nc.Tensor:
        return bb.backbone_forward(X, self.cfg.backbone, self.params)

    def _reliability_fn(self):
        if not self.cfg.use_iue:
            return None
        W, b = self.params["iue.W"], self.params["iue.b"]
        return lambda g, logits: iue.reliability(g, logits, W, b)

    def forward(self, X, halting: bool = False, L_max: int | None = None) -> CycleTrace:
        """Run one batch; halting applies the batch-mean stopping rule."""
        z = self.features(X)
        cfg = self.cfg
        if not cfg.use_mhsp:
            logits = nc.linear(z, self.params["base.W"], self.params["base.b"])
            return CycleTrace([CycleOutput(logits, z, 1)], [], False, logits)
        halter = None
        if halting and cfg.use_iue:
            halter = lambda tr, c: iue.should_halt(tr.reliabilities[-1], c, cfg.tau_stop)  # noqa: E731
        trace = mhsp.run_cycles(z, cfg.mhsp, self.params, self._reliability_fn(), halter, L_max)
        if cfg.use_iue:
            trace.final_logits = iue.aggregate(trace, cfg.tau_ens)
        else:
            trace.final_logits = trace.outputs[-1].logits
        return trace

    def predict_logits(self, X, batch_size: int = 64):
        """Per-trial inference as if each trial were its own batch of one.

        Every sample runs all cycles; the realised depth of sample b is the
        first c >= 2 whose reliability exceeds tau_stop (else L_max), and its
        logits aggregate cycles 1..depth only.  Samples never interact, so this
        matches a batch-size-1 loop exactly.  Returns (logits, depths).
        """
        X = np.asarray(X)
        out_logits, out_depth = [], []
        with nc.no_grad():
            for i in range(0, len(X), batch_size):
                xb = np.asarray(X[i:i + batch_size], dtype=np.float64)
                trace = self.forward(xb)
                if not self.cfg.use_iue:
                    out_logits.append(trace.final_logits.data)
                    out_depth.append(np.full(len(xb), trace.n_cycles))
                    continue
                r = np.stack([x.data for x in trace.reliabilities], axis=1)
                logits = np.stack([o.logits.data for o in trace.outputs], axis=1)
                depth = halting_depths(r, self.cfg.tau_stop)
                out_logits.append(aggregate_prefix(logits, r, depth, self.cfg.tau_ens))
                out_depth.append(depth)
        return np.concatenate(out_logits), np.concatenate(out_depth)

    def predict(self, X, batch_size: int = 64) -> np.ndarray:
        return self.predict_logits(X, batch_size)[0].argmax(axis=1)


def halting_depths(r: np.ndarray, tau_stop: float) -> np.ndarray:
    """(B, L) reliabilities -> per-sample realised cycle count."""
    B, L = r.shape
    depth = np.full(B, L)
    for c in range(L - 1, 1, -1):  # c counts from 1; scan backwards so the earliest wins
        fire = r[:, c - 1] > tau_stop
        depth[fire] = c
    return depth


def aggregate_prefix(logits: np.ndarray, r: np.ndarray, depth: np.ndarray,
                     tau_ens: float) -> np.ndarray:
    B, L, K = logits.shape
    mask = np.arange(1, L + 1)[None, :] <= depth[:, None]
    s = np.where(mask, tau_ens * r, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    a = np.where(mask, np.exp(s), 0.0)
    a /= a.sum(axis=1, keepdims=True)
    return (a[..., None] * logits).sum(axis=1)
