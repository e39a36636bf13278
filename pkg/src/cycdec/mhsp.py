"""Patch-level low-level encoder, cross-cycle high-level encoder, cycle loop."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .numcore import Param, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class CycleOutput:
    logits: Tensor  # (B, K)
    state: Tensor   # (B, d_h), the high-level state after this cycle
    cycle_index: int


@dataclass
class CycleTrace:
    outputs: list = field(default_factory=list)
    reliabilities: list = field(default_factory=list)  # one (B,) tensor per cycle
    halted_early: bool = False
    final_logits: Tensor | None = None

    @property
    def n_cycles(self) -> int:
        return len(self.outputs)

    def truncated(self, c: int) -> "CycleTrace":
        return CycleTrace(self.outputs[:c], self.reliabilities[:c], False, None)


def default_stride(w: int) -> int:
    return max(1, w // 2)


def patch_count(length: int, w: int, s: int) -> int:
    return (length - w) // s + 1


def patch_indices(length: int, w: int, s: int) -> np.ndarray:
    if not 1 <= w <= length:
        raise ConfigError(f"window {w} must lie in [1, {length}]")
    if not 1 <= s <= w:
        raise ConfigError(f"stride {s} must lie in [1, {w}]")
    n = patch_count(length, w, s)
    return np.arange(n)[:, None] * s + np.arange(w)[None, :]


def patchify(z, w: int, s: int) -> Tensor:
    """(B, T') -> (B, n, w); patch i is z[:, i*s : i*s + w]."""
    z = nc.as_tensor(z)
    return nc.take(z, patch_indices(z.shape[-1], w, s), axis=-1)


def pool_matrix(w: int, d: int) -> np.ndarray:
    """(w, d) averaging matrix; bin j spans [floor(j*w/d), floor((j+1)*w/d))."""
    if d < 1:
        raise ConfigError(f"pooled dimension must be >= 1, got {d}")
    A = np.zeros((w, d))
    for j in range(d):
        lo = (j * w) // d
        hi = max(((j + 1) * w) // d, lo + 1)
        A[lo:hi, j] = 1.0 / (hi - lo)
    return A


def adaptive_pool(P, d: int) -> Tensor:
    P = nc.as_tensor(P)
    return nc.matmul(P, pool_matrix(P.shape[-1], d))


def top_down_gate(p, h_prev, W_g, b_g) -> Tensor:
    """Scale every patch of a sample by sigmoid(W_g h_prev + b_g).

    With no previous high-level state (first cycle) patches pass unchanged.
    """
    p = nc.as_tensor(p)
    if h_prev is None:
        return p
    g = nc.sigmoid(nc.linear(h_prev, W_g, b_g))  # (B, d)
    B, d = g.shape
    return nc.mul(p, nc.reshape(g, (B, 1, d)))


GRU_NAMES = ("Wz", "Wr", "Wh", "Uz", "Ur", "Uh", "bz", "br", "bh")


def init_gru(prefix: str, d_in: int, d_h: int, rng: np.random.Generator) -> dict:
    params = {}
    for name in GRU_NAMES:
        if name[0] == "W":
            v = rng.normal(0, 1.0 / np.sqrt(d_in), (d_h, d_in))
        elif name[0] == "U":
            v = rng.normal(0, 1.0 / np.sqrt(d_h), (d_h, d_h))
        else:
            v = np.zeros(d_h)
        params[f"{prefix}.{name}"] = Param(v, f"{prefix}.{name}")
    return params


def _gru_args(params: dict, prefix: str) -> list:
    return [params[f"{prefix}.{n}"] for n in GRU_NAMES]


def lle_forward(P, params: dict, eps: float = 1e-5, prefix: str = "lle") -> Tensor:
    """Run the patch recurrence from a zero state and RMS-normalise h_n."""
    P = nc.as_tensor(P)
    B = P.shape[0]
    d_h = params[f"{prefix}.bz"].shape[0]
    h_n = nc.gru_sequence(P, np.zeros((B, d_h)), *_gru_args(params, prefix))
    return nc.rms_norm(h_n, params[f"{prefix}.gamma"], params[f"{prefix}.beta"], eps)


def gru_cell(x, h, Wz, Wr, Wh, Uz, Ur, Uh, bz, br, bh) -> Tensor:
    """One gated-recurrent step built from primitive ops."""
    z = nc.sigmoid(nc.add(nc.linear(x, Wz, bz), nc.linear(h, Uz)))
    r = nc.sigmoid(nc.add(nc.linear(x, Wr, br), nc.linear(h, Ur)))
    c = nc.tanh(nc.add(nc.linear(x, Wh, bh), nc.linear(nc.mul(r, h), Uh)))
    return nc.add(nc.mul(nc.sub(1.0, z), h), nc.mul(z, c))


def hle_forward(h_lle, h_carry, params: dict, prefix: str = "hle") -> Tensor:
    """One high-level recurrent step: input h_lle, prior state h_carry."""
    return gru_cell(h_lle, h_carry, *_gru_args(params, prefix))


@dataclass(frozen=True)
class MHSPConfig:
    windows: tuple = (16,)
    stride: int | None = None  # None -> half of each window
    d: int = 8
    d_h: int = 32
    L_max: int = 4
    eps: float = 1e-5

    def strides(self) -> list:
        return [self.stride if self.stride else default_stride(w) for w in self.windows]

    def validate(self, length: int | None = None):
        if self.L_max < 1:
            raise ConfigError(f"L_max must be >= 1, got {self.L_max}")
        if self.d < 1 or self.d_h < 1 or not self.windows:
            raise ConfigError(f"invalid MHSP config {self}")
        if length is not None:
            for w, s in zip(self.windows, self.strides()):
                patch_indices(length, w, s)


def init_params(cfg: MHSPConfig, n_classes: int, rng: np.random.Generator) -> dict:
    d, d_h = cfg.d, cfg.d_h
    params = {}
    params.update(init_gru("lle", d, d_h, rng))
    # closed-leaning update gate: the patch recurrence starts with long memory
    params["lle.bz"].data[:] = -2.0
    params["lle.gamma"] = Param(np.ones(d_h), "lle.gamma")
    params["lle.beta"] = Param(np.zeros(d_h), "lle.beta")
    params.update(init_gru("hle", d_h, d_h, rng))
    params["gate.W"] = Param(rng.normal(0, 0.1 / np.sqrt(d_h), (d, d_h)), "gate.W")
    params["gate.b"] = Param(np.full(d, 2.0), "gate.b")
    params["head.W"] = Param(rng.normal(0, 1.0 / np.sqrt(d_h), (n_classes, d_h)), "head.W")
    params["head.b"] = Param(np.zeros(n_classes), "head.b")
    return params


def encode_patches(z, cfg: MHSPConfig) -> list:
    """Patchify and pool z once per configured window -> list of (B, n_i, d)."""
    return [adaptive_pool(patchify(z, w, s), cfg.d) for w, s in zip(cfg.windows, cfg.strides())]


def run_cycles(z, cfg: MHSPConfig, params: dict,
               reliability_fn: Callable | None = None,
               halter: Callable | None = None,
               L_max: int | None = None) -> CycleTrace:
    """Unroll up to L_max reasoning cycles.

    reliability_fn(state, logits) -> (B,) scores, recorded per cycle when given.
    halter(trace, c) -> bool is consulted after each cycle c < L_max and may stop
    the loop.
    """
    z = nc.as_tensor(z)
    L_max = cfg.L_max if L_max is None else L_max
    if L_max < 1:
        raise ConfigError(f"L_max must be >= 1, got {L_max}")
    series = encode_patches(z, cfg)
    B = z.shape[0]
    h = nc.Tensor(np.zeros((B, cfg.d_h)))
    trace = CycleTrace()
    for c in range(1, L_max + 1):
        h_prev = None if c == 1 else h
        encoded = [lle_forward(top_down_gate(P, h_prev, params["gate.W"], params["gate.b"]),
                               params, cfg.eps) for P in series]
        h_lle = encoded[0] if len(encoded) == 1 else nc.mul(_sum(encoded), 1.0 / len(encoded))
        h = hle_forward(h_lle, h, params)
        logits = nc.linear(h, params["head.W"], params["head.b"])
        trace.outputs.append(CycleOutput(logits, h, c))
        if reliability_fn is not None:
            trace.reliabilities.append(reliability_fn(h, logits))
        if halter is not None and c < L_max and halter(trace, c):
            trace.halted_early = True
            break
    return trace


def _sum(ts: Sequence[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = nc.add(out, t)
    return out
