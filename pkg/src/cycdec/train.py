"""Composite objective, Adam, best-validation training loop, checkpoint files."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import config as config_mod
from . import iue
from . import numcore as nc
from .data import DataError
from .mhsp import CycleTrace
from .model import Decoder, DecoderConfig

log = logging.getLogger(__name__)


class ContractError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


# ----------------------------------------------------------------- objective

@dataclass(frozen=True)
class LossWeights:
    lambda_halt: float = 0.05
    lambda_iue: float = 0.5
    iue_enabled: bool = True

    def __post_init__(self):
        if self.lambda_halt < 0 or self.lambda_iue < 0:
            raise ValueError("loss weights must be non-negative")


def halting_regularizer(alpha) -> nc.Tensor:
    """Batch mean of sum_c alpha_c * (c - 1) / (L' - 1); zero when L' == 1."""
    alpha = nc.as_tensor(alpha)
    B, L = alpha.shape
    if L == 1:
        return nc.Tensor(0.0)
    cost = np.arange(L) / (L - 1)
    return nc.mean(nc.sum(nc.mul(alpha, cost), axis=1))


def iue_supervision_loss(r, targets, kind: str = "bce") -> nc.Tensor:
    """Match reliabilities to soft targets on every cycle but the last.

    r is (L',) or (B, L'); targets is (L',) and broadcasts over the batch.
    """
    r = nc.as_tensor(r)
    targets = np.asarray(targets, dtype=np.float64)
    L = r.shape[-1]
    if targets.shape != (L,):
        raise ContractError(f"targets shape {targets.shape} does not match {L} cycles")
    if L == 1:
        return nc.Tensor(0.0)
    head = nc.getitem(r, (Ellipsis, slice(0, L - 1)))
    if kind == "bce":
        return nc.binary_cross_entropy(head, targets[:L - 1])
    if kind == "mse":
        return nc.mean(nc.square(nc.sub(head, targets[:L - 1])))
    raise ValueError(f"unknown supervision loss {kind!r}")


def total_loss(trace: CycleTrace, labels, targets, lw: LossWeights,
               tau_ens: float = 4.0, iue_kind: str = "bce") -> nc.Tensor:
    """Cross-entropy on the training logit, plus halting and reliability terms
    when the reliability head is enabled."""
    if not lw.iue_enabled:
        return nc.cross_entropy(trace.outputs[-1].logits, labels)
    if targets is None:
        raise ContractError("reliability head enabled but no search targets were given")
    final, alpha = iue.aggregate(trace, tau_ens, return_weights=True)
    loss = nc.cross_entropy(final, labels)
    if lw.lambda_halt:
        loss = nc.add(loss, nc.mul(halting_regularizer(alpha), lw.lambda_halt))
    if lw.lambda_iue:
        r = nc.stack(trace.reliabilities, axis=1)
        loss = nc.add(loss, nc.mul(iue_supervision_loss(r, targets, iue_kind), lw.lambda_iue))
    return loss


# ----------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params, grads, state: AdamState, lr: float = 1e-3,
                   betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Bias-corrected adaptive-moment update, applied to params in place."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g in zip(params, grads):
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        optimizer_step(self.params, [p.grad for p in self.params], self.state,
                       self.lr, self.betas, self.eps)


# ----------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"CYC1"
CHECKPOINT_VERSION = 1
_MOD = 1 << 64


@dataclass
class Checkpoint:
    params: dict
    config: DecoderConfig
    epoch: int = 0
    val_accuracy: float = float("nan")
    format_version: int = CHECKPOINT_VERSION

    def build(self) -> Decoder:
        model = Decoder(self.config)
        model.load_state_dict(self.params)
        return model


def _snapshot(ckpt: Checkpoint) -> bytes:
    text = config_mod.dumps(ckpt.config)
    text += f"checkpoint_epoch = {ckpt.epoch}\n"
    text += f"checkpoint_val_accuracy = {ckpt.val_accuracy!r}\n"
    return text.encode("utf-8")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """CYC1 layout, little-endian:

    magic | u32 version | u32 snapshot length | snapshot (key=value UTF-8)
    | u32 tensor count | per tensor: u32 name length, name, u32 rank,
    u32 extents..., f64 values | u64 checksum (byte sum of everything before
    it, mod 2**64).
    """
    snap = _snapshot(ckpt)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", ckpt.format_version, len(snap)), snap,
             struct.pack("<I", len(ckpt.params))]
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<Q", _byte_sum(body))


def _byte_sum(buf: bytes) -> int:
    return int(np.frombuffer(buf, dtype=np.uint8).sum(dtype=np.uint64)) % _MOD


def save_checkpoint(path, ckpt: Checkpoint):
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 16 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic at offset 0 (expected CYC1)")
    body, (stored,) = buf[:-8], struct.unpack("<Q", buf[-8:])
    if _byte_sum(body) != stored:
        raise CheckpointFormatError(f"checksum mismatch at offset {len(buf) - 8}")
    pos = 4

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise CheckpointFormatError(f"truncated checkpoint at offset {pos}")
        out = struct.unpack_from(fmt, body, pos)
        pos += size
        return out

    def read_bytes(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointFormatError(f"truncated checkpoint at offset {pos}")
        out = body[pos:pos + n]
        pos += n
        return out

    version, snap_len = read("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} at offset 4")
    mapping = config_mod.parse_kv(read_bytes(snap_len).decode("utf-8"))
    epoch = int(mapping.pop("checkpoint_epoch", 0))
    val_acc = float(mapping.pop("checkpoint_val_accuracy", "nan"))
    cfg = config_mod.from_mapping(DecoderConfig, mapping)
    (count,) = read("<I")
    params = {}
    for _ in range(count):
        (n,) = read("<I")
        name = read_bytes(n).decode("utf-8")
        (rank,) = read("<I")
        shape = read(f"<{rank}I")
        size = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(read_bytes(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(body):
        raise CheckpointFormatError(f"trailing bytes at offset {pos}")
    return Checkpoint(params, cfg, epoch, val_acc, version)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# ----------------------------------------------------------------- training loop

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    n_simulations: int = 8
    ucb_c: float = float(np.sqrt(2.0))
    seed: int = 0
    iue_kind: str = "bce"


def accuracy(model: Decoder, X, y) -> float:
    return float((model.predict(X) == np.asarray(y)).mean())


def train_step(model: Decoder, opt: Adam, xb, yb, lw: LossWeights, tcfg: TrainConfig,
               step: int) -> float:
    opt.zero_grad()
    trace = model.forward(xb, halting=True)
    targets = None
    if lw.iue_enabled:
        seed = int(np.random.SeedSequence([tcfg.seed, step]).generate_state(1, np.uint64)[0])
        mcfg = iue.MctsConfig(tcfg.n_simulations, tcfg.ucb_c, rng_seed=seed)
        targets = iue.mcts_targets(trace, yb, mcfg, model.cfg.tau_ens)
    loss = total_loss(trace, yb, targets, lw, model.cfg.tau_ens, tcfg.iue_kind)
    loss.backward()
    opt.step()
    return loss.item()


def fit(model: Decoder, trainset, valset, epochs: int | None = None,
        lw: LossWeights | None = None, cfg: TrainConfig | None = None,
        evaluate: Callable | None = None, on_epoch: Callable | None = None) -> Checkpoint:
    """Train and return the checkpoint with the best validation accuracy.

    trainset / valset are (X, y) pairs.  The initial parameters count as epoch
    0; a later epoch replaces the incumbent only on strictly higher accuracy,
    so ties keep the earliest epoch.
    """
    cfg = cfg or TrainConfig()
    epochs = cfg.epochs if epochs is None else epochs
    lw = lw or LossWeights(iue_enabled=model.cfg.use_iue)
    if lw.iue_enabled and not model.cfg.use_iue:
        raise ContractError("loss expects a reliability head the model does not have")
    Xtr, ytr = trainset
    Xva, yva = valset
    if len(Xtr) == 0 or len(Xva) == 0:
        raise DataError("training and validation sets must be non-empty")
    ytr = np.asarray(ytr)
    evaluate = evaluate or (lambda m, ep: accuracy(m, Xva, yva))
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.lr, cfg.betas)

    best = Checkpoint(model.state_dict(), model.cfg, 0, evaluate(model, 0))
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(Xtr))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[i:i + cfg.batch_size])
            xb = np.asarray(Xtr[idx], dtype=np.float64)
            losses.append(train_step(model, opt, xb, ytr[idx], lw, cfg, step))
            step += 1
        acc = evaluate(model, epoch)
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, float(np.mean(losses)), acc)
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(losses)), acc)
        if acc > best.val_accuracy:
            best = Checkpoint(model.state_dict(), model.cfg, epoch, acc)
    return best
