"""Per-cycle reliability scoring, weighted cycle aggregation, halting, and
search-derived reliability targets."""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .mhsp import CycleTrace
from .numcore import Param, Tensor


def init_params(state_dim: int, n_classes: int, rng: np.random.Generator) -> dict:
    return {
        "iue.W": Param(rng.normal(0, 0.1 / np.sqrt(state_dim + n_classes),
                                  (1, state_dim + n_classes)), "iue.W"),
        "iue.b": Param(np.zeros(1), "iue.b"),
    }


def reliability(g, logits, W, b) -> Tensor:
    """sigmoid(W [g; logits] + b) per sample -> (B,)."""
    g, logits = nc.as_tensor(g), nc.as_tensor(logits)
    W = nc.as_tensor(W)
    if W.shape[-1] != g.shape[-1] + logits.shape[-1]:
        raise nc.DimensionError(
            f"head expects input width {W.shape[-1]}, got {g.shape[-1]} + {logits.shape[-1]}")
    s = nc.linear(nc.concat([g, logits], axis=-1), W, b)
    return nc.reshape(nc.sigmoid(s), (g.shape[0],))


def attention_weights(trace: CycleTrace, tau_ens: float) -> Tensor:
    """(B, L') softmax over cycles of tau_ens * reliability."""
    r = nc.stack(trace.reliabilities, axis=1)
    return nc.softmax_temp(r, tau_ens, axis=-1)


def aggregate(trace: CycleTrace, tau_ens: float, return_weights: bool = False):
    """Reliability-weighted sum of the per-cycle logits -> (B, K)."""
    if trace.n_cycles < 1:
        raise ValueError("cannot aggregate an empty trace")
    alpha = attention_weights(trace, tau_ens)
    logits = nc.stack([o.logits for o in trace.outputs], axis=1)  # (B, L', K)
    B, L, _ = logits.shape
    final = nc.sum(nc.mul(logits, nc.reshape(alpha, (B, L, 1))), axis=1)
    return (final, alpha) if return_weights else final


def should_halt(r_batch, c: int, tau_stop: float) -> bool:
    """Halt after cycle c (c >= 2 only) when batch-mean reliability > tau_stop.

    The mean is compared exactly (rational arithmetic), so a batch whose true
    mean equals tau_stop never halts regardless of float rounding.
    """
    if c < 2:
        return False
    r = np.ravel(nc.as_tensor(r_batch).data)
    total = sum((Fraction(float(v)) for v in r), Fraction(0))
    return total > Fraction(float(tau_stop)) * len(r)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def rollout_return(trace: CycleTrace, labels, halt_depth: int, tau_ens: float = 4.0) -> float:
    """Batch-mean probability of the true class under aggregate(cycles 1..c)."""
    if not 1 <= halt_depth <= trace.n_cycles:
        raise ValueError(f"halt depth {halt_depth} outside [1, {trace.n_cycles}]")
    labels = np.asarray(labels)
    logits = np.stack([o.logits.data for o in trace.outputs[:halt_depth]], axis=1)
    r = np.stack([x.data for x in trace.reliabilities[:halt_depth]], axis=1)
    alpha = _softmax(tau_ens * r)
    final = (alpha[..., None] * logits).sum(axis=1)
    p = _softmax(final)
    return float(p[np.arange(len(labels)), labels].mean())


@dataclass
class MctsConfig:
    n_simulations: int = 8
    ucb_c: float = math.sqrt(2.0)
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_simulations < 1:
            raise ValueError("n_simulations must be >= 1")
        if self.ucb_c < 0:
            raise ValueError("ucb_c must be >= 0")


@dataclass
class _Node:
    depth: int
    terminal: bool = False
    visits: int = 0
    value_sum: float = 0.0
    children: dict = field(default_factory=dict)


def _actions(node: _Node, max_depth: int) -> tuple:
    return ("halt", "continue") if node.depth < max_depth else ("halt",)


def _ucb(parent: _Node, child: _Node, c: float) -> float:
    return child.value_sum / child.visits + c * math.sqrt(math.log(parent.visits) / child.visits)


def mcts_targets(trace: CycleTrace, labels, cfg: MctsConfig, tau_ens: float = 4.0) -> np.ndarray:
    """Per-depth reliability targets from a halt/continue search over cycles.

    A simulation that halts at depth c scores rollout_return(c).  The target
    for depth c is the mean score of the simulations whose path reached c;
    depths no simulation reached fall back to the return of halting there.
    """
    L = trace.n_cycles
    returns = np.array([rollout_return(trace, labels, c, tau_ens) for c in range(1, L + 1)])
    rng = np.random.default_rng(cfg.rng_seed)
    root = _Node(depth=1)
    sums = np.zeros(L)
    counts = np.zeros(L)
    for _ in range(cfg.n_simulations):
        node, path = root, [root]
        while True:
            actions = _actions(node, L)
            untried = [a for a in actions if a not in node.children]
            if untried:
                a = untried[rng.integers(len(untried))]
                child = _Node(node.depth, terminal=True) if a == "halt" else _Node(node.depth + 1)
                node.children[a] = child
                path.append(child)
                break
            best = max(actions, key=lambda a: _ucb(node, node.children[a], cfg.ucb_c))
            node = node.children[best]
            path.append(node)
            if node.terminal:
                break
        leaf = path[-1]
        depth = leaf.depth
        if not leaf.terminal:
            while depth < L and rng.random() < 0.5:
                depth += 1
        R = returns[depth - 1]
        for n in path:
            n.visits += 1
            n.value_sum += R
        sums[:depth] += R
        counts[:depth] += 1
    return np.where(counts > 0, sums / np.maximum(counts, 1), returns)
