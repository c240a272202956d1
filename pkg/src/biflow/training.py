"""Multi-level supervised training with Adam."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numeric as nm
from .geometry import FramePair
from .model import BiPointFlowNet, Hierarchy, build_hierarchy, forward_trace

log = logging.getLogger(__name__)

PUBLISHED_ALPHA = (0.16, 0.08, 0.04, 0.02)


@dataclass(frozen=True)
class LossWeights:
    """Per-level loss weights, finest level first."""

    alpha: tuple[float, ...] = PUBLISHED_ALPHA

    def __post_init__(self):
        if not self.alpha or any(a <= 0 for a in self.alpha):
            raise ValueError(f"LossWeights: weights must be positive, got {self.alpha}")

    @classmethod
    def for_levels(cls, levels: int) -> "LossWeights":
        """Halving weights starting at 0.16, matching the four published values."""
        return cls(tuple(0.16 * 0.5**i for i in range(levels)))


def level_ground_truth(gt: np.ndarray, level_indices: Sequence[np.ndarray | None]) -> list[np.ndarray]:
    """Gather full-resolution ground truth at each level's sample indices.

    ``None`` stands for the identity (full resolution).
    """
    gt = np.asarray(gt)
    out = []
    for lvl, idx in enumerate(level_indices):
        if idx is None:
            out.append(gt)
            continue
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= gt.shape[0]):
            raise IndexError(f"level {lvl}: sample index outside [0, {gt.shape[0]})")
        out.append(gt[idx])
    return out


def multi_level_loss(preds: Sequence, gts: Sequence[np.ndarray], weights: LossWeights):
    """Sum over levels of alpha_l times the summed per-point L2 error (finest first)."""
    if not (len(preds) == len(gts) == len(weights.alpha)):
        raise ValueError(
            f"multi_level_loss: {len(preds)} predictions, {len(gts)} targets, "
            f"{len(weights.alpha)} weights"
        )
    loss = None
    for lvl, (p, g, a) in enumerate(zip(preds, gts, weights.alpha)):
        if nm.value_of(p).shape != np.shape(g):
            raise ValueError(f"multi_level_loss: level {lvl} shape {nm.value_of(p).shape} vs {np.shape(g)}")
        term = nm.scale(nm.total(nm.row_norms(nm.sub(p, g))), a)
        loss = term if loss is None else nm.add(loss, term)
    return loss


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState,
    lr: float | None = None,
) -> tuple[dict[str, np.ndarray], OptimState]:
    """One bias-corrected Adam update; returns new parameter arrays and the mutated state."""
    state.step += 1
    t = state.step
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t if b1 > 0 else 1.0
    bc2 = 1.0 - b2**t if b2 > 0 else 1.0
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient {g.shape} vs parameter {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        out[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out, state


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings and step schedule.

    The defaults are the desk schedule used for the synthetic benchmark: a
    larger starting rate than the published 1e-4, halved every few epochs.
    """

    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    halve_every: int | None = 4  # epochs; None keeps the rate fixed
    alpha: tuple[float, ...] | None = None  # defaults to LossWeights.for_levels(L)
    shuffle_seed: int | None = None

    def lr_at(self, epoch: int) -> float:
        if not self.halve_every:
            return self.lr
        return self.lr * 0.5 ** (epoch // self.halve_every)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass
class _Item:
    pair: FramePair
    gt: np.ndarray
    hier: tuple[Hierarchy, Hierarchy]


def loss_and_grads(net: BiPointFlowNet, pair: FramePair, gt: np.ndarray, weights: LossWeights,
                   hierarchies=None) -> tuple[float, dict[str, np.ndarray]]:
    tape = nm.Tape()
    handles = {name: tape.variable(v) for name, v in net.params.items()}
    loss = network_loss(net, pair, gt, weights, handles, hierarchies)
    grads = nm.backward(tape, loss)
    return float(loss.value), {name: grads.of(h) for name, h in handles.items()}


def network_loss(net, pair, gt, weights, params=None, hierarchies=None):
    trace = forward_trace(net, pair, params, hierarchies)
    preds = [f for _, f in reversed(trace.flows)]  # finest first
    idx = [None] + list(trace.source_index[1 : len(preds)])
    return multi_level_loss(preds, level_ground_truth(gt, idx), weights)


def train(
    net: BiPointFlowNet,
    data: Iterable[tuple[FramePair, np.ndarray]],
    epochs: int,
    config: TrainConfig = TrainConfig(),
) -> tuple[BiPointFlowNet, list[float]]:
    """Plain per-pair loop: forward, loss, backward, Adam. Returns a trained copy and the loss history."""
    cfg = net.config
    weights = LossWeights(config.alpha) if config.alpha else LossWeights.for_levels(cfg.levels)
    items = [
        _Item(pair, np.asarray(gt, dtype=np.float64),
              (build_hierarchy(pair.source.coords, cfg), build_hierarchy(pair.target.coords, cfg)))
        for pair, gt in data
    ]
    net = net.copy()
    state = OptimState(config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.shuffle_seed) if config.shuffle_seed is not None else None
    history: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(len(items)) if rng is not None else range(len(items))
        lr = config.lr_at(epoch)
        for i in order:
            it = items[i]
            loss, grads = loss_and_grads(net, it.pair, it.gt, weights, it.hier)
            step = len(history)
            if not math.isfinite(loss):
                raise TrainingDiverged(step, loss)
            history.append(loss)
            net.params, state = adam_step(net.params, grads, state, lr)
        log.debug("epoch %d lr %.3g last loss %.6g", epoch, lr, history[-1] if history else float("nan"))
    return net, history


def write_loss_csv(history: Sequence[float], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, f"{v:.17g}"])
