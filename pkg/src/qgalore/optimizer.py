"""Low-rank Adam with 8-bit moments and the fused per-layer Q-GaLore step."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .quant import (
    QuantizedTensor,
    QuantSpec,
    Rounding,
    apply_update,
    dequantize,
    quantize,
)
from .subspace import ProjectionState

__all__ = [
    "AdamConfig",
    "AdamState",
    "LowRankAdamState",
    "OptimizerError",
    "adam_step",
    "adam_step_lowrank",
    "layer_step",
    "full_rank_step",
    "dense_param_step",
    "lr_schedule",
]


class OptimizerError(ValueError):
    pass


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    alpha: float = 0.25
    warmup_frac: float = 0.1
    min_lr_ratio: float = 0.1

    def __post_init__(self):
        if not self.lr > 0:
            raise OptimizerError(f"lr must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise OptimizerError("betas must lie in (0, 1)")
        if not self.eps > 0:
            raise OptimizerError("eps must be positive")
        if self.weight_decay < 0:
            raise OptimizerError("weight_decay must be non-negative")
        if not 0 <= self.warmup_frac <= 1 or not 0 <= self.min_lr_ratio <= 1:
            raise OptimizerError("warmup_frac and min_lr_ratio must lie in [0, 1]")


@dataclass(eq=False)
class AdamState:
    """Adam moments stored block-quantized (``bits=None`` keeps float32)."""

    bits: int | None = 8
    block_size: int = 256
    m_q: QuantizedTensor | None = None
    v_q: QuantizedTensor | None = None
    step_count: int = 0

    @property
    def spec(self) -> QuantSpec:
        return QuantSpec(bits=self.bits, block_size=self.block_size)

    def reset(self) -> None:
        self.m_q = self.v_q = None
        self.step_count = 0


LowRankAdamState = AdamState


def adam_step(state: AdamState, R, cfg: AdamConfig) -> np.ndarray:
    """One Adam moment update; returns the normalized direction m_hat / (sqrt(v_hat) + eps)."""
    R = np.asarray(R, dtype=np.float64)
    if state.m_q is None:
        m = np.zeros_like(R)
        v = np.zeros_like(R)
    else:
        if state.m_q.shape != R.shape:
            raise OptimizerError(f"gradient shape {R.shape} does not match state {state.m_q.shape}")
        m = dequantize(state.m_q).astype(np.float64)
        # affine grids can dip just below zero
        v = np.maximum(dequantize(state.v_q).astype(np.float64), 0.0)
        # a v entry that fell below half a grid step reads back as 0; keeping its
        # m would give N = m / eps, so both restart from zero together
        m[v == 0.0] = 0.0

    m = cfg.beta1 * m + (1.0 - cfg.beta1) * R
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * R * R
    t = state.step_count + 1
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    N = m_hat / (np.sqrt(v_hat) + cfg.eps)

    state.m_q = quantize(m, state.spec)
    state.v_q = quantize(v, state.spec)
    state.step_count = t
    return N.astype(np.float32)


adam_step_lowrank = adam_step


def _assign(dst: QuantizedTensor, src: QuantizedTensor) -> None:
    dst.payload, dst.scales, dst.zeros, dst.spec = src.payload, src.scales, src.zeros, src.spec


def layer_step(
    weights: QuantizedTensor,
    G,
    proj: ProjectionState,
    adam: AdamState,
    cfg: AdamConfig,
    step: int,
    rng: np.random.Generator | None,
    lr: float | None = None,
    rounding: Rounding | str = Rounding.STOCHASTIC,
    reset_moments_on_update: bool = False,
) -> None:
    """Fused update of one matrix layer from its gradient ``G``.

    Order: refresh projection if due, project, Adam in the subspace,
    back-project scaled by alpha, add decoupled decay, requantize the weights.
    Nothing here keeps a reference to ``G``. On error the weights and the
    Adam state are left as they were.
    """
    lr = cfg.lr if lr is None else lr
    G = np.asarray(G, dtype=np.float32)
    if G.shape != weights.shape:
        raise OptimizerError(f"gradient shape {G.shape} does not match weights {weights.shape}")

    if np.any(G):
        updated = proj.maybe_update(G, step)
        if updated and reset_moments_on_update:
            adam.reset()
        R = proj.project(G)
    elif proj.initialized:
        # an all-zero gradient has no subspace; keep the current one
        R = np.zeros(proj.projected_shape(G.shape), np.float32)
    else:
        R = None
    del G

    trial = AdamState(adam.bits, adam.block_size, adam.m_q, adam.v_q, adam.step_count)
    W = dequantize(weights).astype(np.float64)
    if R is None:
        # no projection yet and nothing to learn from: moments stay at zero, N = 0
        delta = np.zeros_like(W)
    else:
        N = adam_step(trial, R, cfg)
        delta = -lr * cfg.alpha * proj.project_back(N).astype(np.float64)
    if cfg.weight_decay:
        delta -= lr * cfg.weight_decay * W
    new_weights = apply_update(weights, delta, rng, rounding)

    adam.m_q, adam.v_q, adam.step_count = trial.m_q, trial.v_q, trial.step_count
    _assign(weights, new_weights)


def full_rank_step(
    weights: QuantizedTensor,
    G,
    adam: AdamState,
    cfg: AdamConfig,
    rng: np.random.Generator | None,
    lr: float | None = None,
    rounding: Rounding | str = Rounding.NEAREST,
) -> None:
    """Plain (optionally 8-bit) Adam on a whole weight matrix, no projection."""
    lr = cfg.lr if lr is None else lr
    G = np.asarray(G, dtype=np.float32)
    if G.shape != weights.shape:
        raise OptimizerError(f"gradient shape {G.shape} does not match weights {weights.shape}")
    trial = AdamState(adam.bits, adam.block_size, adam.m_q, adam.v_q, adam.step_count)
    N = adam_step(trial, G, cfg).astype(np.float64)
    delta = -lr * N
    if cfg.weight_decay:
        delta -= lr * cfg.weight_decay * dequantize(weights).astype(np.float64)
    new_weights = apply_update(weights, delta, rng, rounding)
    adam.m_q, adam.v_q, adam.step_count = trial.m_q, trial.v_q, trial.step_count
    _assign(weights, new_weights)


def dense_param_step(param: np.ndarray, grad, adam: AdamState, cfg: AdamConfig, lr: float | None = None) -> None:
    """In-place Adam for float parameters (biases, embeddings)."""
    lr = cfg.lr if lr is None else lr
    N = adam_step(adam, grad, cfg)
    param -= (lr * N.astype(np.float64)).astype(param.dtype)


def lr_schedule(step: int, total_steps: int, cfg: AdamConfig) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay to ``min_lr_ratio * lr``."""
    if step < 0 or step > total_steps:
        raise OptimizerError(f"step {step} outside [0, {total_steps}]")
    warmup = int(round(cfg.warmup_frac * total_steps))
    if step < warmup:
        return cfg.lr * step / warmup
    min_lr = cfg.min_lr_ratio * cfg.lr
    span = total_steps - warmup
    if span <= 0 or step == warmup:
        return cfg.lr
    if step == total_steps:
        return min_lr
    progress = (step - warmup) / span
    return min_lr + 0.5 * (cfg.lr - min_lr) * (1.0 + math.cos(math.pi * progress))
