"""Label-smoothed cross-entropy, AdamW, the warmup + cosine-restart
learning-rate schedule, and the epoch training loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import tensor as tt
from .model import ModelConfig, ModelParams, decode_step, encode
from .tensor import Tensor, backward


class NonFiniteGradientError(RuntimeError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


# -- loss ---------------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 0.1
    num_classes: int = 7000
    pad_id: int = 1

    def validate(self) -> "LossConfig":
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.num_classes <= 1:
            raise ValueError(f"num_classes must exceed 1, got {self.num_classes}")
        return self


def smoothed_ce(logprobs: Tensor, targets: np.ndarray, cfg: LossConfig):
    """Mean over non-pad tokens of the smoothed negative log-likelihood.

    Per token: (1-eps) * -logp[target] + (eps/N) * sum_j -logp[j], i.e.
    cross-entropy against the (1-eps) one-hot / eps uniform mixture. Tokens
    whose target is the pad id contribute exactly zero. Returns the scalar
    loss tensor and the token count.
    """
    cfg.validate()
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logprobs.shape[:-1]:
        raise tt.ShapeMismatchError(
            f"targets {targets.shape} must match logprob positions {logprobs.shape[:-1]}"
        )
    n = logprobs.shape[-1]
    if targets.size and targets.max() >= n:
        raise IndexError(f"target id {targets.max()} out of range for {n} classes")

    mask = (targets != cfg.pad_id).astype(logprobs.dtype)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("batch contains only pad targets")

    safe = np.where(targets == cfg.pad_id, 0, targets)
    nll = tt.neg(tt.gather_last(logprobs, safe))
    uniform = tt.neg(tt.mean(logprobs, axis=-1))
    per_token = tt.add(
        tt.mul(nll, Tensor(np.asarray(1.0 - cfg.epsilon, dtype=logprobs.dtype))),
        tt.mul(uniform, Tensor(np.asarray(cfg.epsilon * n / cfg.num_classes, dtype=logprobs.dtype))),
    )
    masked = tt.mul(per_token, Tensor(mask))
    loss = tt.div(tt.sum_(masked), Tensor(np.asarray(count, dtype=logprobs.dtype)))
    return loss, count


# -- optimizer ------------------------------------------------------------------


@dataclass
class OptimState:
    """Adam moments plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


class AdamW:
    """AdamW with decoupled weight decay.

    theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * weight_decay * theta
    with bias-corrected moments. Gradients must be populated on the tensors;
    non-finite gradients abort the step.
    """

    def __init__(self, params: ModelParams, lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-8,
                 weight_decay: float = 0.1, grad_clip: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.state = OptimState(
            m={n: np.zeros_like(t.data) for n, t in params.named()},
            v={n: np.zeros_like(t.data) for n, t in params.named()},
        )

    def step(self, lr_now: Optional[float] = None) -> None:
        lr = self.lr if lr_now is None else lr_now
        for name, tensor in self.params.named():
            g = tensor.grad
            if g is None:
                g = np.zeros_like(tensor.data)
            if g.shape != tensor.data.shape:
                raise tt.ShapeMismatchError(f"{name}: grad {g.shape} vs param {tensor.data.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient in {name}")
            if self.grad_clip > 0.0:
                norm = float(np.linalg.norm(g))
                if norm > self.grad_clip:
                    g = g * (self.grad_clip / norm)
            self.state.m[name] = self.beta1 * self.state.m[name] + (1 - self.beta1) * g
            self.state.v[name] = self.beta2 * self.state.v[name] + (1 - self.beta2) * (g * g)
        self.state.t += 1
        c1 = 1.0 - self.beta1**self.state.t
        c2 = 1.0 - self.beta2**self.state.t
        for name, tensor in self.params.named():
            mhat = self.state.m[name] / c1
            vhat = self.state.v[name] / c2
            update = lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update = update + lr * self.weight_decay * tensor.data
            tensor.data = (tensor.data - update).astype(tensor.data.dtype)

    def zero_grad(self) -> None:
        self.params.zero_grad()

    # optimizer moments ride along in checkpoints as extra tensors
    def export_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.state.m:
            out[f"optim.{name}.m"] = self.state.m[name]
            out[f"optim.{name}.v"] = self.state.v[name]
        return out

    def import_tensors(self, extra: dict[str, np.ndarray], t: int) -> None:
        for name in self.state.m:
            self.state.m[name] = extra[f"optim.{name}.m"].astype(self.state.m[name].dtype)
            self.state.v[name] = extra[f"optim.{name}.v"].astype(self.state.v[name].dtype)
        self.state.t = t


# -- learning-rate schedule -----------------------------------------------------


@dataclass(frozen=True)
class ScheduleConfig:
    lr_max: float = 1e-3
    lr_min: float = 1e-7
    warmup_steps: int = 2000
    period: int = 17000
    warmup_init_lr: float = 1e-7
    kind: str = "cosine"  # cosine | inv_sqrt

    def validate(self) -> "ScheduleConfig":
        if self.lr_min >= self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        if self.warmup_steps < 0 or self.period <= 0:
            raise ValueError("warmup_steps must be >= 0 and period > 0")
        if self.kind not in ("cosine", "inv_sqrt"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        return self


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Pure function of the step counter.

    Linear warmup to lr_max, then either cosine decay to lr_min restarting
    every ``period`` steps, or inverse-sqrt decay. Period starts return
    lr_max exactly.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step < cfg.warmup_steps:
        frac = step / cfg.warmup_steps
        return cfg.warmup_init_lr + (cfg.lr_max - cfg.warmup_init_lr) * frac
    if cfg.kind == "inv_sqrt":
        if step == 0:
            return cfg.lr_max
        return cfg.lr_max * math.sqrt(max(cfg.warmup_steps, 1) / step)
    u = (step - cfg.warmup_steps) % cfg.period
    if u == 0:
        return cfg.lr_max
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * u / cfg.period))


# -- training loop ----------------------------------------------------------------


@dataclass
class EpochStats:
    mean_loss: float
    steps: int
    lr_trace: list[float] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)
    tokens: int = 0


def dropout_rng(seed: int, global_step: int) -> np.random.Generator:
    """Per-step generator; derivation from (seed, step) keeps resumed runs
    on the exact same random stream."""
    return np.random.default_rng(np.random.SeedSequence([seed, 0x5EED, global_step]))


def train_epoch(params: ModelParams, config: ModelConfig, batches: Iterable,
                loss_cfg: LossConfig, optimizer: AdamW, schedule: ScheduleConfig,
                seed: int, global_step: int, epoch: int, max_steps: Optional[int] = None,
                log_every: int = 50, log_fn: Optional[Callable[[str], None]] = None) -> tuple[EpochStats, int]:
    """One pass over ``batches``: forward, smoothed CE, backward, AdamW at
    lr_at(global_step), zero grads. Returns (stats, new global step)."""
    losses: list[float] = []
    trace: list[float] = []
    tokens = 0
    t0 = time.monotonic()
    tokens_window = 0

    for batch in batches:
        if max_steps is not None and global_step >= max_steps:
            break
        rng = dropout_rng(seed, global_step)
        feats = Tensor(batch.features)
        states, src_mask = encode(feats, batch.source_lengths, params, config, mode="train", rng=rng)
        logprobs = decode_step(batch.decoder_input, states, src_mask, params, config,
                               mode="train", rng=rng)
        loss, count = smoothed_ce(logprobs, batch.target_output, loss_cfg)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise NonFiniteLossError(f"non-finite loss at step {global_step} (batch {batch.ids[:3]}...)")
        backward(loss)
        lr = lr_at(global_step, schedule)
        optimizer.step(lr_now=lr)
        optimizer.zero_grad()

        losses.append(loss_val)
        trace.append(lr)
        tokens += count
        tokens_window += count
        global_step += 1
        if log_fn is not None and global_step % log_every == 0:
            dt = max(time.monotonic() - t0, 1e-9)
            log_fn(f"{global_step}\t{epoch}\t{loss_val:.6f}\t{lr:.8g}\t{tokens_window / dt:.1f}")
            t0 = time.monotonic()
            tokens_window = 0

    stats = EpochStats(
        mean_loss=float(np.mean(losses)) if losses else float("nan"),
        steps=len(losses),
        lr_trace=trace,
        loss_trace=losses,
        tokens=tokens,
    )
    return stats, global_step
