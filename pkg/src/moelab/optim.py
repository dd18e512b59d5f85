"""Learning-rate schedules and optimizers over name->array parameter dicts."""

from __future__ import annotations

import math

import numpy as np

from .model import is_expert_param


def lr_at(tokens_seen: float, shape: str, peak_lr: float, min_lr: float, total_tokens: float,
          warmup_tokens: float = 0) -> float:
    if tokens_seen < warmup_tokens:
        return peak_lr * tokens_seen / warmup_tokens
    if shape == "constant":
        return peak_lr
    span = total_tokens - warmup_tokens
    progress = 1.0 if span <= 0 else min(1.0, (tokens_seen - warmup_tokens) / span)
    if shape == "cosine":
        return min_lr + (peak_lr - min_lr) * (1.0 + math.cos(math.pi * progress)) / 2.0
    if shape == "linear":
        return peak_lr + (min_lr - peak_lr) * progress
    raise ValueError(f"unknown schedule shape {shape!r}")


def cosine_lr(tokens_seen: float, sched, total_tokens: float | None = None) -> float:
    """Linear warmup, then cosine decay from peak to min; flat at min afterwards."""
    total = total_tokens if total_tokens is not None else sched.total_tokens
    return lr_at(tokens_seen, "cosine", sched.peak_lr, sched.min_lr, total, sched.warmup_tokens)


def schedule_lr(tokens_seen: float, sched, total_tokens: float) -> float:
    return lr_at(tokens_seen, sched.shape, sched.peak_lr, sched.min_lr, total_tokens, sched.warmup_tokens)


def group_scale(name: str, per_group_scale) -> float:
    return per_group_scale.expert if is_expert_param(name) else per_group_scale.non_expert


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to global norm ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= scale
    return norm


class SGD:
    def __init__(self, weight_decay: float = 0.0):
        self.weight_decay = weight_decay

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float, scales: dict[str, float]):
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            eta = lr * scales.get(name, 1.0)
            if self.weight_decay and p.ndim >= 2:
                p -= eta * self.weight_decay * p
            p -= eta * g

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state, step: int = 0):
        pass


class AdamW:
    """Adam with decoupled weight decay on matrices (ndim >= 2)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8, weight_decay: float = 0.1):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float, scales: dict[str, float]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            eta = lr * scales.get(name, 1.0)
            if self.weight_decay and p.ndim >= 2:
                p -= (eta * self.weight_decay) * p
            p -= eta * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.m):
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], step: int = 0):
        self.m = {k[len("adam.m."):]: v.copy() for k, v in state.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v.copy() for k, v in state.items() if k.startswith("adam.v.")}
        self.t = step


def make_optimizer(cfg):
    if cfg.kind == "sgd":
        return SGD(cfg.weight_decay)
    return AdamW(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
