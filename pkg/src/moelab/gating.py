"""Router: gate logits, optional logit normalization, and top-k selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError, ParameterError
from .numerics import Tensor


@dataclass
class GateParams:
    W: Tensor  # [d, n]
    b: Tensor  # [n]
    normalize: bool = False
    lam: float = 1.0
    epsilon_sigma: float = 1e-6
    # when False, mean and std are treated as constants in backward
    grad_through_stats: bool = True

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise DimensionError(f"gate W {self.W.shape} and b {self.b.shape} disagree")
        if self.W.shape[1] < 2:
            raise ParameterError(f"a router needs at least 2 experts, got {self.W.shape[1]}")
        if self.lam <= 0:
            raise ParameterError(f"lambda must be positive, got {self.lam}")
        if self.epsilon_sigma <= 0:
            raise ParameterError(f"epsilon_sigma must be positive, got {self.epsilon_sigma}")

    @property
    def n_experts(self) -> int:
        return self.W.shape[1]


@dataclass
class GateDecision:
    """Routing for one batch of T tokens.

    ``combine_weights`` stays in the graph so the layer output is
    differentiable with respect to the gate probabilities.
    """

    probs: Tensor  # [T, n]
    selected: np.ndarray  # [T, k] expert ids, descending probability
    combine_weights: Tensor  # [T, k], rows sum to 1
    k: int

    @property
    def n_tokens(self) -> int:
        return self.probs.shape[0]

    @property
    def n_experts(self) -> int:
        return self.probs.shape[1]


def gate_logits(x: Tensor, params: GateParams) -> Tensor:
    if x.ndim != 2 or x.shape[1] != params.W.shape[0]:
        raise DimensionError(f"gate input {x.shape} does not match W {params.W.shape}")
    return nx.matmul(x, params.W) + params.b


def normalize_logits(z: Tensor, lam: float = 1.0, epsilon_sigma: float = 1e-6,
                     grad_through_stats: bool = True) -> Tensor:
    """Standardize each row of ``z`` to zero mean and scale it to std ``lam``.

    Uses the population standard deviation; ``epsilon_sigma`` is added to the
    std so constant rows map to zeros without a branch.
    """
    if z.shape[-1] < 2:
        raise ParameterError("logit normalization needs at least 2 experts")
    if grad_through_stats:
        mu = nx.mean(z, axis=-1, keepdims=True)
        centered = z - mu
        sigma = nx.sqrt(nx.mean(centered * centered, axis=-1, keepdims=True))
        return centered * (lam / (sigma + epsilon_sigma))
    mu = z.data.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(((z.data - mu) ** 2).mean(axis=-1, keepdims=True))
    return (z - mu) * (lam / (sigma + epsilon_sigma))


def gate_probabilities(x: Tensor, params: GateParams) -> Tensor:
    z = gate_logits(x, params)
    if params.normalize:
        z = normalize_logits(z, params.lam, params.epsilon_sigma, params.grad_through_stats)
    return nx.softmax(z, axis=-1)


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated values puts lower indices first among ties
    return np.argsort(-probs, axis=-1, kind="stable")[:, :k]


def top_k_select(probs: Tensor, k: int = 2) -> GateDecision:
    n = probs.shape[-1]
    if not 1 <= k <= n:
        raise ParameterError(f"top-k needs 1 <= k <= n, got k={k}, n={n}")
    selected = top_k_indices(probs.data, k)
    rows = np.repeat(np.arange(probs.shape[0]), k)
    picked = nx.getitem(probs, (rows, selected.reshape(-1))).reshape(probs.shape[0], k)
    s = nx.tsum(picked, axis=1, keepdims=True)
    return GateDecision(probs=probs, selected=selected, combine_weights=picked / s, k=k)


def route(x: Tensor, params: GateParams, k: int = 2) -> GateDecision:
    return top_k_select(gate_probabilities(x, params), k)


def gate_statistics(probs) -> dict:
    """Sharpness diagnostics of a batch of gate distributions.

    Returns the token-averaged ratios of the largest to second-largest and
    second- to third-largest probability, the mean entropy (nats) and the mean
    top-1 probability. ``max2_over_max3`` is ``None`` when n < 3.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    p = p.astype(np.float64)
    n = p.shape[-1]
    ordered = -np.sort(-p, axis=-1)
    tiny = np.finfo(np.float64).tiny
    max1_over_max2 = float(np.mean(ordered[:, 0] / np.maximum(ordered[:, 1], tiny)))
    max2_over_max3 = None
    if n >= 3:
        max2_over_max3 = float(np.mean(ordered[:, 1] / np.maximum(ordered[:, 2], tiny)))
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return {
        "max1_over_max2": max1_over_max2,
        "max2_over_max3": max2_over_max3,
        "mean_entropy": float(np.mean(-plogp.sum(axis=-1))),
        "mean_top1": float(np.mean(ordered[:, 0])),
    }
