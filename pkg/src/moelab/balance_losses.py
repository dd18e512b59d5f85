"""Load-balance losses and total-loss assembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ParameterError
from .numerics import Tensor


@dataclass
class LoadStats:
    """Realized and gate-implied expert load for one batch.

    ``p`` follows the convention where balanced routing gives ``p_j = k/n``
    (so ``sum(p) == k``): assignments to expert j divided by T.
    """

    p: np.ndarray
    gate_means: np.ndarray
    k: int

    @classmethod
    def from_routing(cls, counts: np.ndarray, probs, k: int) -> "LoadStats":
        g = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
        T = g.shape[0]
        return cls(p=np.asarray(counts, dtype=np.float64) / T,
                   gate_means=g.astype(np.float64).mean(axis=0), k=k)

    @property
    def naive_loss(self) -> float:
        return aux_loss_naive(self.p, self.k, len(self.p))

    @property
    def surrogate_loss(self) -> float:
        n = len(self.gate_means)
        return float(np.sum((1.0 / n - self.gate_means) ** 2))


def aux_loss_naive(p, k: int, n: int) -> float:
    """Squared distance of realized load ``p`` from the balanced value k/n.

    Not differentiable; kept as a reference for the surrogate.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (n,):
        raise ParameterError(f"expected {n} load proportions, got shape {p.shape}")
    if np.any(p < 0):
        raise ParameterError("load proportions must be non-negative")
    return float(np.sum((k / n - p) ** 2))


def aux_loss_surrogate(gate_probs: Tensor) -> Tensor:
    n = gate_probs.shape[-1]
    col_means = nx.mean(gate_probs, axis=0)
    diff = col_means - (1.0 / n)
    return nx.tsum(diff * diff)


def total_loss(ce: Tensor, aux_per_layer: Sequence[Tensor], alpha_per_layer: Sequence[float],
               ce_weight: float = 1.0) -> Tensor:
    """ce + sum_l alpha_l * aux_l, coefficients held constant.

    ``ce_weight`` exists for loss-term isolation experiments; leave it at 1.
    """
    if len(aux_per_layer) != len(alpha_per_layer):
        raise ParameterError(
            f"{len(aux_per_layer)} auxiliary losses but {len(alpha_per_layer)} coefficients")
    out = ce if ce_weight == 1.0 else ce * ce_weight
    for aux, alpha in zip(aux_per_layer, alpha_per_layer):
        out = out + aux * float(alpha)
    return out
