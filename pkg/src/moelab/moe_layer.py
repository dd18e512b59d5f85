"""Capacity-limited dispatch and the weighted expert combine."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import DimensionError, ParameterError
from .gating import GateDecision
from .numerics import Tensor


@dataclass
class Expert:
    w_gate: Tensor  # [d, h]
    w_up: Tensor  # [d, h]
    w_down: Tensor  # [h, d]

    def __call__(self, x: Tensor) -> Tensor:
        return nx.swiglu_ffn(x, self.w_gate, self.w_up, self.w_down)


@dataclass
class ExpertBank:
    experts: list[Expert]

    def __post_init__(self):
        shapes = {(e.w_gate.shape, e.w_up.shape, e.w_down.shape) for e in self.experts}
        if len(shapes) != 1:
            raise DimensionError(f"experts in a bank must share shapes, got {sorted(shapes)}")

    def __len__(self):
        return len(self.experts)

    def __getitem__(self, i):
        return self.experts[i]

    @property
    def hidden_dim(self) -> int:
        return self.experts[0].w_gate.shape[0]


@dataclass(frozen=True)
class CapacityConfig:
    # None means unbounded capacity
    capacity_factor: float | None = 1.25

    def __post_init__(self):
        if self.capacity_factor is not None and not self.capacity_factor > 0:
            raise ParameterError(f"capacity_factor must be > 0, got {self.capacity_factor}")

    def capacity(self, n_tokens: int, k: int, n_experts: int) -> int:
        if self.capacity_factor is None or math.isinf(self.capacity_factor):
            return n_tokens * k
        return int(math.ceil(self.capacity_factor * n_tokens * k / n_experts))


@dataclass
class DispatchResult:
    routed: list[np.ndarray]  # per expert: int array of token indices, arrival order
    slots: list[np.ndarray]  # per expert: which of the token's k slots each entry came from
    dropped_mask: np.ndarray  # [T, k] bool
    capacity: int
    counts: np.ndarray = field(default=None)  # pre-drop assignments per expert

    @property
    def drop_rate(self) -> float:
        return float(self.dropped_mask.sum()) / self.dropped_mask.size if self.dropped_mask.size else 0.0

    def routed_with_weights(self, decision: GateDecision) -> list[list[tuple[int, float]]]:
        """Per expert, (token index, combine weight) pairs for kept assignments."""
        w = decision.combine_weights.data
        return [[(int(t), float(w[t, s])) for t, s in zip(toks, sl)]
                for toks, sl in zip(self.routed, self.slots)]


def dispatch(decision: GateDecision, cfg: CapacityConfig = CapacityConfig()) -> DispatchResult:
    """Assign (token, slot) pairs to experts, dropping overflow in token order.

    Assignments are visited token by token; within a token, slot 0 (the top
    expert) before slot 1. An expert that already holds ``capacity`` entries
    rejects the rest.
    """
    selected = decision.selected
    T, k = selected.shape
    n = decision.n_experts
    capacity = cfg.capacity(T, k, n)
    flat = selected.reshape(-1)  # token-major, slot-minor: arrival order
    order = np.argsort(flat, kind="stable")
    sorted_experts = flat[order]
    counts = np.bincount(flat, minlength=n)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    # rank of each assignment among those for the same expert
    rank_sorted = np.arange(flat.size) - starts[sorted_experts]
    rank = np.empty_like(rank_sorted)
    rank[order] = rank_sorted
    kept = rank < capacity
    dropped_mask = (~kept).reshape(T, k)

    routed, slots = [], []
    positions = np.arange(flat.size)
    for e in range(n):
        sel = order[starts[e]:starts[e] + counts[e]]
        sel = sel[kept[sel]]
        pos = positions[sel]
        routed.append(pos // k)
        slots.append(pos % k)
    return DispatchResult(routed=routed, slots=slots, dropped_mask=dropped_mask,
                          capacity=capacity, counts=counts)


def moe_forward(x: Tensor, bank: ExpertBank, decision: GateDecision,
                dispatch_result: DispatchResult) -> Tensor:
    """Weighted sum of kept expert outputs per token.

    Dropped assignments contribute nothing and the surviving weights are not
    renormalized. Expert contributions are summed in expert-index order.
    """
    T = decision.n_tokens
    if x.ndim != 2 or x.shape[0] != T:
        raise DimensionError(f"moe input {x.shape} does not match {T} routed tokens")
    if x.shape[1] != bank.hidden_dim:
        raise DimensionError(f"moe input width {x.shape[1]} does not match experts ({bank.hidden_dim})")
    if len(bank) != decision.n_experts:
        raise DimensionError(f"gate has {decision.n_experts} experts but the bank has {len(bank)}")
    k = decision.k
    flat_weights = decision.combine_weights.reshape(T * k)
    parts = []
    for e, (tokens, slots) in enumerate(zip(dispatch_result.routed, dispatch_result.slots)):
        if tokens.size == 0:
            continue
        # a token reaches a given expert at most once, so rows are unique
        h = bank[e](nx.take_rows(x, tokens, unique=True))
        w = nx.take_rows(flat_weights, tokens * k + slots, unique=True).reshape(-1, 1)
        parts.append(nx.index_add(T, tokens, h * w, unique=True))
    if not parts:
        return nx.Tensor(np.zeros_like(x.data))
    return nx.stack_sum(parts)
