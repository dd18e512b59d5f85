"""A small pre-norm decoder-only transformer with optional MoE feed-forward layers.

Parameter names are flat dotted strings so that checkpoints, upcycling and the
optimizer can address them without a module tree.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .balance_losses import LoadStats, aux_loss_surrogate, total_loss
from .config import ModelConfig
from .errors import ConsistencyError, DimensionError
from .gating import GateDecision, GateParams, gate_probabilities, top_k_select
from .moe_layer import CapacityConfig, DispatchResult, Expert, ExpertBank, dispatch, moe_forward
from .numerics import Tensor

FFN_KEYS = ("w_gate", "w_up", "w_down")


def ffn_prefix(layer: int) -> str:
    return f"layers.{layer}.ffn"


def expert_prefix(layer: int, expert: int) -> str:
    return f"layers.{layer}.moe.experts.{expert}"


def gate_prefix(layer: int) -> str:
    return f"layers.{layer}.moe.gate"


def is_expert_param(name: str) -> bool:
    return ".moe.experts." in name


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, h, V = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size
    ffn = {"w_gate": (d, h), "w_up": (d, h), "w_down": (h, d)}
    shapes = {"embed.tok": (V, d), "embed.pos": (cfg.seq_len, d)}
    moe_layers = set(cfg.moe_layer_ids())
    for l in range(cfg.layers):
        shapes[f"layers.{l}.attn_norm"] = (d,)
        shapes[f"layers.{l}.attn.wqkv"] = (d, 3 * d)
        shapes[f"layers.{l}.attn.wo"] = (d, d)
        shapes[f"layers.{l}.ffn_norm"] = (d,)
        if l in moe_layers:
            shapes[f"{gate_prefix(l)}.W"] = (d, cfg.n_experts)
            shapes[f"{gate_prefix(l)}.b"] = (cfg.n_experts,)
            for e in range(cfg.n_experts):
                for key, shape in ffn.items():
                    shapes[f"{expert_prefix(l, e)}.{key}"] = shape
        else:
            for key, shape in ffn.items():
                shapes[f"{ffn_prefix(l)}.{key}"] = shape
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, V)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Normal(0, init_std) matrices, unit norms, zero gate biases.

    Gate weights use ``gating.gate_init_scale``. Every tensor draws from its
    own generator keyed by its name, so adding a parameter never shifts the
    values of the others.
    """
    dtype = np.dtype(cfg.precision)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_norm") or name == "final_norm":
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".gate.b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            std = cfg.gating.gate_init_scale if name.endswith(".gate.W") else cfg.init_std
            rng = np.random.default_rng([seed, _name_key(name)])
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return params


def _name_key(name: str) -> int:
    # stable across processes, unlike hash()
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


@dataclass
class MoELayerTrace:
    layer: int
    decision: GateDecision
    dispatch: DispatchResult
    aux_loss: Tensor
    gate_input: Tensor | None = None  # normalized hidden states fed to the gate

    @property
    def drop_rate(self) -> float:
        return self.dispatch.drop_rate

    def load_stats(self) -> LoadStats:
        return LoadStats.from_routing(self.dispatch.counts, self.decision.probs, self.decision.k)


@dataclass
class LossOutput:
    total: Tensor
    ce: Tensor
    aux: list[Tensor]
    traces: list[MoELayerTrace]

    @property
    def drop_rates(self) -> list[float]:
        return [t.drop_rate for t in self.traces]


class Transformer:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray], trainable: bool = True):
        expected = param_shapes(cfg)
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        if missing or extra:
            raise ConsistencyError(f"parameters do not match architecture: missing {missing[:4]}, unexpected {extra[:4]}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ConsistencyError(f"{name}: shape {tuple(params[name].shape)} != expected {shape}")
        self.cfg = cfg
        dtype = np.dtype(cfg.precision)
        self.params = {name: Tensor(np.array(params[name], dtype=dtype), requires_grad=trainable)
                       for name in expected}
        self.moe_layers = cfg.moe_layer_ids()
        S = cfg.seq_len
        self._mask = np.triu(np.full((S, S), -1e9, dtype=dtype), k=1)

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int = 0) -> "Transformer":
        return cls(cfg, init_params(cfg, seed))

    def numpy_params(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def gate_params(self, layer: int) -> GateParams:
        g = self.cfg.gating
        p = gate_prefix(layer)
        return GateParams(self.params[f"{p}.W"], self.params[f"{p}.b"], normalize=g.normalize,
                          lam=g.lam, epsilon_sigma=g.epsilon_sigma,
                          grad_through_stats=g.grad_through_stats)

    def expert_bank(self, layer: int) -> ExpertBank:
        return ExpertBank([
            Expert(*(self.params[f"{expert_prefix(layer, e)}.{k}"] for k in FFN_KEYS))
            for e in range(self.cfg.n_experts)
        ])

    # -- forward -----------------------------------------------------------------

    def _attention(self, x: Tensor, layer: int, B: int, S: int) -> Tensor:
        d, H = self.cfg.hidden_dim, self.cfg.heads
        hd = d // H
        p = f"layers.{layer}.attn"
        qkv = nx.matmul(x, self.params[f"{p}.wqkv"]).reshape(B, S, 3, H, hd)
        qkv = nx.transpose(qkv, (2, 0, 3, 1, 4))  # [3, B, H, S, hd]
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        att = nx.softmax(scores + self._mask[:S, :S], axis=-1)
        ctx = nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)).reshape(B * S, d)
        return nx.matmul(ctx, self.params[f"{p}.wo"])

    def _ffn(self, x: Tensor, layer: int, capacity: CapacityConfig, traces: list):
        if layer in self.moe_layers:
            probs = gate_probabilities(x, self.gate_params(layer))
            decision = top_k_select(probs, self.cfg.top_k)
            routed = dispatch(decision, capacity)
            traces.append(MoELayerTrace(layer, decision, routed, aux_loss_surrogate(probs), x))
            return moe_forward(x, self.expert_bank(layer), decision, routed)
        p = ffn_prefix(layer)
        return nx.swiglu_ffn(x, *(self.params[f"{p}.{k}"] for k in FFN_KEYS))

    def forward(self, tokens, capacity_factor: float | None | str = "config"):
        """Logits [B*S, V] and per-MoE-layer routing traces for ``tokens`` [B, S].

        ``capacity_factor=None`` disables dropping.
        """
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] > self.cfg.seq_len:
            raise DimensionError(f"tokens must be [B, S<={self.cfg.seq_len}], got {tokens.shape}")
        if capacity_factor == "config":
            capacity_factor = self.cfg.capacity_factor
        capacity = CapacityConfig(capacity_factor)
        B, S = tokens.shape
        P = self.params
        x = nx.take_rows(P["embed.tok"], tokens.reshape(-1)) + nx.tile_rows(P["embed.pos"][:S], B)
        traces: list[MoELayerTrace] = []
        for l in range(self.cfg.layers):
            x = x + self._attention(nx.rms_norm(x, P[f"layers.{l}.attn_norm"]), l, B, S)
            x = x + self._ffn(nx.rms_norm(x, P[f"layers.{l}.ffn_norm"]), l, capacity, traces)
        logits = nx.matmul(nx.rms_norm(x, P["final_norm"]), P["lm_head"])
        return logits, traces

    def loss(self, tokens, targets, alphas=None, capacity_factor="config", ce_weight: float = 1.0) -> LossOutput:
        logits, traces = self.forward(tokens, capacity_factor)
        ce = nx.cross_entropy(logits, np.asarray(targets).reshape(-1))
        aux = [t.aux_loss for t in traces]
        if alphas is None:
            alphas = [0.0] * len(aux)
        return LossOutput(total=total_loss(ce, aux, alphas, ce_weight), ce=ce, aux=aux, traces=traces)
