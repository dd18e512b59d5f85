"""Dense-to-MoE initialization, expert similarity, and the upcycle-or-not rules."""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .config import architecture_hash
from .errors import ConsistencyError, KindError, ParameterError
from .model import FFN_KEYS, expert_prefix, ffn_prefix, gate_prefix

_EXPERT_RE = re.compile(r"^layers\.(\d+)\.moe\.experts\.(\d+)\.(w_gate|w_up|w_down)$")


def make_meta(arch: dict, tokens_trained: int = 0, **extra) -> dict:
    meta = {"arch": dict(arch), "config_hash": architecture_hash(arch), "tokens_trained": int(tokens_trained)}
    meta.update(extra)
    return meta


def _moe_layer_ids(n_layers: int, frequency: int) -> list[int]:
    return [l for l in range(n_layers) if l % frequency == frequency - 1]


def _upcycled_arch(dense: Checkpoint, n_experts: int, moe_layer_frequency: int) -> dict:
    arch = {k: v for k, v in dense.arch.items() if k not in ("n_experts", "moe_layer_frequency")}
    arch.update(kind="moe", n_experts=n_experts, moe_layer_frequency=moe_layer_frequency)
    return arch


def _require_dense(ckpt: Checkpoint):
    if ckpt.kind != "dense":
        raise KindError(f"upcycling needs a dense checkpoint, got kind={ckpt.kind!r}")
    if "layers" not in ckpt.arch:
        raise ConsistencyError("dense checkpoint meta lacks an 'arch' block with 'layers'")


def _gate_init(d: int, n: int, scale: float, seed: int, layer: int, dtype) -> np.ndarray:
    rng = np.random.default_rng([seed, 7919, layer])
    return (rng.standard_normal((d, n)) * scale).astype(dtype)


def _assemble(base: Checkpoint, ffn_sources: list[Checkpoint], gate_init_scale: float, seed: int,
              moe_layer_frequency: int) -> Checkpoint:
    n = len(ffn_sources)
    layers = _moe_layer_ids(base.arch["layers"], moe_layer_frequency)
    moe_set = set(layers)
    params: dict[str, np.ndarray] = {}
    for name, value in base.params.items():
        m = re.match(r"^layers\.(\d+)\.ffn\.", name)
        if m and int(m.group(1)) in moe_set:
            continue
        params[name] = value.copy()
    for l in layers:
        ref = base.params[f"{ffn_prefix(l)}.w_gate"]
        d = ref.shape[0]
        for e, src in enumerate(ffn_sources):
            for key in FFN_KEYS:
                params[f"{expert_prefix(l, e)}.{key}"] = src.params[f"{ffn_prefix(l)}.{key}"].copy()
        params[f"{gate_prefix(l)}.W"] = _gate_init(d, n, gate_init_scale, seed, l, ref.dtype)
        params[f"{gate_prefix(l)}.b"] = np.zeros(n, dtype=ref.dtype)
    arch = _upcycled_arch(base, n, moe_layer_frequency)
    meta = make_meta(arch, base.meta.get("tokens_trained", 0))
    return Checkpoint("moe", params, meta)


def upcycle_replicate(dense: Checkpoint, n_experts: int, gate_init_scale: float = 0.02, seed: int = 0,
                      moe_layer_frequency: int = 1) -> Checkpoint:
    """Copy every dense FFN into ``n_experts`` identical experts.

    Non-FFN parameters are copied verbatim; each new gate gets
    N(0, gate_init_scale) weights and a zero bias. With ``n_experts=1`` there
    is nothing to route, so a copy of the dense checkpoint is returned.
    """
    _require_dense(dense)
    if n_experts < 1:
        raise ParameterError(f"n_experts must be >= 1, got {n_experts}")
    if n_experts == 1:
        return dense.copy()
    out = _assemble(dense, [dense] * n_experts, gate_init_scale, seed, moe_layer_frequency)
    out.meta["upcycle"] = {"mode": "replicate", "seed": seed, "gate_init_scale": gate_init_scale}
    return out


def _is_ffn(name: str) -> bool:
    return re.match(r"^layers\.\d+\.ffn\.", name) is not None


def upcycle_specialized(sources, gate_init_scale: float = 0.02, seed: int = 0, n_experts: int | None = None,
                        moe_layer_frequency: int = 1, atol: float = 1e-6) -> Checkpoint:
    """Fill expert slots from several dense checkpoints that differ only in their FFNs.

    ``sources`` is a sequence of ``(checkpoint, copies)``; slots are filled in
    order. Non-FFN parameters come from the first checkpoint and must agree
    across all inputs within ``atol``.
    """
    sources = list(sources)
    if not sources:
        raise ConsistencyError("no source checkpoints given")
    for ckpt, copies in sources:
        _require_dense(ckpt)
        if int(copies) < 1:
            raise ConsistencyError(f"copies must be >= 1, got {copies}")
    total = sum(int(c) for _, c in sources)
    if n_experts is not None and total != n_experts:
        raise ConsistencyError(f"copies sum to {total}, expected n_experts={n_experts}")
    if total < 2:
        raise ConsistencyError("specialized upcycling needs at least 2 expert slots")
    base = sources[0][0]
    for i, (ckpt, _) in enumerate(sources[1:], start=1):
        if {k: v for k, v in ckpt.arch.items()} != base.arch:
            raise ConsistencyError(f"source {i} architecture {ckpt.arch} differs from source 0 {base.arch}")
        if set(ckpt.params) != set(base.params):
            raise ConsistencyError(f"source {i} parameter names differ from source 0")
        for name, value in base.params.items():
            other = ckpt.params[name]
            if other.shape != value.shape:
                raise ConsistencyError(f"source {i}: {name} shape {other.shape} != {value.shape}")
            if not _is_ffn(name):
                diff = float(np.max(np.abs(other.astype(np.float64) - value))) if value.size else 0.0
                if diff > atol:
                    raise ConsistencyError(
                        f"source {i}: non-FFN parameter {name} differs by {diff:.3g} (> {atol})")
    slots = [ckpt for ckpt, copies in sources for _ in range(int(copies))]
    out = _assemble(base, slots, gate_init_scale, seed, moe_layer_frequency)
    out.meta["upcycle"] = {"mode": "specialized", "seed": seed, "gate_init_scale": gate_init_scale,
                           "copies": [int(c) for _, c in sources]}
    return out


# -- similarity ---------------------------------------------------------------------


@dataclass
class SimilarityReport:
    value: float
    per_layer: dict[int, float]
    zero_norm: list[tuple[int, int]] = field(default_factory=list)  # (layer, expert)

    def __float__(self):
        return self.value


def _expert_vectors(params: dict) -> dict[int, dict[int, np.ndarray]]:
    grouped: dict[int, dict[int, dict[str, np.ndarray]]] = {}
    for name, value in params.items():
        m = _EXPERT_RE.match(name)
        if m:
            l, e, key = int(m.group(1)), int(m.group(2)), m.group(3)
            grouped.setdefault(l, {}).setdefault(e, {})[key] = value
    return {
        l: {e: np.concatenate([np.asarray(parts[k], dtype=np.float64).ravel() for k in FFN_KEYS])
            for e, parts in experts.items()}
        for l, experts in grouped.items()
    }


def similarity_report(params: dict) -> SimilarityReport:
    """Mean pairwise cosine similarity of flattened expert FFN weights.

    Averaged over unordered expert pairs within a layer, then over layers.
    Pairs involving a zero-norm expert count as 0 and the expert is listed in
    ``zero_norm``.
    """
    vectors = _expert_vectors(params)
    if not vectors:
        raise KindError("no expert weights found; expert similarity needs an moe checkpoint")
    per_layer: dict[int, float] = {}
    zero_norm: list[tuple[int, int]] = []
    for l in sorted(vectors):
        ids = sorted(vectors[l])
        if len(ids) < 2:
            raise ConsistencyError(f"layer {l} has fewer than 2 experts")
        mat = np.stack([vectors[l][e] for e in ids])
        gram = mat @ mat.T
        sq = np.diag(gram).copy()
        zero_norm.extend((l, e) for e, s in zip(ids, sq) if s == 0.0)
        total, pairs = 0.0, 0
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                pairs += 1
                if sq[i] == 0.0 or sq[j] == 0.0:
                    continue
                # sqrt of the product keeps identical vectors at exactly 1.0
                total += min(1.0, max(-1.0, gram[i, j] / math.sqrt(sq[i] * sq[j])))
        per_layer[l] = total / pairs
    value = sum(per_layer.values()) / len(per_layer)
    return SimilarityReport(value=value, per_layer=per_layer, zero_norm=zero_norm)


def expert_similarity(moe: Checkpoint) -> float:
    if moe.kind != "moe":
        raise KindError(f"expert similarity needs an moe checkpoint, got kind={moe.kind!r}")
    return similarity_report(moe.params).value


# -- decision rules ---------------------------------------------------------------


class Initialization(str, enum.Enum):
    UPCYCLE = "upcycle"
    FROM_SCRATCH = "from_scratch"
    INDETERMINATE = "indeterminate"


@dataclass(frozen=True)
class BudgetQuery:
    c_dense: float
    c_moe: float

    def __post_init__(self):
        if self.c_dense < 0:
            raise ParameterError(f"c_dense must be >= 0, got {self.c_dense}")
        if self.c_moe <= 0:
            raise ParameterError(f"c_moe must be > 0, got {self.c_moe}")


@dataclass(frozen=True)
class Recommendation:
    decision: Initialization
    rationale: str


def recommend_initialization(q: BudgetQuery, r_low: float = 2 / 3) -> Recommendation:
    """Upcycle, train from scratch, or report the trade-off.

    Budgets are in the same cost units; ``r_low`` is the largest MoE/dense cost
    ratio at which upcycling is still recommended.
    """
    if q.c_dense == 0:
        return Recommendation(Initialization.FROM_SCRATCH,
                              "no dense checkpoint has been paid for, so there is nothing to reuse; "
                              "train the MoE from scratch")
    ratio = q.c_moe / q.c_dense
    if q.c_moe >= 2 * q.c_dense:
        return Recommendation(Initialization.FROM_SCRATCH,
                              f"MoE budget is {ratio:.3g}x the dense cost (>= 2x): a from-scratch MoE has "
                              "time to outgrow the identical-expert start of an upcycled one")
    if q.c_moe <= r_low * q.c_dense:
        return Recommendation(Initialization.UPCYCLE,
                              f"MoE budget is {ratio:.3g}x the dense cost (<= {r_low:.3g}x): reuse the "
                              "dense checkpoint, scratch training cannot catch up within budget")
    return Recommendation(Initialization.INDETERMINATE,
                          f"MoE budget is {ratio:.3g}x the dense cost, between {r_low:.3g}x and 2x. "
                          "Upcycling exploits the dense checkpoint but starts from identical experts that "
                          "diversify slowly; scratch training diversifies freely but must first recover "
                          "the dense model's quality. Tune the upcycled learning-rate schedule if upcycling.")
