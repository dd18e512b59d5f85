"""Experiment configuration: TOML files, dotted overrides and validation."""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class GatingConfig(_Strict):
    normalize: bool = False
    lam: float = Field(1.0, alias="lambda", gt=0)
    epsilon_sigma: float = Field(1e-6, gt=0)
    grad_through_stats: bool = True
    gate_init_scale: float = Field(0.02, ge=0)


class ModelConfig(_Strict):
    kind: Literal["dense", "moe"] = "moe"
    layers: int = Field(4, ge=1)
    hidden_dim: int = Field(128, ge=1)
    ffn_dim: int = Field(256, ge=1)
    heads: int = Field(4, ge=1)
    vocab_size: int = Field(512, ge=2)
    seq_len: int = Field(256, ge=1)
    n_experts: int = Field(8, ge=1)
    top_k: int = Field(2, ge=1)
    moe_layer_frequency: int = Field(1, ge=1)
    capacity_factor: float = Field(1.25, gt=0)
    init_std: float = Field(0.02, gt=0)
    precision: Literal["float32", "float64"] = "float32"
    gating: GatingConfig = GatingConfig()

    @model_validator(mode="after")
    def _check(self):
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim ({self.hidden_dim}) must be divisible by heads ({self.heads})")
        if self.kind == "moe":
            if self.n_experts < 2:
                raise ValueError("an moe model needs n_experts >= 2")
            if self.top_k > self.n_experts:
                raise ValueError(f"top_k ({self.top_k}) cannot exceed n_experts ({self.n_experts})")
        return self

    def moe_layer_ids(self) -> list[int]:
        if self.kind != "moe":
            return []
        f = self.moe_layer_frequency
        return [l for l in range(self.layers) if l % f == f - 1]

    def architecture(self) -> dict:
        """Fields that fix parameter names and shapes."""
        arch = {
            "kind": self.kind,
            "layers": self.layers,
            "hidden_dim": self.hidden_dim,
            "ffn_dim": self.ffn_dim,
            "heads": self.heads,
            "vocab_size": self.vocab_size,
            "seq_len": self.seq_len,
        }
        if self.kind == "moe":
            arch["n_experts"] = self.n_experts
            arch["moe_layer_frequency"] = self.moe_layer_frequency
        return arch


class GroupScale(_Strict):
    expert: float = Field(1.0, gt=0)
    non_expert: float = Field(1.0, gt=0)


class ScheduleConfig(_Strict):
    shape: Literal["cosine", "constant", "linear"] = "cosine"
    peak_lr: float = Field(1e-3, gt=0)
    min_lr: float = Field(1e-4, ge=0)
    warmup_tokens: int = Field(0, ge=0)
    # None: steps * batch_size * seq_len
    total_tokens: Optional[int] = Field(None, ge=1)
    per_group_scale: GroupScale = GroupScale()

    @model_validator(mode="after")
    def _check(self):
        if self.min_lr > self.peak_lr:
            raise ValueError(f"min_lr ({self.min_lr}) exceeds peak_lr ({self.peak_lr})")
        if self.total_tokens is not None and self.warmup_tokens > self.total_tokens:
            raise ValueError("warmup_tokens exceeds total_tokens")
        return self


class OptimizerConfig(_Strict):
    kind: Literal["adamw", "sgd"] = "adamw"
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.95, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.1, ge=0)
    grad_clip: float = Field(1.0, ge=0)  # 0 disables clipping


class ControllerSection(_Strict):
    mode: Literal["adaptive", "fixed"] = "adaptive"
    xi: float = Field(0.2, gt=0)
    alpha_max: float = Field(0.01, gt=0)
    beta: float = Field(0.99, gt=0, lt=1)
    alpha_init: Optional[float] = Field(None, ge=0)
    fixed_alpha: float = Field(0.01, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.alpha_init is not None and self.alpha_init > self.alpha_max:
            raise ValueError("alpha_init must not exceed alpha_max")
        return self


class DataConfig(_Strict):
    seed: int = 1234
    n_domains: int = Field(3, ge=1)
    mix: Optional[list[float]] = None  # None: 7:2:1 for three domains, equal otherwise
    branching: int = Field(4, ge=1)
    doc_len_min: int = Field(32, ge=2)
    doc_len_max: int = Field(256, ge=2)
    train_tokens: int = Field(1_000_000, ge=1)
    eval_tokens: int = Field(65_536, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.mix is not None:
            if len(self.mix) != self.n_domains:
                raise ValueError(f"mix has {len(self.mix)} entries for {self.n_domains} domains")
            if any(m <= 0 for m in self.mix):
                raise ValueError("mix weights must be positive")
        if self.doc_len_min > self.doc_len_max:
            raise ValueError("doc_len_min exceeds doc_len_max")
        return self

    def mix_weights(self) -> list[float]:
        if self.mix is not None:
            return list(self.mix)
        if self.n_domains == 3:
            return [7.0, 2.0, 1.0]
        return [1.0] * self.n_domains


class RunConfig(_Strict):
    name: str = "run"
    seed: int = 0
    steps: int = Field(100, ge=1)
    batch_size: int = Field(16, ge=1)
    log_every: int = Field(10, ge=1)
    eval_every: int = Field(0, ge=0)  # 0: evaluate at every logged step
    eval_batches: int = Field(2, ge=0)
    checkpoint_every: int = Field(0, ge=0)  # 0: final checkpoint only
    init: str = "scratch"  # or a checkpoint directory
    # restore step, optimizer and controller state from ``init`` instead of starting fresh
    resume: bool = False


class ExperimentConfig(_Strict):
    run: RunConfig = RunConfig()
    model: ModelConfig = ModelConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    controller: ControllerSection = ControllerSection()
    data: DataConfig = DataConfig()

    @model_validator(mode="after")
    def _check(self):
        if self.data.n_domains > self.model.vocab_size:
            raise ValueError("vocab_size must be at least n_domains")
        return self

    @property
    def total_tokens(self) -> int:
        if self.schedule.total_tokens is not None:
            return self.schedule.total_tokens
        return self.run.steps * self.run.batch_size * self.model.seq_len

    def to_dict(self) -> dict:
        return self.model_dump(by_alias=True, mode="json", exclude_none=True)


def parse_override(item: str) -> tuple[list[str], object]:
    """Split ``a.b.c=value``; the value is read as a TOML literal, else a string."""
    if "=" not in item:
        raise ValueError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ValueError(f"override {item!r} has an empty key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.split("."), value


def apply_overrides(raw: dict, overrides) -> dict:
    for item in overrides or ():
        path, value = parse_override(item)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {item!r} descends into a non-table")
        node[path[-1]] = value
    return raw


def load_config(path=None, overrides=None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    return ExperimentConfig.model_validate(apply_overrides(raw, overrides))


def config_from_dict(raw: dict, overrides=None) -> ExperimentConfig:
    return ExperimentConfig.model_validate(apply_overrides(json.loads(json.dumps(raw)), overrides))


def architecture_hash(arch: dict) -> str:
    blob = json.dumps(arch, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def format_validation_error(err) -> str:
    """One line per offending field, dotted path first."""
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "\n".join(lines)


def write_toml(cfg: ExperimentConfig, path) -> None:
    """Minimal TOML writer for the flat-table layout this config uses."""
    data = cfg.to_dict()
    out: list[str] = []

    def emit(table: dict, prefix: str):
        scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
        tables = {k: v for k, v in table.items() if isinstance(v, dict)}
        if scalars:
            out.append(f"[{prefix}]")
            for k, v in scalars.items():
                out.append(f"{k} = {_toml_value(v)}")
            out.append("")
        for k, v in tables.items():
            emit(v, f"{prefix}.{k}")

    for section, table in data.items():
        emit(table, section)
    Path(path).write_text("\n".join(out))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(str(v))
