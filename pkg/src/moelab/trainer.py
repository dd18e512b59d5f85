"""Training loop, evaluation and metrics streams."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import controller as ctl
from .balance_losses import aux_loss_naive
from .checkpoint import Checkpoint, save_checkpoint
from .config import ExperimentConfig, ModelConfig
from .data import TokenData
from .errors import ConsistencyError, TrainingAborted
from .gating import gate_statistics
from .model import Transformer
from .numerics import cross_entropy
from .optim import clip_grads, group_scale, make_optimizer, schedule_lr
from .upcycling import make_meta, similarity_report

log = logging.getLogger(__name__)

LIST_FIELDS = ("aux_loss", "aux_naive", "alpha", "drop_rate", "max1_over_max2", "max2_over_max3", "entropy", "top1")
CSV_HEADER = ("step", "tokens_seen", "learning_rate", "ce_loss", "total_loss", "eval_loss", "grad_norm",
              "expert_similarity") + LIST_FIELDS


@dataclass
class MetricsRecord:
    """One logged training step. Per-layer fields list MoE layers in depth order.

    ``alpha`` is the coefficient used for this step's loss; ``drop_rate`` is
    what this step observed and what the controller consumes next.
    """

    step: int
    tokens_seen: int
    learning_rate: float
    ce_loss: float
    total_loss: float
    eval_loss: Optional[float] = None
    grad_norm: Optional[float] = None
    expert_similarity: Optional[float] = None
    aux_loss: list = field(default_factory=list)
    aux_naive: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    drop_rate: list = field(default_factory=list)
    max1_over_max2: list = field(default_factory=list)
    max2_over_max3: list = field(default_factory=list)
    entropy: list = field(default_factory=list)
    top1: list = field(default_factory=list)

    def csv_row(self) -> list[str]:
        row = []
        for name in CSV_HEADER:
            value = getattr(self, name)
            if isinstance(value, list):
                row.append(";".join(_fmt(v) for v in value))
            else:
                row.append(_fmt(value))
        return row

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_csv_row(cls, row: dict) -> "MetricsRecord":
        kwargs = {}
        for name in CSV_HEADER:
            raw = row.get(name, "")
            if name in LIST_FIELDS:
                kwargs[name] = [_parse(v) for v in raw.split(";")] if raw else []
            elif name in ("step", "tokens_seen"):
                kwargs[name] = int(raw)
            else:
                kwargs[name] = _parse(raw)
        return cls(**kwargs)

    def is_finite(self) -> bool:
        vals = [self.ce_loss, self.total_loss] + [v for v in self.aux_loss + self.alpha if v is not None]
        return all(math.isfinite(v) for v in vals)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse(s: str):
    return None if s == "" else float(s)


class MetricsWriter:
    """Append-only ``metrics.csv`` plus a ``metrics.jsonl`` mirror."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.csv_path = self.out_dir / "metrics.csv"
        self.jsonl_path = self.out_dir / "metrics.jsonl"
        if not self.csv_path.exists():
            with open(self.csv_path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(CSV_HEADER)

    def __call__(self, record: MetricsRecord):
        with open(self.csv_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(record.csv_row())
        with open(self.jsonl_path, "a") as fh:
            fh.write(record.to_json() + "\n")


def read_metrics(path) -> list[MetricsRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.csv"
    with open(path, newline="") as fh:
        return [MetricsRecord.from_csv_row(row) for row in csv.DictReader(fh)]


def metrics_csv_text(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(r.csv_row())
    return buf.getvalue()


# -- model <-> checkpoint ---------------------------------------------------------------


def resolve_model_config(ckpt: Checkpoint, cfg: ModelConfig | None = None) -> ModelConfig:
    """Model config for running ``ckpt``; ``cfg`` must agree with its architecture."""
    if cfg is None:
        if "model_config" in ckpt.meta:
            cfg = ModelConfig.model_validate(ckpt.meta["model_config"])
        else:
            fields = {k: v for k, v in ckpt.arch.items()}
            if ckpt.kind == "dense":
                fields.pop("n_experts", None)
            cfg = ModelConfig.model_validate(fields)
    arch = cfg.architecture()
    if arch != ckpt.arch:
        diff = {k: (ckpt.arch.get(k), arch.get(k)) for k in set(arch) | set(ckpt.arch)
                if ckpt.arch.get(k) != arch.get(k)}
        hint = ""
        if ckpt.kind == "dense" and cfg.kind == "moe":
            hint = " (dense checkpoints must be upcycled before MoE training)"
        raise ConsistencyError(f"checkpoint architecture does not match config: "
                               f"{{field: (checkpoint, config)}} = {diff}{hint}")
    return cfg


def model_from_checkpoint(ckpt: Checkpoint, cfg: ModelConfig | None = None, trainable: bool = True) -> Transformer:
    return Transformer(resolve_model_config(ckpt, cfg), ckpt.params, trainable=trainable)


def checkpoint_from_model(model: Transformer, tokens_trained: int = 0, **extra_meta) -> Checkpoint:
    cfg = model.cfg
    meta = make_meta(cfg.architecture(), tokens_trained,
                     model_config=cfg.model_dump(by_alias=True, mode="json"), **extra_meta)
    return Checkpoint(cfg.kind, {k: v.copy() for k, v in model.numpy_params().items()}, meta)


# -- evaluation ----------------------------------------------------------------------


def evaluate_model(model: Transformer, batches) -> float:
    """Mean cross-entropy over ``batches`` with unbounded expert capacity."""
    losses = []
    for b in batches:
        logits, _ = model.forward(b[:, :-1], capacity_factor=None)
        losses.append(float(cross_entropy(logits, b[:, 1:].reshape(-1)).data))
    return float(np.mean(losses)) if losses else float("nan")


def evaluate_loss(checkpoint: Checkpoint, data: TokenData, batches: int, batch_size: int = 8,
                  model_cfg: ModelConfig | None = None) -> float:
    model = model_from_checkpoint(checkpoint, model_cfg, trainable=False)
    return evaluate_model(model, data.eval_batches(batches, batch_size, model.cfg.seq_len))


# -- training -----------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list[MetricsRecord]
    controller: ctl.ControllerState


def _controller_config(cfg: ExperimentConfig) -> ctl.ControllerConfig:
    c = cfg.controller
    return ctl.ControllerConfig(xi=c.xi, alpha_max=c.alpha_max, beta=c.beta, alpha_init=c.alpha_init)


def _gate_stats_lists(traces):
    out = {"max1_over_max2": [], "max2_over_max3": [], "entropy": [], "top1": []}
    for t in traces:
        s = gate_statistics(t.decision.probs)
        out["max1_over_max2"].append(s["max1_over_max2"])
        out["max2_over_max3"].append(s["max2_over_max3"])
        out["entropy"].append(s["mean_entropy"])
        out["top1"].append(s["mean_top1"])
    return out


def train(cfg: ExperimentConfig, init: Checkpoint | str | None = "scratch", data: TokenData | None = None,
          steps: int | None = None, on_record: Callable[[MetricsRecord], None] | None = None,
          checkpoint_dir=None) -> TrainResult:
    """Run ``steps`` optimizer steps (default ``cfg.run.steps``).

    ``init`` is ``"scratch"`` or a checkpoint. With ``cfg.run.resume`` the
    checkpoint's step counter, optimizer moments and controller state are
    restored and training continues up to ``steps`` total steps.
    Raises TrainingAborted on a non-finite loss.
    """
    run = cfg.run
    steps = run.steps if steps is None else steps
    if data is None:
        data = TokenData(cfg.data, cfg.model.vocab_size)
    if init is None or (isinstance(init, str) and init == "scratch"):
        model = Transformer.initialize(cfg.model, run.seed)
        base_tokens = 0
        init = None
    else:
        model = model_from_checkpoint(init, cfg.model)
        base_tokens = int(init.meta.get("tokens_trained", 0))

    ccfg = _controller_config(cfg)
    n_moe = len(model.moe_layers)
    state = ctl.ControllerState.initial(n_moe, ccfg)
    optimizer = make_optimizer(cfg.optimizer)
    start_step, tokens_seen = 0, 0
    if init is not None and run.resume and "run_state" in init.meta:
        rs = init.meta["run_state"]
        start_step, tokens_seen = int(rs["step"]), int(rs["tokens_seen"])
        base_tokens -= tokens_seen
        state = ctl.ControllerState.from_dict(rs["controller"])
        optimizer.load_state_dict(init.state, start_step)

    total_tokens = cfg.total_tokens
    tokens_per_step = run.batch_size * cfg.model.seq_len
    scales = {name: group_scale(name, cfg.schedule.per_group_scale) for name in model.params}
    eval_data = data.eval_batches(run.eval_batches, run.batch_size, cfg.model.seq_len) if run.eval_batches else []
    records: list[MetricsRecord] = []

    def snapshot(step: int) -> Checkpoint:
        ck = checkpoint_from_model(model, base_tokens + tokens_seen, run_state={
            "step": step, "tokens_seen": tokens_seen, "controller": state.to_dict(), "seed": run.seed})
        ck.state = {k: v.copy() for k, v in optimizer.state_dict().items()}
        return ck

    for step in range(start_step, steps):
        lr = schedule_lr(tokens_seen, cfg.schedule, total_tokens)
        alphas = list(state.alpha) if cfg.controller.mode == "adaptive" else [cfg.controller.fixed_alpha] * n_moe
        batch = data.train_batch(run.seed, step, run.batch_size, cfg.model.seq_len)
        logged = step == start_step or (step + 1) % run.log_every == 0 or step == steps - 1
        do_eval = bool(eval_data) and logged and (run.eval_every == 0 or step % run.eval_every == 0)

        similarity = None
        if logged and n_moe:
            similarity = similarity_report(model.numpy_params()).value
        eval_loss = evaluate_model(model, eval_data) if do_eval else None

        out = model.loss(batch[:, :-1], batch[:, 1:], alphas)
        total = float(out.total.data)
        drop_rates = out.drop_rates

        record = None
        if logged or not math.isfinite(total):
            stats = _gate_stats_lists(out.traces)
            record = MetricsRecord(
                step=step, tokens_seen=tokens_seen + tokens_per_step, learning_rate=lr,
                ce_loss=float(out.ce.data), total_loss=total, eval_loss=eval_loss,
                expert_similarity=similarity,
                aux_loss=[float(a.data) for a in out.aux],
                aux_naive=[aux_loss_naive(t.load_stats().p, t.decision.k, t.decision.n_experts)
                           for t in out.traces],
                alpha=alphas, drop_rate=drop_rates, **stats)
        if not math.isfinite(total):
            raise TrainingAborted(f"non-finite loss {total} at step {step}", record)

        model.zero_grad()
        out.total.backward()
        grads = {name: t.grad for name, t in model.params.items()}
        grad_norm = clip_grads(grads, cfg.optimizer.grad_clip)
        optimizer.step(model.numpy_params(), grads, lr, scales)

        if cfg.controller.mode == "adaptive" and n_moe:
            state = ctl.update(state, drop_rates, ccfg)
        tokens_seen += tokens_per_step

        if record is not None:
            record.grad_norm = grad_norm
            records.append(record)
            if on_record is not None:
                on_record(record)
            log.info("step %d ce %.4f drop %s", step, record.ce_loss, [round(d, 4) for d in drop_rates])
        if checkpoint_dir is not None and run.checkpoint_every and (step + 1) % run.checkpoint_every == 0 \
                and step != steps - 1:
            save_checkpoint(snapshot(step + 1), Path(checkpoint_dir) / f"step_{step + 1:06d}")

    final = snapshot(max(steps, start_step))
    if checkpoint_dir is not None:
        save_checkpoint(final, Path(checkpoint_dir) / "final")
    return TrainResult(final, records, state)
