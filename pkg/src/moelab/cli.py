"""``moelab`` command line: train, upcycle, compare, plan, eval.

Exit codes: 0 success, 2 invalid input, 3 training aborted on a non-finite
loss, 4 file-system or checkpoint I/O problem.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from pydantic import ValidationError

from . import __version__
from .checkpoint import checkpoint_checksum, load_checkpoint, save_checkpoint
from .config import (ExperimentConfig, config_from_dict, format_validation_error, load_config,
                     write_toml)
from .data import TokenData
from .errors import CheckpointFormatError, ConsistencyError, MoELabError, ParameterError, TrainingAborted
from .planner import (CostModel, MeshSpec, PipelinePlan, alltoall_messages, best_split, check_mesh,
                      compare_splits, simulate_pipeline)
from .trainer import MetricsWriter, evaluate_loss, read_metrics, train
from .upcycling import expert_similarity, upcycle_replicate, upcycle_specialized

EXIT_OK, EXIT_INVALID, EXIT_ABORTED, EXIT_IO = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "MOELAB_OUTPUT_ROOT"

log = logging.getLogger("moelab")


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _fresh_dir(path: Path) -> Path:
    if path.exists() and any(path.iterdir()):
        raise CLIError(f"output directory {path} already exists and is not empty", EXIT_IO)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# -- train ------------------------------------------------------------------------------


def _load_train_config(args) -> tuple[ExperimentConfig, str | None]:
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text())
        return config_from_dict(manifest["config"], args.set), manifest.get("config_path")
    return load_config(args.config, args.set), (str(Path(args.config).resolve()) if args.config else None)


def write_manifest(out: Path, cfg: ExperimentConfig, config_path: str | None, parent: str | None) -> dict:
    parents = []
    if parent is not None:
        parents.append({"path": str(Path(parent).resolve()), "checksum": checkpoint_checksum(parent)})
    manifest = {
        "name": cfg.run.name,
        "config_path": config_path,
        "config": cfg.to_dict(),
        "seed": cfg.run.seed,
        "output_dir": str(out.resolve()),
        "parents": parents,
        "moelab_version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def cmd_train(args) -> int:
    cfg, config_path = _load_train_config(args)
    out = Path(args.out) if args.out else output_root() / cfg.run.name
    init = "scratch"
    parent = None
    if cfg.run.init != "scratch":
        parent = cfg.run.init
        if not (Path(parent) / "manifest.json").exists():
            raise CLIError(f"parent checkpoint {parent} not found", EXIT_IO)
        init = load_checkpoint(parent)
    _fresh_dir(out)
    write_manifest(out, cfg, config_path, parent)
    write_toml(cfg, out / "config.toml")
    writer = MetricsWriter(out)
    try:
        result = train(cfg, init=init, on_record=writer, checkpoint_dir=out / "checkpoints")
    except TrainingAborted as exc:
        if exc.record is not None:
            writer(exc.record)
        print(f"training aborted: {exc}", file=sys.stderr)
        if exc.record is not None:
            print(f"  drop_rate={exc.record.drop_rate} alpha={exc.record.alpha} "
                  f"lr={exc.record.learning_rate}", file=sys.stderr)
        return EXIT_ABORTED
    last = result.records[-1] if result.records else None
    summary = {"out": str(out), "steps": cfg.run.steps,
               "final_ce_loss": last.ce_loss if last else None,
               "final_eval_loss": last.eval_loss if last else None,
               "checkpoint_checksum": checkpoint_checksum(out / "checkpoints" / "final")}
    print(json.dumps(summary))
    return EXIT_OK


# -- upcycle ----------------------------------------------------------------------------


def cmd_upcycle(args) -> int:
    for src in args.dense:
        if not (Path(src) / "manifest.json").exists():
            raise CLIError(f"checkpoint {src} not found", EXIT_IO)
    sources = [load_checkpoint(p) for p in args.dense]
    if args.mode == "replicate":
        if len(sources) != 1:
            raise CLIError("replicate mode takes exactly one dense checkpoint", EXIT_INVALID)
        if not args.n_experts:
            raise CLIError("replicate mode needs --n-experts", EXIT_INVALID)
        moe = upcycle_replicate(sources[0], args.n_experts, gate_init_scale=args.gate_init_scale,
                                seed=args.seed, moe_layer_frequency=args.moe_layer_frequency)
    else:
        copies = args.copies or [1] * len(sources)
        if len(copies) != len(sources):
            raise CLIError(f"--copies has {len(copies)} entries for {len(sources)} checkpoints", EXIT_INVALID)
        moe = upcycle_specialized(list(zip(sources, copies)), gate_init_scale=args.gate_init_scale,
                                  seed=args.seed, n_experts=args.n_experts,
                                  moe_layer_frequency=args.moe_layer_frequency)
    out = _fresh_dir(Path(args.out))
    save_checkpoint(moe, out)
    sim = expert_similarity(moe) if moe.kind == "moe" else None
    print(json.dumps({"out": str(out), "kind": moe.kind, "n_experts": moe.n_experts,
                      "expert_similarity": sim, "checksum": checkpoint_checksum(out)}))
    return EXIT_OK


# -- compare ----------------------------------------------------------------------------

_COMPARE_FIELDS = ("eval_loss", "drop_rate", "expert_similarity")


def _mean(values):
    return None if not values else sum(values) / len(values)


def _row_values(rec) -> dict:
    return {"eval_loss": rec.eval_loss, "drop_rate": _mean(rec.drop_rate),
            "expert_similarity": rec.expert_similarity}


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6g}"


def compare_runs(run_dirs, csv_path=None, stream=None, err=None) -> int:
    stream = stream or sys.stdout
    err = err or sys.stderr
    runs, loaded, configs = [], [], {}
    for d in run_dirs:
        try:
            loaded.append({r.tokens_seen: _row_values(r) for r in read_metrics(d)})
        except FileNotFoundError:
            print(f"error: run {d}: missing metrics file", file=err)
            continue
        runs.append(d)
        manifest = Path(d) / "manifest.json"
        if manifest.exists():
            cfg = json.loads(manifest.read_text()).get("config", {})
            configs[str(d)] = (cfg.get("model", {}).get("vocab_size"), cfg.get("data", {}).get("seed"))
    if not loaded:
        print("error: no run could be read", file=err)
        return EXIT_IO
    if len(set(configs.values())) > 1:
        print(f"warning: runs disagree on (vocab_size, data seed): {configs}; "
              "comparing on the shared token counts only", file=err)
    tokens = sorted(set.intersection(*(set(v) for v in loaded)))
    if len(tokens) < max(len(v) for v in loaded):
        print("warning: runs are logged at different token counts; showing the intersection", file=err)

    header = ["tokens"]
    for i, r in enumerate(runs):
        header += [f"{f}[{i}]" for f in _COMPARE_FIELDS]
        if i:
            header += [f"delta_{f}[{i}]" for f in _COMPARE_FIELDS]
    rows = []
    for t in tokens:
        base = loaded[0][t]
        row = [t]
        for i, per_token in enumerate(loaded):
            vals = per_token[t]
            row += [vals[f] for f in _COMPARE_FIELDS]
            if i:
                row += [None if vals[f] is None or base[f] is None else vals[f] - base[f]
                        for f in _COMPARE_FIELDS]
        rows.append(row)

    for i, r in enumerate(runs):
        print(f"[{i}] {r}", file=stream)
    widths = [max(len(h), 10) for h in header]
    print("  ".join(h.rjust(w) for h, w in zip(header, widths)), file=stream)
    for row in rows:
        cells = [str(row[0])] + [_fmt(v) for v in row[1:]]
        print("  ".join(c.rjust(w) for c, w in zip(cells, widths)), file=stream)
    if csv_path is not None:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run_index", "run_dir"])
            for i, r in enumerate(runs):
                w.writerow([i, r])
            w.writerow([])
            w.writerow(header)
            for row in rows:
                w.writerow([row[0]] + ["" if v is None else repr(v) for v in row[1:]])
    return EXIT_OK if len(runs) == len(run_dirs) else EXIT_IO


def cmd_compare(args) -> int:
    csv_path = args.csv if args.csv else output_root() / "compare.csv"
    return compare_runs(args.runs, csv_path)


# -- plan -------------------------------------------------------------------------------


def _schedule_table(title: str, splits, report) -> str:
    busy = ", ".join(f"{b:g}" for b in report.per_device_busy)
    return (f"{title}: splits={list(splits)} makespan={report.makespan:g} "
            f"bubble_time={report.bubble_time:g} bubble_fraction={report.bubble_fraction:.4f} busy=[{busy}]")


def cmd_plan(args) -> int:
    result: dict = {}
    lines: list[str] = []
    status = EXIT_OK
    mesh_flags = (args.world, args.pp, args.dp, args.tp)
    if any(v is not None for v in mesh_flags):
        if any(v is None for v in mesh_flags):
            raise CLIError("mesh checks need --world, --pp, --dp and --tp", EXIT_INVALID)
        ep = args.ep if args.ep is not None else {"EP": args.dp * args.tp, "ETP": args.dp,
                                                   "EDP": args.tp}.get(args.strategy.upper(), 1)
        spec = MeshSpec(args.world, args.pp, args.dp, args.tp, ep, args.strategy, args.n_experts)
        check = check_mesh(spec)
        result["mesh"] = {"spec": spec.__dict__, **check.to_dict()}
        if check.valid:
            result["mesh"]["alltoall_messages"] = alltoall_messages(spec, args.tokens, args.top_k)
        lines.append(f"mesh world={spec.world} pp={spec.pp} dp={spec.dp} tp={spec.tp} ep={spec.ep} "
                     f"{spec.strategy}: {'valid' if check.valid else 'INVALID'}")
        lines += [f"  violation: {v}" for v in check.violations]
        if not check.valid:
            status = EXIT_INVALID

    cost = CostModel(t_layer=args.t_layer, t_loss=args.t_loss,
                     backward_multiplier=args.backward_multiplier, hop_cost=args.hop_cost)
    m = args.microbatches
    if args.splits:
        rep = simulate_pipeline(PipelinePlan(args.splits, cost, m))
        result["schedule"] = {"splits": args.splits, "microbatches": m, **rep.to_dict()}
        lines.append(_schedule_table("schedule", args.splits, rep))
    if args.layers is not None or args.stages is not None:
        if args.layers is None or args.stages is None:
            raise CLIError("--layers and --stages go together", EXIT_INVALID)
        plan = best_split(args.layers, args.stages, cost, m)
        rep = simulate_pipeline(plan)
        q, r = divmod(args.layers, args.stages)
        near_uniform = [q + 1] * r + [q] * (args.stages - r)
        base = simulate_pipeline(PipelinePlan(near_uniform, cost, m))
        result["best_split"] = {"layers": args.layers, "stages": args.stages, "microbatches": m,
                                "splits": plan.splits, **rep.to_dict(),
                                "near_uniform": {"splits": near_uniform, **base.to_dict()}}
        lines.append(_schedule_table("best split", plan.splits, rep))
        lines.append(_schedule_table("near-uniform", near_uniform, base))
    if args.compare:
        cmp = compare_splits(args.compare[0], args.compare[1], cost, m)
        result["compare"] = cmp
        lines.append(f"compare {args.compare[0]} -> {args.compare[1]} (m={m}): "
                     f"bubble_fraction {cmp['baseline']['bubble_fraction']:.4f} -> "
                     f"{cmp['candidate']['bubble_fraction']:.4f}, "
                     f"bubble time reduction {100 * cmp['bubble_time_reduction']:.1f}% "
                     f"(reference: up to 10%)")
    if not result:
        raise CLIError("nothing to plan: give mesh flags, --splits, --layers/--stages or --compare", EXIT_INVALID)
    print(json.dumps(result, indent=2))
    for line in lines:
        print(line, file=sys.stderr)
    return status


# -- eval -------------------------------------------------------------------------------


def cmd_eval(args) -> int:
    if not (Path(args.checkpoint) / "manifest.json").exists():
        raise CLIError(f"checkpoint {args.checkpoint} not found", EXIT_IO)
    ckpt = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config, args.set)
    model_cfg = cfg.model if (args.config or args.set) else None
    data = TokenData(cfg.data, ckpt.arch.get("vocab_size", cfg.model.vocab_size))
    loss = evaluate_loss(ckpt, data, args.batches, args.batch_size, model_cfg)
    out = {"checkpoint": args.checkpoint, "kind": ckpt.kind, "eval_loss": loss,
           "tokens_trained": ckpt.meta.get("tokens_trained")}
    if ckpt.kind == "moe":
        out["expert_similarity"] = expert_similarity(ckpt)
    print(json.dumps(out))
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moelab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"moelab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a dense or MoE model")
    t.add_argument("config", nargs="?", help="TOML config file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. model.gating.normalize=true")
    t.add_argument("--from-manifest", help="re-run the configuration recorded in a run's manifest.json")
    t.add_argument("--out", help=f"run directory (default ${OUTPUT_ROOT_ENV}/<run.name>)")
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("upcycle", help="build an MoE checkpoint from dense ones")
    u.add_argument("dense", nargs="+", help="dense checkpoint directories")
    u.add_argument("--mode", choices=("replicate", "specialized"), default="replicate")
    u.add_argument("--n-experts", type=int)
    u.add_argument("--copies", type=_int_list, help="experts per source, e.g. 3,3,1,1")
    u.add_argument("--gate-init-scale", type=float, default=0.02)
    u.add_argument("--moe-layer-frequency", type=int, default=1)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_upcycle)

    c = sub.add_parser("compare", help="token-aligned comparison of run directories")
    c.add_argument("runs", nargs="+")
    c.add_argument("--csv", help=f"CSV output (default ${OUTPUT_ROOT_ENV}/compare.csv)")
    c.set_defaults(func=cmd_compare)

    pl = sub.add_parser("plan", help="check device meshes and simulate pipeline schedules")
    pl.add_argument("--world", type=int)
    pl.add_argument("--pp", type=int)
    pl.add_argument("--dp", type=int)
    pl.add_argument("--tp", type=int)
    pl.add_argument("--ep", type=int, help="default: implied by --strategy")
    pl.add_argument("--strategy", default="EDP", type=str.upper)
    pl.add_argument("--n-experts", type=int, default=16)
    pl.add_argument("--tokens", type=int, default=4096, help="tokens per device for message counts")
    pl.add_argument("--top-k", type=int, default=2)
    pl.add_argument("--layers", type=int)
    pl.add_argument("--stages", type=int)
    pl.add_argument("--splits", type=_int_list)
    pl.add_argument("--compare", type=_int_list, nargs=2, metavar=("BASELINE", "CANDIDATE"))
    pl.add_argument("--microbatches", "-m", type=int, default=8)
    pl.add_argument("--t-layer", type=float, default=1.0)
    pl.add_argument("--t-loss", type=float, help="default 2 * t_layer")
    pl.add_argument("--backward-multiplier", type=float, default=2.0)
    pl.add_argument("--hop-cost", type=float, default=0.0)
    pl.set_defaults(func=cmd_plan)

    e = sub.add_parser("eval", help="evaluation loss of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--config")
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    e.add_argument("--batches", type=int, default=4)
    e.add_argument("--batch-size", type=int, default=8)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ValidationError as exc:
        print("invalid configuration:\n" + format_validation_error(exc), file=sys.stderr)
        return EXIT_INVALID
    except (ParameterError, ConsistencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, CheckpointFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, MoELabError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
