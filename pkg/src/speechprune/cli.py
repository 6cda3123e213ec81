"""Command-line workflow: gen, train, analyze, prune, heal, eval, sweep,
and path comparison.

Every command resolves one --seed into labeled sub-seeds, writes its
artifacts plus a run manifest into --out, and exits 0 on success with
distinct nonzero codes for configuration, data, and numeric failures.
A YAML file passed via --config supplies defaults for any long flag
(dashes become underscores); explicit flags win.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    SynthConfig,
    assemble_utterance,
    dataset_hash,
    derive_seed,
    gen_dataset,
    load_dataset,
    save_dataset,
)
from .errors import (
    ConfigurationError,
    DataError,
    LossUndefinedError,
    MetricError,
    NumericError,
    RangeError,
    ShapeError,
    SpeechPruneError,
)
from .evaluation import (
    baseline_scores,
    make_eval_report,
    read_eval_report,
    score_utterances,
    write_eval_report,
)
from .model import ModelConfig, attach_lora, init_decoder, merge_lora
from .assembly import Projector
from .redundancy import (
    DistanceMatrix,
    PruningPath,
    build_distance_matrix,
    compare_paths,
    pruning_path,
    read_heatmap_csv,
    read_path_json,
    write_heatmap_csv,
    write_path_json,
)
from .surgery import (
    HEALING_STRATEGIES,
    Provenance,
    SurgeryPlan,
    apply_healing,
    canonical_strategy,
    prune_block,
)
from .training import TrainConfig, run_training, write_loss_csv

OUT_ROOT_ENV = "SPEECHPRUNE_OUT"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _exit_code_for(err: Exception) -> int:
    if isinstance(err, (ConfigurationError, ShapeError, LossUndefinedError)):
        return EXIT_CONFIG
    if isinstance(err, (DataError, MetricError, FileNotFoundError)):
        return EXIT_DATA
    if isinstance(err, NumericError):
        return EXIT_NUMERIC
    return EXIT_FAILURE


def _write_json(path, doc) -> None:
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _write_text(path, text) -> None:
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def _sha256_file(path) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()


def _resolve_out(args) -> str:
    out = args.out
    if out is None:
        root = os.environ.get(OUT_ROOT_ENV)
        if root is None:
            raise ConfigurationError(
                f"--out is required (or set {OUT_ROOT_ENV} for a default root)"
            )
        out = os.path.join(root, args.command.replace("-", "_"))
    os.makedirs(out, exist_ok=True)
    return out


class Manifest:
    """Collects one command's inputs, outputs, and seeds; written last."""

    def __init__(self, args, out_dir: str):
        skip = {"func", "config", "out", "command"}
        self.config = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
        self.doc = {
            "command": args.command,
            "tool_version": __version__,
            "config": self.config,
            "config_sha256": hashlib.sha256(
                json.dumps(self.config, sort_keys=True, default=str).encode()
            ).hexdigest(),
            "inputs": {},
            "outputs": [],
            "seeds": {},
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        self.out_dir = out_dir

    def add_input(self, name: str, path: str) -> None:
        path = os.fspath(path)
        entry = {"path": path}
        if os.path.isdir(path):
            entry["sha256"] = dataset_hash(path)
        elif os.path.isfile(path):
            entry["sha256"] = _sha256_file(path)
        self.doc["inputs"][name] = entry

    def add_output(self, path: str) -> str:
        full = os.path.join(self.out_dir, path)
        self.doc["outputs"].append(path)
        return full

    def add_seed(self, label: str, value: int) -> int:
        self.doc["seeds"][label] = value
        return value

    def write(self) -> None:
        self.doc["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        _write_json(os.path.join(self.out_dir, "run_manifest.json"), self.doc)


def _dataset_tag(path: str, split: str) -> str:
    return f"{os.path.basename(os.path.normpath(path))}:{split}"


def _original_layer_count(model) -> int:
    return model.config.num_layers


def _drop_fraction_of(model) -> float:
    orig = _original_layer_count(model)
    return (orig - model.layer_count) / orig


def _fraction_to_block_size(fraction: float, original_layers: int) -> int:
    """Nearest achievable block size for a drop fraction, half rounding up."""
    if fraction < 0 or fraction >= 1:
        raise RangeError(f"drop fraction must be in [0, 1), got {fraction}")
    return int(np.floor(fraction * original_layers + 0.5))


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    out = _resolve_out(args)
    man = Manifest(args, out)
    config = SynthConfig(
        vocab_size=args.vocab_size,
        min_len=args.min_len,
        max_len=args.max_len,
        min_frames=args.min_frames,
        max_frames=args.max_frames,
        d_e=args.d_e,
        noise_std=args.noise_std,
        task=args.task,
        translation_seed=args.translation_seed,
        corpus_size=args.corpus_size,
        seed=man.add_seed("corpus", derive_seed(args.seed, "corpus")),
    )
    dataset = gen_dataset(config)
    save_dataset(out, dataset)
    for name in ("manifest.json", "index.tsv"):
        man.doc["outputs"].append(name)
    man.write()
    sizes = {k: len(dataset.split(k)) for k in ("train", "dev", "test")}
    print(f"wrote {config.corpus_size} utterances ({sizes}) to {out}")
    return EXIT_OK


def _projector_for(args, d_e: int, d_model: int, seed: int) -> Projector:
    hidden = args.proj_hidden if args.proj_hidden else d_model
    return Projector(args.stack * d_e, hidden, d_model, stack_k=args.stack, seed=seed)


def cmd_train(args) -> int:
    out = _resolve_out(args)
    man = Manifest(args, out)
    man.add_input("dataset", args.dataset)
    dataset = load_dataset(args.dataset)
    d_mlp = args.d_mlp if args.d_mlp else 4 * args.d_model
    mconfig = ModelConfig(
        num_layers=args.layers, d_model=args.d_model, num_heads=args.heads,
        d_mlp=d_mlp, vocab_size=dataset.config.vocab_size,
        max_seq_len=args.max_seq_len,
        seed=man.add_seed("model", derive_seed(args.seed, "model")),
    )
    model = init_decoder(mconfig)
    if args.lora:
        attach_lora(model, targets=tuple(args.lora_targets.split(",")),
                    rank=args.lora_rank, alpha=args.lora_alpha,
                    dropout_p=args.lora_dropout,
                    seed=man.add_seed("lora", derive_seed(args.seed, "lora")))
    projector = _projector_for(args, dataset.config.d_e, args.d_model,
                               man.add_seed("projector", derive_seed(args.seed, "projector")))
    tconfig = TrainConfig(
        total_steps=args.steps, peak_lr=args.lr, warmdown_fraction=args.warmdown,
        grad_clip_norm=args.clip, batch_size=args.batch_size,
        seed=man.add_seed("train", derive_seed(args.seed, "train")),
    )
    report = run_training(model, projector, dataset.train, tconfig, mode="base")
    events = [{"kind": "base-train", "steps": report.steps_executed,
               "final_loss": report.final_loss, "lora": bool(args.lora),
               "train_config": tconfig.to_dict()}]
    if args.lora:
        # Fold the trained adapters into the base weights so the saved
        # checkpoint is a plain decoder; later healing stages attach their
        # own adapters and would otherwise collide with these.
        merge_lora(model)
        events.append({"kind": "lora-merged", "targets": args.lora_targets,
                       "rank": args.lora_rank})
    provenance = Provenance(
        original_layer_ids=model.original_layer_ids,
        plans=[],
        train_steps=report.steps_executed,
        seeds=dict(man.doc["seeds"]),
        events=events,
    )
    save_checkpoint(man.add_output("model.ckpt"), model, projector, provenance)
    write_loss_csv(man.add_output("loss.csv"), report)
    from .plots import plot_loss

    plot_loss(report.losses, report.lrs, man.add_output("loss.png"))
    man.write()
    print(f"trained {args.steps} steps, final loss {report.final_loss:.4f}; "
          f"checkpoint at {os.path.join(out, 'model.ckpt')}")
    return EXIT_OK


def _analysis_rows(model, projector, utterances, mode: str, limit: int = 0):
    if limit:
        utterances = utterances[:limit]
    with torch.no_grad():
        return [assemble_utterance(u, projector, model.embed.weight, mode=mode)
                for u in utterances]


def cmd_analyze(args) -> int:
    out = _resolve_out(args)
    man = Manifest(args, out)
    man.add_input("checkpoint", args.checkpoint)
    man.add_input("dataset", args.dataset)
    model, projector, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    utts = dataset.split(args.split)
    rows = _analysis_rows(model, projector, utts, args.mode, args.limit)
    matrix = build_distance_matrix(
        model, rows, source=args.mode,
        dataset_id=_dataset_tag(args.dataset, args.split),
        batch_size=args.batch_size,
    )
    path = pruning_path(matrix)
    write_heatmap_csv(man.add_output("heatmap.csv"), matrix)
    write_path_json(man.add_output("path.json"), path)
    from .plots import plot_heatmap

    plot_heatmap(matrix, man.add_output("heatmap.png"))
    man.write()
    best = min(path.entries, key=lambda e: e["distance"])
    print(f"analyzed {matrix.sample_count} examples ({args.mode} mode); "
          f"lowest-distance block: n={best['n']} at l={best['ell_star']} "
          f"(d={best['distance']:.4f})")
    return EXIT_OK


def _select_plan(args, model) -> SurgeryPlan:
    if args.start is not None or args.size is not None:
        if args.path or args.drop_fraction is not None:
            raise ConfigurationError("give either --start/--size or --path/--drop-fraction")
        if args.start is None or args.size is None:
            raise ConfigurationError("--start and --size go together")
        return SurgeryPlan(start=args.start, size=args.size)
    if not args.path or args.drop_fraction is None:
        raise ConfigurationError("need --path with --drop-fraction (or --start/--size)")
    path = read_path_json(args.path)
    orig = _original_layer_count(model)
    if path.m != model.layer_count:
        raise ConfigurationError(
            f"path was computed for an m={path.m} stack but the checkpoint has "
            f"{model.layer_count} layers"
        )
    n = _fraction_to_block_size(args.drop_fraction, orig)
    if n == 0:
        return SurgeryPlan(start=0, size=0, fingerprint=path.fingerprint)
    if n > path.m - 1:
        raise RangeError(
            f"drop fraction {args.drop_fraction} needs n={n}, but at most "
            f"{path.m - 1} layers are removable"
        )
    entry = path.entry(n)
    if path.fingerprint and model.fingerprint() != path.fingerprint:
        print("warning: pruning path came from a different model "
              "(fingerprint mismatch); applying it anyway", file=sys.stderr)
    return SurgeryPlan(start=entry["ell_star"], size=n, fingerprint=path.fingerprint)


def cmd_prune(args) -> int:
    out = _resolve_out(args)
    man = Manifest(args, out)
    man.add_input("checkpoint", args.checkpoint)
    if args.path:
        man.add_input("path", args.path)
    model, projector, provenance = load_checkpoint(args.checkpoint)
    plan = _select_plan(args, model)
    if plan.size == 0:
        provenance.events.append({"kind": "prune-noop", "reason": "drop fraction 0"})
    else:
        prune_block(model, plan)
        provenance.plans = list(model.applied_plans)
        provenance.original_layer_ids = list(model.original_layer_ids)
        provenance.events.append({
            "kind": "prune", "start": plan.start, "size": plan.size,
            "fingerprint": plan.fingerprint,
        })
    save_checkpoint(man.add_output("pruned.ckpt"), model, projector, provenance)
    man.write()
    frac = _drop_fraction_of(model)
    print(f"kept layers {model.original_layer_ids} "
          f"({model.layer_count}/{_original_layer_count(model)}, "
          f"drop fraction {frac:.3f}); checkpoint at {os.path.join(out, 'pruned.ckpt')}")
    return EXIT_OK


def cmd_heal(args) -> int:
    out = _resolve_out(args)
    man = Manifest(args, out)
    man.add_input("checkpoint", args.checkpoint)
    man.add_input("dataset", args.dataset)
    strategy = canonical_strategy(args.strategy)
    if strategy == "none":
        raise ConfigurationError(
            "strategy 'none' has no trainable parameters; nothing to heal"
        )
    model, projector, provenance = load_checkpoint(args.checkpoint)
    if not model.applied_plans:
        raise ConfigurationError("checkpoint has no applied surgery plan to heal")
    last = model.applied_plans[-1]
    plan = SurgeryPlan(start=last["start"], size=last["size"],
                       fingerprint=last.get("fingerprint", ""), strategy=strategy)
    registry = apply_healing(
        model, projector, plan, rank=args.rank, alpha=args.alpha,
        dropout_p=args.dropout,
        seed=man.add_seed("heal-lora", derive_seed(args.seed, "heal-lora")),
    )
    dataset = load_dataset(args.dataset)
    tconfig = TrainConfig(
        total_steps=args.steps, peak_lr=args.lr, warmdown_fraction=args.warmdown,
        grad_clip_norm=args.clip, batch_size=args.batch_size,
        seed=man.add_seed("heal-train", derive_seed(args.seed, "heal-train")),
    )
    report = run_training(model, projector, dataset.split(args.split), tconfig,
                          mode="heal", registry=registry)
    provenance.train_steps += report.steps_executed
    provenance.seeds.update(man.doc["seeds"])
    provenance.events.append({
        "kind": "heal", "strategy": strategy, "steps": report.steps_executed,
        "final_loss": report.final_loss, "train_config": tconfig.to_dict(),
    })
    save_checkpoint(man.add_output("healed.ckpt"), model, projector, provenance)
    write_loss_csv(man.add_output("loss.csv"), report)
    from .plots import plot_loss

    plot_loss(report.losses, report.lrs, man.add_output("loss.png"))
    man.write()
    print(f"healed ({strategy}) for {args.steps} steps, final loss "
          f"{report.final_loss:.4f}; checkpoint at {os.path.join(out, 'healed.ckpt')}")
    return EXIT_OK


def _metric_for(dataset, override: str) -> str:
    if override != "auto":
        return override
    return "wer" if dataset.config.task == "transcribe" else "bleu"


def cmd_eval(args) -> int:
    out = _resolve_out(args)
    man = Manifest(args, out)
    man.add_input("checkpoint", args.checkpoint)
    model, projector, _ = load_checkpoint(args.checkpoint)
    base = None
    if args.baseline:
        man.add_input("baseline", args.baseline)
        base = baseline_scores(read_eval_report(args.baseline))
    fraction = _drop_fraction_of(model)
    thresholds = {"wer": args.wer_threshold, "bleu": args.bleu_threshold}
    t0 = time.perf_counter()
    ds_entries = []
    for dpath in args.datasets:
        man.add_input(f"dataset:{dpath}", dpath)
        dataset = load_dataset(dpath)
        metric = _metric_for(dataset, args.metric)
        tag = _dataset_tag(dpath, args.split)
        score = score_utterances(model, projector, dataset.split(args.split), metric,
                                 max_len=args.max_len or None)
        if base is not None:
            key = (tag, metric)
            if key not in base:
                raise DataError(f"baseline report has no score for {key}")
            s0 = base[key]
            delta = (score - s0) / s0
        elif fraction == 0:
            s0, delta = score, 0.0
        else:
            s0, delta = None, None
        ds_entries.append({"id": tag, "metric": metric, "s": score, "s0": s0,
                           "delta": delta})
    timing = {"eval_seconds": time.perf_counter() - t0}
    report = make_eval_report(args.checkpoint, [{"fraction": fraction,
                                                 "datasets": ds_entries}],
                              thresholds=thresholds, timing=timing)
    write_eval_report(man.add_output("report.json"), report)
    man.write()
    for ds in ds_entries:
        line = f"{ds['id']}: {ds['metric']}={ds['s']:.2f}"
        if ds["delta"] is not None:
            line += f" (delta {ds['delta']:+.4f})"
        print(line)
    return EXIT_OK


def _degradation_csv(rows) -> str:
    lines = ["drop,dataset,metric,delta"]
    for r in rows:
        lines.append(f"{r['drop']:.6f},{r['dataset']},{r['metric']},{r['delta']:.6f}")
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    out = _resolve_out(args)
    man = Manifest(args, out)
    man.add_input("checkpoint", args.checkpoint)
    man.add_input("dataset", args.dataset)
    drops = [float(x) for x in args.drops.split(",") if x.strip()]
    strategies = [canonical_strategy(s) for s in args.strategies.split(",") if s.strip()]
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    if not drops or not strategies or not splits:
        raise ConfigurationError("sweep needs nonempty --drops, --strategies, --splits")
    dataset = load_dataset(args.dataset)
    model0, projector0, _ = load_checkpoint(args.checkpoint)
    orig = _original_layer_count(model0)
    metric = _metric_for(dataset, args.metric)
    thresholds = {"wer": args.wer_threshold, "bleu": args.bleu_threshold}

    # baseline scores at drop 0
    s0 = {}
    for split in splits:
        tag = _dataset_tag(args.dataset, split)
        s0[tag] = score_utterances(model0, projector0, dataset.split(split), metric)

    # analysis once, on the unpruned model
    rows = _analysis_rows(model0, projector0, dataset.split(args.analyze_split),
                          "speech", args.limit)
    matrix = build_distance_matrix(model0, rows, source="speech",
                                   dataset_id=_dataset_tag(args.dataset, args.analyze_split))
    path = pruning_path(matrix)
    write_heatmap_csv(man.add_output("heatmap.csv"), matrix)
    write_path_json(man.add_output("path.json"), path)

    curve_rows = []
    reports = {}
    for strategy in strategies:
        reports[strategy] = []
    for fraction in sorted(drops):
        n = _fraction_to_block_size(fraction, orig)
        if n == 0:
            raise ConfigurationError(
                f"drop {fraction} rounds to zero removed layers; use cmd_eval "
                f"for the unpruned baseline"
            )
        if n > matrix.m - 1:
            raise RangeError(f"drop {fraction} needs n={n}; max removable is {matrix.m - 1}")
        entry = path.entry(n)
        actual = n / orig
        for strategy in strategies:
            model = copy.deepcopy(model0)
            projector = copy.deepcopy(projector0)
            plan = SurgeryPlan(start=entry["ell_star"], size=n,
                               fingerprint=path.fingerprint, strategy=strategy)
            prune_block(model, plan)
            if strategy != "none":
                registry = apply_healing(
                    model, projector, plan, rank=args.rank, alpha=args.alpha,
                    dropout_p=args.dropout,
                    seed=derive_seed(args.seed, f"sweep/{fraction}/{strategy}/lora"),
                )
                tconfig = TrainConfig(
                    total_steps=args.heal_steps, peak_lr=args.heal_lr,
                    warmdown_fraction=args.warmdown, batch_size=args.batch_size,
                    seed=derive_seed(args.seed, f"sweep/{fraction}/{strategy}/train"),
                )
                run_training(model, projector, dataset.train, tconfig,
                             mode="heal", registry=registry)
            ds_entries = []
            for split in splits:
                tag = _dataset_tag(args.dataset, split)
                s = score_utterances(model, projector, dataset.split(split), metric)
                delta = (s - s0[tag]) / s0[tag]
                ds_entries.append({"id": tag, "metric": metric, "s": s,
                                   "s0": s0[tag], "delta": delta})
                curve_rows.append({"drop": actual, "strategy": strategy,
                                   "dataset": tag, "metric": metric, "delta": delta})
            reports[strategy].append({"fraction": actual, "datasets": ds_entries})

    combined = ["drop,strategy,dataset,metric,delta"]
    for r in curve_rows:
        combined.append(f"{r['drop']:.6f},{r['strategy']},{r['dataset']},"
                        f"{r['metric']},{r['delta']:.6f}")
    _write_text(man.add_output("sweep.csv"), "\n".join(combined) + "\n")
    for strategy in strategies:
        srows = [r for r in curve_rows if r["strategy"] == strategy]
        tag = strategy.replace("-", "_")
        _write_text(man.add_output(f"curve_{tag}.csv"), _degradation_csv(srows))
        baseline_entry = {"fraction": 0.0, "datasets": [
            {"id": t, "metric": metric, "s": s0[t], "s0": s0[t], "delta": 0.0}
            for t in sorted(s0)
        ]}
        report = make_eval_report(args.checkpoint,
                                  [baseline_entry] + reports[strategy],
                                  thresholds=thresholds)
        write_eval_report(man.add_output(f"report_{tag}.json"), report)
    from .plots import plot_degradation

    plot_degradation(curve_rows, thresholds, man.add_output("degradation.png"))
    man.write()
    print(f"swept {len(drops)} drop level(s) x {len(strategies)} strategies "
          f"x {len(splits)} split(s); outputs in {out}")
    return EXIT_OK


def _load_path_or_matrix(path: str):
    if path.endswith(".csv"):
        return read_heatmap_csv(path)
    return read_path_json(path)


def cmd_compare_paths(args) -> int:
    out = _resolve_out(args)
    man = Manifest(args, out)
    man.add_input("a", args.a)
    man.add_input("b", args.b)
    a = _load_path_or_matrix(args.a)
    b = _load_path_or_matrix(args.b)
    comparison = compare_paths(a, b)
    doc = comparison.to_dict()
    doc["a"] = args.a
    doc["b"] = args.b
    _write_json(man.add_output("comparison.json"), doc)
    man.write()
    mean = (f", mean |dA-dB| {comparison.mean_abs_diff:.6f}"
            if comparison.mean_abs_diff is not None else "")
    print(f"agreement {comparison.agreement:.3f}{mean}")
    return EXIT_OK


# ----------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed for this command")
    p.add_argument("--out", default=None,
                   help=f"output directory (default ${OUT_ROOT_ENV}/<command>)")
    p.add_argument("--config", default=None,
                   help="YAML file of default flag values (dashes as underscores)")


def _add_thresholds(p: argparse.ArgumentParser) -> None:
    p.add_argument("--wer-threshold", type=float, default=0.25)
    p.add_argument("--bleu-threshold", type=float, default=0.10)


def _add_heal_params(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rank", type=int, default=64, help="healing adapter rank")
    p.add_argument("--alpha", type=float, default=64.0)
    p.add_argument("--dropout", type=float, default=0.05)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="speechprune",
        description="Layer-redundancy analysis, block pruning, and adapter "
                    "healing for a toy speech-LLM decoder.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--corpus-size", type=int, default=2000)
    p.add_argument("--task", choices=("transcribe", "translate"), default="transcribe")
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=10)
    p.add_argument("--min-frames", type=int, default=2)
    p.add_argument("--max-frames", type=int, default=4)
    p.add_argument("--d-e", type=int, default=32)
    p.add_argument("--translation-seed", type=int, default=1234)
    _add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="base alignment training on a dataset")
    p.add_argument("dataset")
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-mlp", type=int, default=0, help="0 means 4*d_model")
    p.add_argument("--max-seq-len", type=int, default=512)
    p.add_argument("--stack", type=int, default=2, help="frames stacked per row")
    p.add_argument("--proj-hidden", type=int, default=0, help="0 means d_model")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--warmdown", type=float, default=0.6)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lora", action="store_true",
                   help="adapt the frozen decoder with low-rank adapters")
    p.add_argument("--lora-targets", default="attn")
    p.add_argument("--lora-rank", type=int, default=64)
    p.add_argument("--lora-alpha", type=float, default=64.0)
    p.add_argument("--lora-dropout", type=float, default=0.05)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="build the layer distance matrix and path")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--mode", choices=("speech", "text"), default="speech")
    p.add_argument("--split", default="dev")
    p.add_argument("--limit", type=int, default=0, help="cap examples (0 = all)")
    p.add_argument("--batch-size", type=int, default=16)
    _add_common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("prune", help="remove a block of decoder layers")
    p.add_argument("checkpoint")
    p.add_argument("--path", default=None, help="path JSON from analyze")
    p.add_argument("--drop-fraction", type=float, default=None)
    p.add_argument("--start", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("heal", help="train healing parameters on a pruned checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--strategy", default="joint",
                   help=f"one of {', '.join(HEALING_STRATEGIES)} (or decoder/projector)")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--warmdown", type=float, default=0.6)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--split", default="train")
    _add_heal_params(p)
    _add_common(p)
    p.set_defaults(func=cmd_heal)

    p = sub.add_parser("eval", help="score a checkpoint on datasets")
    p.add_argument("checkpoint")
    p.add_argument("datasets", nargs="+")
    p.add_argument("--split", default="test")
    p.add_argument("--metric", choices=("auto", "wer", "bleu"), default="auto")
    p.add_argument("--baseline", default=None, help="eval report of the unpruned model")
    p.add_argument("--max-len", type=int, default=0, help="decode cap (0 = auto)")
    _add_thresholds(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="degradation curves over drops and strategies")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--drops", default="0.125,0.25,0.375")
    p.add_argument("--strategies", default="none,decoder,projector,joint")
    p.add_argument("--splits", default="dev,test")
    p.add_argument("--analyze-split", default="dev")
    p.add_argument("--metric", choices=("auto", "wer", "bleu"), default="auto")
    p.add_argument("--heal-steps", type=int, default=500)
    p.add_argument("--heal-lr", type=float, default=5e-4)
    p.add_argument("--warmdown", type=float, default=0.6)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--limit", type=int, default=0)
    _add_heal_params(p)
    _add_thresholds(p)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare-paths", help="agreement between two pruning paths")
    p.add_argument("a", help="path JSON or heatmap CSV")
    p.add_argument("b", help="path JSON or heatmap CSV")
    _add_common(p)
    p.set_defaults(func=cmd_compare_paths)

    subparsers.update(sub.choices)
    return parser, subparsers


def _apply_config_file(parser, subparsers, argv) -> argparse.Namespace:
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv)
    if known.config:
        import yaml

        with open(known.config) as f:
            overrides = yaml.safe_load(f) or {}
        if not isinstance(overrides, dict):
            raise ConfigurationError(f"{known.config}: config must be a mapping")
        for sp in subparsers.values():
            valid = {a.dest for a in sp._actions}  # noqa: SLF001
            sp.set_defaults(**{k: v for k, v in overrides.items() if k in valid})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    try:
        args = _apply_config_file(parser, subparsers, argv)
        return args.func(args)
    except SpeechPruneError as err:
        print(f"error: {err}", file=sys.stderr)
        return _exit_code_for(err)
    except FileNotFoundError as err:
        print(f"error: missing file: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
