"""Greedy decoding, dataset scoring, eval reports, and speed benchmarks."""

from __future__ import annotations

import json
import statistics
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .assembly import FeatureMatrix
from .data import EOS_ID, Utterance, assemble_utterance, words_for_tokens
from .errors import DataError, RangeError, SpeechPruneError
from .metrics import (
    DEFAULT_THRESHOLDS,
    bleu,
    max_prunable_fraction,
    relative_degradation,
    wer,
)
from .model import DecoderModel


def greedy_decode(model: DecoderModel, projector, features: Optional[FeatureMatrix],
                  prompt_ids: Sequence[int], max_len: int,
                  eos_id: int = EOS_ID) -> list:
    """Argmax continuation until EOS or max_len tokens; EOS is not returned.

    Ties pick the smallest token id. Decoding is per utterance with no
    padding, so results cannot depend on batch composition.
    """
    if max_len < 1:
        raise RangeError(f"max_len must be >= 1, got {max_len}")
    from .assembly import assemble, project, stack_frames

    speech = None
    if features is not None:
        speech = project(projector, stack_frames(features, projector.stack_k))
    context = assemble(speech, list(prompt_ids), [], model.embed.weight)
    emb = context.embeddings
    out = []
    with torch.no_grad():
        for _ in range(max_len):
            if emb.shape[0] >= model.config.max_seq_len:
                break
            logits, _ = model(emb)
            nxt = int(np.argmax(logits[-1].numpy()))  # first max = smallest id
            if nxt == eos_id:
                break
            out.append(nxt)
            emb = torch.cat([emb, model.embed.weight[nxt][None, :]], dim=0)
    return out


def transcribe_utterances(model: DecoderModel, projector, utterances: Sequence[Utterance],
                          max_len: Optional[int] = None) -> list:
    """Greedy-decode every utterance; returns hypothesis strings."""
    if not utterances:
        raise DataError("no utterances to decode")
    from .data import prompt_ids_for_task

    if max_len is None:
        max_len = 2 * max(len(u.target) for u in utterances) + 4
    hyps = []
    for utt in utterances:
        ids = greedy_decode(model, projector, utt.features,
                            prompt_ids_for_task(utt.task), max_len)
        hyps.append(words_for_tokens(ids))
    return hyps


def score_utterances(model: DecoderModel, projector, utterances: Sequence[Utterance],
                     metric: str, max_len: Optional[int] = None) -> float:
    refs = [words_for_tokens(u.target) for u in utterances]
    hyps = transcribe_utterances(model, projector, utterances, max_len=max_len)
    return wer(refs, hyps) if metric == "wer" else bleu(refs, hyps)


def make_eval_report(model_tag: str, drops: list, thresholds: Optional[dict] = None,
                     timing: Optional[dict] = None) -> dict:
    """Assemble the report document; computes max_prunable_fraction.

    drops: [{fraction, datasets: [DegradationRecord-like dicts]}]. The
    fraction 0 entry (baseline) is excluded from the prunable scan.
    """
    thresholds = dict(thresholds or DEFAULT_THRESHOLDS)
    records = []
    for entry in drops:
        for ds in entry["datasets"]:
            if entry["fraction"] > 0 and ds.get("s0") is not None:
                records.append(relative_degradation(
                    ds["s"], ds["s0"], ds["metric"], dataset_id=ds["id"],
                    drop_fraction=entry["fraction"],
                ))
    mpf = max_prunable_fraction(records, thresholds) if records else None
    return {
        "model": model_tag,
        "drops": drops,
        "thresholds": thresholds,
        "max_prunable_fraction": mpf,
        "timing": timing or {},
    }


def write_eval_report(path, report: dict) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def read_eval_report(path) -> dict:
    with open(path) as f:
        doc = json.load(f)
    if "drops" not in doc:
        raise DataError(f"{path}: not an eval report (no drops field)")
    return doc


def baseline_scores(report: dict) -> dict:
    """(dataset id, metric) -> baseline score s0 from a report's records."""
    out = {}
    for entry in report["drops"]:
        for ds in entry["datasets"]:
            key = (ds["id"], ds["metric"])
            if entry["fraction"] == 0:
                out[key] = ds["s"]
            else:
                out.setdefault(key, ds.get("s0"))
    return {k: v for k, v in out.items() if v is not None}


@dataclass
class BenchWorkload:
    batch: int = 8
    seq_len: int = 256
    runs: int = 30
    warmup: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.runs < 20:
            raise RangeError("need at least 20 timed runs for a stable median")
        if min(self.batch, self.seq_len, self.warmup + 1) < 1:
            raise RangeError("workload dimensions must be positive")


def _probe_memory(ckpt_path: str, workload: BenchWorkload) -> int:
    """Peak RSS (KiB) of a fresh process that loads and runs the model once."""
    proc = subprocess.run(
        [sys.executable, "-m", "speechprune._memprobe", ckpt_path,
         str(workload.batch), str(workload.seq_len), str(workload.seed)],
        capture_output=True, text=True,
    )
    if proc.returncode != 0:
        raise SpeechPruneError(f"memory probe failed: {proc.stderr.strip()}")
    return int(json.loads(proc.stdout)["peak_rss_kib"])


def benchmark_forward(variants: dict, workload: Optional[BenchWorkload] = None,
                      measure_memory: bool = True) -> dict:
    """Median forward wall-clock and peak memory per model variant.

    All variants see the identical synthetic workload; warmup runs are
    discarded. Memory is the high-water RSS of an isolated process per
    variant, so allocator reuse in this process cannot mask differences.
    """
    workload = workload or BenchWorkload()
    results = {}
    for name, model in variants.items():
        g = torch.Generator().manual_seed(workload.seed)
        x = torch.randn(workload.batch, workload.seq_len, model.config.d_model,
                        generator=g)
        model.eval()
        with torch.no_grad():
            for _ in range(workload.warmup):
                model(x)
            times = []
            for _ in range(workload.runs):
                t0 = time.perf_counter()
                model(x)
                times.append(time.perf_counter() - t0)
        entry = {
            "median_forward_s": statistics.median(times),
            "runs": workload.runs,
            "layer_count": model.layer_count,
            "param_bytes": 4 * sum(p.numel() for p in model.parameters()),
        }
        if measure_memory:
            from .checkpoint import save_checkpoint
            from .surgery import Provenance

            with tempfile.TemporaryDirectory() as td:
                ckpt = f"{td}/bench.ckpt"
                save_checkpoint(ckpt, model, None,
                                Provenance(original_layer_ids=model.original_layer_ids,
                                           plans=model.applied_plans))
                entry["peak_rss_kib"] = _probe_memory(ckpt, workload)
        results[name] = entry
    return results


def speedup(base_seconds: float, variant_seconds: float) -> float:
    """Fractional wall-clock reduction relative to the base variant."""
    if base_seconds <= 0:
        raise RangeError("base timing must be positive")
    return (base_seconds - variant_seconds) / base_seconds
