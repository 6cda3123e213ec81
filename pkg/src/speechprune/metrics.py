"""Text normalization, WER, corpus BLEU, and degradation bookkeeping.

WER is corpus-pooled: total word edits over total reference words. BLEU
is corpus-level BLEU-4 with exponential smoothing for zero n-gram counts
and the usual brevity penalty. The normalizer is deliberately simple
(lowercase, strip punctuation, collapse whitespace) and documented here
rather than chasing any external tool's exact behavior.
"""

from __future__ import annotations

import math
import re
import string
import warnings
from collections import Counter
from dataclasses import dataclass

from .errors import MetricError

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})
_DETACH_RE = re.compile(r"([^\w\s])")

DEFAULT_THRESHOLDS = {"wer": 0.25, "bleu": 0.10}


def normalize_text(s: str) -> str:
    """Lowercase, drop punctuation, collapse runs of whitespace."""
    return " ".join(s.lower().translate(_PUNCT_TABLE).split())


def word_edit_distance(ref_words, hyp_words) -> int:
    """Uniform-cost word-level Levenshtein distance (two-row DP)."""
    r, h = list(ref_words), list(hyp_words)
    if not r:
        return len(h)
    prev = list(range(len(h) + 1))
    for i, rw in enumerate(r, start=1):
        cur = [i] + [0] * len(h)
        for j, hw in enumerate(h, start=1):
            cur[j] = min(
                prev[j] + 1,                        # deletion
                cur[j - 1] + 1,                     # insertion
                prev[j - 1] + (rw != hw),           # substitution / match
            )
        prev = cur
    return prev[-1]


def wer(refs, hyps) -> float:
    """Corpus-pooled word error rate as a percentage."""
    if len(refs) != len(hyps):
        raise MetricError(f"refs/hyps length mismatch: {len(refs)} vs {len(hyps)}")
    if not refs:
        raise MetricError("empty corpus: WER undefined")
    edits = 0
    words = 0
    for ref, hyp in zip(refs, hyps):
        rw = normalize_text(ref).split()
        hw = normalize_text(hyp).split()
        edits += word_edit_distance(rw, hw)
        words += len(rw)
    if words == 0:
        raise MetricError("reference corpus is empty after normalization: WER undefined")
    return 100.0 * edits / words


def bleu_tokenize(s: str) -> list:
    """Detach punctuation into separate tokens, then split on whitespace."""
    return _DETACH_RE.sub(r" \1 ", s).split()


def bleu(refs, hyps, max_order: int = 4) -> float:
    """Corpus BLEU with exponential smoothing for zero n-gram counts.

    The k-th n-gram order with zero matches gets precision 1/(2^k * total);
    brevity penalty is exp(1 - r/c) when the hypothesis corpus is shorter
    than the reference corpus.
    """
    if len(refs) != len(hyps):
        raise MetricError(f"refs/hyps length mismatch: {len(refs)} vs {len(hyps)}")
    if not refs:
        raise MetricError("empty corpus: BLEU undefined")
    total = [0] * max_order
    correct = [0] * max_order
    ref_len = 0
    hyp_len = 0
    for ref, hyp in zip(refs, hyps):
        rt = bleu_tokenize(ref)
        ht = bleu_tokenize(hyp)
        ref_len += len(rt)
        hyp_len += len(ht)
        for n in range(1, max_order + 1):
            hyp_grams = Counter(tuple(ht[i: i + n]) for i in range(len(ht) - n + 1))
            ref_grams = Counter(tuple(rt[i: i + n]) for i in range(len(rt) - n + 1))
            total[n - 1] += max(len(ht) - n + 1, 0)
            correct[n - 1] += sum(min(c, ref_grams[g]) for g, c in hyp_grams.items())
    if hyp_len == 0:
        warnings.warn("hypothesis corpus is empty; BLEU reported as 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    if 0 in total:
        warnings.warn(
            f"corpus has no {total.index(0) + 1}-grams; BLEU reported as 0",
            RuntimeWarning, stacklevel=2,
        )
        return 0.0
    smooth = 1.0
    log_sum = 0.0
    for n in range(max_order):
        if correct[n] > 0:
            p = correct[n] / total[n]
        else:
            smooth *= 2.0
            p = 1.0 / (smooth * total[n])
        log_sum += math.log(p)
    geo_mean = math.exp(log_sum / max_order)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * geo_mean


@dataclass
class DegradationRecord:
    metric: str
    baseline: float
    score: float
    delta: float
    dataset_id: str = ""
    drop_fraction: float = 0.0

    def satisfies(self, thresholds=None) -> bool:
        """Within tolerance: WER may rise by the threshold, BLEU may fall by it."""
        thr = (thresholds or DEFAULT_THRESHOLDS)[self.metric]
        if self.metric == "wer":
            return self.delta <= thr
        return -self.delta <= thr

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "s0": self.baseline,
            "s": self.score,
            "delta": self.delta,
            "id": self.dataset_id,
        }


def relative_degradation(s: float, s0: float, metric: str, dataset_id: str = "",
                         drop_fraction: float = 0.0) -> DegradationRecord:
    """Delta = (s - s0) / s0; positive means worse WER, better BLEU."""
    if metric not in ("wer", "bleu"):
        raise MetricError(f"metric must be 'wer' or 'bleu', got {metric!r}")
    if s0 <= 0:
        raise MetricError(f"baseline score must be positive, got {s0}")
    return DegradationRecord(metric=metric, baseline=s0, score=s,
                             delta=(s - s0) / s0, dataset_id=dataset_id,
                             drop_fraction=drop_fraction)


def max_prunable_fraction(records, thresholds=None) -> float:
    """Largest drop fraction whose records pass on every dataset at once.

    Every drop fraction must cover the same (dataset, metric) pairs;
    returns 0.0 when even the smallest drop fails somewhere.
    """
    records = list(records)
    if not records:
        raise MetricError("no degradation records supplied")
    by_drop = {}
    for rec in records:
        by_drop.setdefault(rec.drop_fraction, []).append(rec)
    coverages = {
        drop: sorted((r.dataset_id, r.metric) for r in recs)
        for drop, recs in by_drop.items()
    }
    reference = next(iter(coverages.values()))
    for drop, cov in coverages.items():
        if cov != reference:
            raise MetricError(
                f"inconsistent dataset coverage at drop {drop}: {cov} vs {reference}"
            )
    best = 0.0
    for drop in sorted(by_drop):
        if all(r.satisfies(thresholds) for r in by_drop[drop]):
            best = max(best, drop)
    return best
