"""Angular-distance redundancy analysis over decoder layers.

For each utterance the decoder's last-token residual states h_0..h_m are
captured and the angular distance between h_l and h_{l+n} is averaged over
the dataset into a DistanceMatrix. The start index minimizing each block
size's row is the candidate block to remove; the sequence of minima over n
is the pruning path.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .assembly import AssembledSequence, collate_batch
from .errors import (
    DataError,
    DegenerateVectorError,
    NumericError,
    RangeError,
    ShapeError,
)

# f32-captured states whose norm underflows below this are meaningless
DEGENERATE_NORM = 1e-30


def angular_distance(x, y) -> float:
    """Normalized angle between two vectors: arccos(cos_sim(x, y)) / pi.

    Symmetric, scale-invariant, and in [0, 1]: 0 for parallel, 0.5 for
    orthogonal, 1 for antipodal directions.
    """
    xv = np.asarray(x, dtype=np.float64).reshape(-1)
    yv = np.asarray(y, dtype=np.float64).reshape(-1)
    if xv.shape != yv.shape:
        raise ShapeError(f"vector shapes differ: {xv.shape} vs {yv.shape}")
    nx = np.linalg.norm(xv)
    ny = np.linalg.norm(yv)
    if nx == 0.0 or ny == 0.0:
        raise DegenerateVectorError("angular distance undefined for zero-norm vectors")
    if not (np.isfinite(xv).all() and np.isfinite(yv).all()):
        raise NumericError("angular distance got non-finite input")
    cos = np.clip(np.dot(xv, yv) / (nx * ny), -1.0, 1.0)
    return float(np.arccos(cos) / np.pi)


def pairwise_angular(states: np.ndarray) -> np.ndarray:
    """All-pairs angular distances for rows of a (k, d) state matrix."""
    s = np.asarray(states, dtype=np.float64)
    norms = np.linalg.norm(s, axis=1, keepdims=True)
    if (norms <= DEGENERATE_NORM).any():
        raise DegenerateVectorError("zero-norm state row in pairwise distances")
    unit = s / norms
    gram = np.clip(unit @ unit.T, -1.0, 1.0)
    return np.arccos(gram) / np.pi


@dataclass
class DistanceMatrix:
    """Mean angular distance d[n][l] between h_l and h_{l+n} over a dataset.

    rows[n] is a vector over start index l in 0..m-n, for block size
    n in 1..m-1, where m is the layer count and h_0 the embeddings.
    """

    rows: dict
    m: int
    sample_count: int
    skipped: int = 0
    source: str = "speech"
    dataset_id: str = ""
    fingerprint: str = ""

    def __post_init__(self):
        if self.m < 2:
            raise RangeError(f"need at least 2 layers for a distance matrix, got m={self.m}")
        for n in range(1, self.m):
            if n not in self.rows:
                raise DataError(f"distance matrix missing row for block size {n}")
            row = np.asarray(self.rows[n], dtype=np.float64)
            if row.shape != (self.m - n + 1,):
                raise ShapeError(
                    f"row n={n} must have {self.m - n + 1} entries, got {row.shape}"
                )
            if not np.isfinite(row).all():
                raise NumericError(f"non-finite distance in row n={n}")
            if (row < 0).any() or (row > 1).any():
                raise NumericError(f"distance outside [0,1] in row n={n}")
            self.rows[n] = row

    def value(self, n: int, ell: int) -> float:
        return float(self.rows[n][ell])


@dataclass
class PruningPath:
    """Per block size n, the start index minimizing mean angular distance."""

    m: int
    entries: list = field(default_factory=list)  # [{n, ell_star, distance}]
    source: str = ""
    dataset_id: str = ""
    fingerprint: str = ""

    def entry(self, n: int) -> dict:
        for e in self.entries:
            if e["n"] == n:
                return e
        raise RangeError(f"path has no entry for block size {n} (m={self.m})")


@dataclass
class PathComparison:
    agreement: float
    start_deltas: dict  # n -> ell_star_a - ell_star_b
    mean_abs_diff: Optional[float] = None  # matrix inputs only

    def to_dict(self) -> dict:
        return {
            "agreement": self.agreement,
            "start_deltas": {str(k): v for k, v in self.start_deltas.items()},
            "mean_abs_diff": self.mean_abs_diff,
        }


def _last_token_states(model, rows: Sequence[AssembledSequence],
                       batch_size: int) -> np.ndarray:
    """Capture h_0..h_m at each row's final position: (num_rows, m+1, d)."""
    out = []
    with torch.no_grad():
        for i in range(0, len(rows), batch_size):
            chunk = rows[i : i + batch_size]
            emb, _, _, lengths = collate_batch(chunk)
            _, trace = model(emb, capture=True, lengths=lengths)
            out.append(trace.states.permute(1, 0, 2).to(torch.float64).numpy())
    return np.concatenate(out, axis=0)


def build_distance_matrix(model, rows: Sequence[AssembledSequence], source: str = "speech",
                          dataset_id: str = "", batch_size: int = 16) -> DistanceMatrix:
    """Average per-example angular distances between all layer pairs.

    rows are fully assembled sequences (text mode simply assembles without
    the speech block). Examples with a degenerate (zero) hidden state are
    skipped, counted, and surfaced as a warning rather than poisoning the
    mean.
    """
    if source not in ("text", "speech"):
        raise DataError(f"source tag must be 'text' or 'speech', got {source!r}")
    if not rows:
        raise DataError("cannot analyze an empty dataset")
    states = _last_token_states(model, rows, batch_size)
    m = states.shape[1] - 1
    acc = np.zeros((m + 1, m + 1), dtype=np.float64)
    used = 0
    skipped = 0
    for ex in states:
        try:
            acc += pairwise_angular(ex)
            used += 1
        except DegenerateVectorError:
            skipped += 1
    if skipped:
        warnings.warn(
            f"skipped {skipped} example(s) with degenerate hidden states "
            f"({used} used)", RuntimeWarning, stacklevel=2,
        )
    if used == 0:
        raise DataError("all examples had degenerate hidden states")
    mean = acc / used
    rows_out = {n: np.array([mean[l, l + n] for l in range(m - n + 1)]) for n in range(1, m)}
    return DistanceMatrix(rows=rows_out, m=m, sample_count=used, skipped=skipped,
                          source=source, dataset_id=dataset_id,
                          fingerprint=getattr(model, "fingerprint", lambda: "")())


def optimal_block(matrix: DistanceMatrix, n: int):
    """Smallest-distance start index for block size n (ties -> smallest l)."""
    if not 1 <= n <= matrix.m - 1:
        raise RangeError(f"block size must be in 1..{matrix.m - 1}, got {n}")
    row = matrix.rows[n]
    ell = int(np.argmin(row))  # argmin returns the first minimum
    return ell, float(row[ell])


def pruning_path(matrix: DistanceMatrix) -> PruningPath:
    entries = []
    for n in range(1, matrix.m):
        ell, dist = optimal_block(matrix, n)
        entries.append({"n": n, "ell_star": ell, "distance": dist})
    return PruningPath(m=matrix.m, entries=entries, source=matrix.source,
                       dataset_id=matrix.dataset_id, fingerprint=matrix.fingerprint)


def compare_paths(a: Union[PruningPath, DistanceMatrix],
                  b: Union[PruningPath, DistanceMatrix]) -> PathComparison:
    """Agreement between two pruning paths; matrix inputs add mean |dA - dB|."""
    mean_abs = None
    if isinstance(a, DistanceMatrix) and isinstance(b, DistanceMatrix):
        if a.m != b.m:
            raise ShapeError(f"matrices disagree on layer count: {a.m} vs {b.m}")
        diffs = [np.abs(a.rows[n] - b.rows[n]) for n in range(1, a.m)]
        mean_abs = float(np.concatenate(diffs).mean())
    pa = pruning_path(a) if isinstance(a, DistanceMatrix) else a
    pb = pruning_path(b) if isinstance(b, DistanceMatrix) else b
    if pa.m != pb.m:
        raise ShapeError(f"paths disagree on layer count: {pa.m} vs {pb.m}")
    deltas = {}
    agree = 0
    sizes = range(1, pa.m)
    for n in sizes:
        ea, eb = pa.entry(n), pb.entry(n)
        deltas[n] = ea["ell_star"] - eb["ell_star"]
        agree += ea["ell_star"] == eb["ell_star"]
    return PathComparison(agreement=agree / len(list(sizes)), start_deltas=deltas,
                          mean_abs_diff=mean_abs)


def write_heatmap_csv(path, matrix: DistanceMatrix) -> None:
    """One line per cell, rows n ascending then l ascending, 6 decimals."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n", "ell", "distance"])
        for n in range(1, matrix.m):
            for ell, v in enumerate(matrix.rows[n]):
                w.writerow([n, ell, f"{v:.6f}"])


def read_heatmap_csv(path) -> DistanceMatrix:
    cells = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["n", "ell", "distance"]:
            raise DataError(f"{path}: expected header n,ell,distance, got {reader.fieldnames}")
        for rec in reader:
            cells[(int(rec["n"]), int(rec["ell"]))] = float(rec["distance"])
    if not cells:
        raise DataError(f"{path}: no distance cells")
    m = max(n for n, _ in cells) + 1
    rows = {}
    for n in range(1, m):
        try:
            rows[n] = np.array([cells[(n, l)] for l in range(m - n + 1)])
        except KeyError as e:
            raise DataError(f"{path}: incomplete matrix, missing cell {e}") from e
    return DistanceMatrix(rows=rows, m=m, sample_count=0)


def write_path_json(path, p: PruningPath) -> None:
    doc = {
        "m": p.m,
        "entries": p.entries,
        "source": p.source,
        "dataset": p.dataset_id,
        "fingerprint": p.fingerprint,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_path_json(path) -> PruningPath:
    with open(path) as f:
        doc = json.load(f)
    for key in ("m", "entries"):
        if key not in doc:
            raise DataError(f"{path}: pruning path JSON missing {key!r}")
    return PruningPath(m=doc["m"], entries=doc["entries"], source=doc.get("source", ""),
                       dataset_id=doc.get("dataset", ""),
                       fingerprint=doc.get("fingerprint", ""))
