"""Speech feature handling and multimodal sequence assembly.

Turns encoder feature matrices into decoder input embeddings: stack k
consecutive frames, project through a two-layer GELU bottleneck, then
concatenate [speech, prompt, target] embeddings for teacher forcing.
The loss only ever reads the target span.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    ConfigurationError,
    DataError,
    LossUndefinedError,
    NumericError,
    ShapeError,
    VocabularyError,
)

FEATURE_MAGIC = b"SPFT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIIfI")  # magic, version, frames, dim, rate_hz, payload crc32


@dataclass
class FeatureMatrix:
    """Encoder output for one utterance: (num_frames, feat_dim) float32."""

    data: np.ndarray
    frame_rate_hz: float = 50.0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ShapeError(f"feature matrix must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"feature matrix has empty axis: shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("feature matrix contains non-finite values")
        if self.frame_rate_hz <= 0:
            raise ConfigurationError("frame_rate_hz must be positive")
        self.data = arr

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.data.shape[1]


def write_features(path, feats: FeatureMatrix) -> None:
    payload = np.ascontiguousarray(feats.data, dtype="<f4").tobytes()
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, feats.num_frames,
                          feats.feat_dim, float(feats.frame_rate_hz),
                          zlib.crc32(payload) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_features(path) -> FeatureMatrix:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated feature file")
    magic, version, frames, dim, rate, crc = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature version {version}")
    payload = raw[_HEADER.size:]
    if len(payload) != frames * dim * 4:
        raise DataError(f"{path}: payload size mismatch ({len(payload)} bytes "
                        f"for {frames}x{dim} floats)")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise DataError(f"{path}: feature payload checksum mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(frames, dim).copy()
    return FeatureMatrix(data, frame_rate_hz=rate)


@dataclass
class StackedFeatures:
    """k consecutive frames concatenated per row: (floor(T'/k), k * feat_dim)."""

    rows: torch.Tensor
    k: int


def stack_frames(feats: FeatureMatrix, k: int) -> StackedFeatures:
    """Concatenate k consecutive frames along the feature axis.

    The tail remainder (num_frames mod k) is dropped. Fewer than k frames
    is an error: the utterance would vanish entirely.
    """
    if k < 1:
        raise ConfigurationError(f"stack factor must be >= 1, got {k}")
    n = feats.num_frames // k
    if n == 0:
        raise DataError(
            f"cannot stack {feats.num_frames} frames with factor {k}: no output rows"
        )
    flat = feats.data[: n * k].reshape(n, k * feats.feat_dim)
    return StackedFeatures(torch.from_numpy(np.ascontiguousarray(flat)), k)


class Projector(nn.Module):
    """Two-layer GELU map from stacked speech frames to decoder width."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, stack_k: int = 1,
                 seed: int = 0):
        super().__init__()
        if min(d_in, d_hidden, d_out) < 1:
            raise ConfigurationError("projector dims must be positive")
        if stack_k < 1:
            raise ConfigurationError("stack_k must be >= 1")
        self.stack_k = stack_k
        self.lin1 = nn.Linear(d_in, d_hidden)
        self.lin2 = nn.Linear(d_hidden, d_out)
        g = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
        with torch.no_grad():
            self.lin1.weight.normal_(0.0, d_in ** -0.5, generator=g)
            self.lin2.weight.normal_(0.0, d_hidden ** -0.5, generator=g)
            self.lin1.bias.zero_()
            self.lin2.bias.zero_()

    @property
    def d_in(self) -> int:
        return self.lin1.in_features

    @property
    def trainable(self) -> bool:
        return all(p.requires_grad for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad_(flag)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"projector expects last dim {self.d_in}, got {x.shape[-1]}")
        return self.lin2(F.gelu(self.lin1(x)))

    def meta(self) -> dict:
        return {
            "d_in": self.lin1.in_features,
            "d_hidden": self.lin1.out_features,
            "d_out": self.lin2.out_features,
            "stack_k": self.stack_k,
        }


def project(projector: Projector, stacked: Union[StackedFeatures, torch.Tensor]) -> torch.Tensor:
    """Map stacked frames to decoder-space embeddings (rows, d_model)."""
    rows = stacked.rows if isinstance(stacked, StackedFeatures) else stacked
    return projector(rows)


def lookup_embeddings(embed_table: torch.Tensor, token_ids) -> torch.Tensor:
    """Row lookup with range checking (out-of-vocab raises, never wraps)."""
    ids = torch.as_tensor(token_ids, dtype=torch.long)
    if ids.numel() > 0:
        lo, hi = int(ids.min()), int(ids.max())
        if lo < 0 or hi >= embed_table.shape[0]:
            raise VocabularyError(
                f"token id out of range: saw [{lo}, {hi}], vocab size {embed_table.shape[0]}"
            )
    return embed_table[ids]


@dataclass
class AssembledSequence:
    """One decoder input row: embeddings plus (optional) target supervision.

    segments maps span name -> (start, end) over the embedding rows. The
    loss mask is true exactly on target positions; an empty target (decode
    mode) leaves it all false. Supervision follows the next-token shift:
    logits at position t-1 score the token at position t.
    """

    embeddings: torch.Tensor
    target_ids: torch.Tensor
    loss_mask: torch.Tensor
    segments: dict = field(default_factory=dict)

    def __post_init__(self):
        L = self.embeddings.shape[0]
        if self.target_ids.shape != (L,) or self.loss_mask.shape != (L,):
            raise ShapeError(
                f"target_ids/loss_mask must match sequence length {L}, got "
                f"{tuple(self.target_ids.shape)} / {tuple(self.loss_mask.shape)}"
            )

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]


def assemble(speech_embeddings: Optional[torch.Tensor], prompt_ids: Sequence[int],
             target_ids: Sequence[int], embed_table: torch.Tensor) -> AssembledSequence:
    """Concatenate [speech, prompt, target] into one decoder input row.

    speech_embeddings may be None for text-only runs; target may be empty
    for decoding. Prompt and target tokens are looked up in embed_table and
    target positions (exactly those) are marked in the loss mask.
    """
    prompt = torch.as_tensor(prompt_ids, dtype=torch.long).reshape(-1)
    target = torch.as_tensor(target_ids, dtype=torch.long).reshape(-1)
    pieces = []
    segments = {}
    cursor = 0
    if speech_embeddings is not None:
        if speech_embeddings.dim() != 2 or speech_embeddings.shape[-1] != embed_table.shape[1]:
            raise ShapeError(
                f"speech embeddings must be (n, {embed_table.shape[1]}), "
                f"got {tuple(speech_embeddings.shape)}"
            )
        pieces.append(speech_embeddings)
        segments["speech"] = (cursor, cursor + speech_embeddings.shape[0])
        cursor += speech_embeddings.shape[0]
    if prompt.numel() > 0:
        pieces.append(lookup_embeddings(embed_table, prompt))
        segments["prompt"] = (cursor, cursor + prompt.numel())
        cursor += prompt.numel()
    if target.numel() > 0:
        pieces.append(lookup_embeddings(embed_table, target))
        segments["target"] = (cursor, cursor + target.numel())
    if not pieces:
        raise DataError("nothing to assemble: no speech, prompt, or target")
    emb = torch.cat(pieces, dim=0)
    L = emb.shape[0]
    ids = torch.zeros(L, dtype=torch.long)
    ids[cursor:] = target
    mask = torch.zeros(L, dtype=torch.bool)
    mask[cursor:] = True
    return AssembledSequence(embeddings=emb, target_ids=ids, loss_mask=mask,
                             segments=segments)


def nll_loss(logits: torch.Tensor, assembled, loss_mask: Optional[torch.Tensor] = None
             ) -> torch.Tensor:
    """Mean next-token negative log-likelihood over masked positions.

    Call either with an AssembledSequence or with explicit (target_ids,
    loss_mask) tensors. Accepts (L, V) or (B, L, V) logits; the logits at
    position t-1 predict the token at position t, so a mask that covers
    position 0 is rejected.
    """
    if loss_mask is None:
        target_ids, loss_mask = assembled.target_ids, assembled.loss_mask
    else:
        target_ids = assembled
    if logits.dim() == 2:
        logits, target_ids, loss_mask = (logits.unsqueeze(0), target_ids.unsqueeze(0),
                                         loss_mask.unsqueeze(0))
    if logits.dim() != 3:
        raise ShapeError(f"logits must be (L, V) or (B, L, V), got {tuple(logits.shape)}")
    if not loss_mask.any():
        raise LossUndefinedError("loss mask selects no positions")
    if loss_mask[:, 0].any():
        raise LossUndefinedError(
            "loss mask covers position 0, which has no preceding logits"
        )
    logp = F.log_softmax(logits[:, :-1, :].float(), dim=-1)
    tgt = target_ids[:, 1:]
    mask = loss_mask[:, 1:]
    picked = logp.gather(-1, tgt.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    return -(picked * mask).sum() / mask.sum()


def collate_batch(rows: Sequence[AssembledSequence]):
    """Zero-pad rows to a common length.

    Returns (embeddings (B, L, d), target_ids, loss_mask, lengths); padding
    positions stay outside the loss mask so they never contribute.
    """
    if not rows:
        raise DataError("cannot collate an empty batch")
    d = rows[0].embeddings.shape[1]
    L = max(r.length for r in rows)
    B = len(rows)
    emb = torch.zeros(B, L, d)
    ids = torch.zeros(B, L, dtype=torch.long)
    mask = torch.zeros(B, L, dtype=torch.bool)
    lengths = torch.zeros(B, dtype=torch.long)
    for i, r in enumerate(rows):
        if r.embeddings.shape[1] != d:
            raise ShapeError("rows in a batch must share embedding width")
        emb[i, : r.length] = r.embeddings
        ids[i, : r.length] = r.target_ids
        mask[i, : r.length] = r.loss_mask
        lengths[i] = r.length
    return emb, ids, mask, lengths
