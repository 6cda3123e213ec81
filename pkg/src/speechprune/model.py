"""Minimal decoder-only transformer with per-layer low-rank adapters.

The decoder is a stack of pre-norm residual blocks (RMS norm -> causal
self-attention -> add; RMS norm -> GELU MLP -> add) with rotary position
encoding on q/k, a final RMS norm, and a linear LM head. Inputs are already
embedded vectors, not token ids, so speech embeddings and token embeddings
can be mixed freely upstream.

Hidden-state indexing convention used throughout the toolkit: h_0 is the
embedded input, h_i is the residual stream immediately after block i. The
trace captured by ``forward(..., capture=True)`` holds the last-token value
of every h_i; the final norm is never part of the trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    ConfigurationError,
    NumericError,
    SelectorError,
    SequenceLengthError,
    ShapeError,
)

ATTN_PROJECTIONS = ("q", "k", "v", "o")
MLP_PROJECTIONS = ("mlp_up", "mlp_down")
PROJECTION_NAMES = ATTN_PROJECTIONS + MLP_PROJECTIONS

# selector shorthands accepted by attach_lora
_TARGET_ALIASES = {
    "attn": ATTN_PROJECTIONS,
    "mlp": MLP_PROJECTIONS,
    "all": PROJECTION_NAMES,
}

ROPE_BASE = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    d_model: int
    num_heads: int
    d_mlp: int
    vocab_size: int
    max_seq_len: int = 512
    norm_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "d_model", "num_heads", "d_mlp", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.num_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} not divisible by num_heads={self.num_heads}"
            )
        if (self.d_model // self.num_heads) % 2 != 0:
            raise ConfigurationError(
                "rotary encoding needs an even head dimension; "
                f"got head_dim={self.d_model // self.num_heads}"
            )
        if self.norm_eps <= 0:
            raise ConfigurationError("norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "d_model": self.d_model,
            "num_heads": self.num_heads,
            "d_mlp": self.d_mlp,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "norm_eps": self.norm_eps,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class HiddenTrace:
    """Last-token residual states h_0..h_k, shape (k+1, batch, d_model)."""

    states: torch.Tensor

    def __post_init__(self):
        if not torch.isfinite(self.states).all():
            raise NumericError("hidden trace contains non-finite values")

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, idx: int) -> torch.Tensor:
        return self.states[idx]


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        rms_inv = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return x * rms_inv * self.weight


class LoraAdapter(nn.Module):
    """Additive low-rank update (alpha/r) * B @ A on top of a host projection.

    B starts at zero so a freshly attached adapter is an exact no-op.
    Dropout applies to the adapter's input path only and is disabled in
    eval mode.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, dropout_p: float,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if rank < 1:
            raise ConfigurationError(f"adapter rank must be >= 1, got {rank}")
        if alpha <= 0:
            raise ConfigurationError(f"adapter alpha must be positive, got {alpha}")
        if not 0.0 <= dropout_p < 1.0:
            raise ConfigurationError(f"adapter dropout must be in [0, 1), got {dropout_p}")
        self.rank = rank
        self.alpha = float(alpha)
        self.dropout_p = float(dropout_p)
        a = torch.empty(rank, d_in)
        a.normal_(0.0, d_in ** -0.5, generator=generator)
        self.A = nn.Parameter(a)
        self.B = nn.Parameter(torch.zeros(d_out, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.dropout(x, self.dropout_p, self.training) if self.dropout_p > 0 else x
        return (self.alpha / self.rank) * F.linear(F.linear(h, self.A), self.B)

    def delta_weight(self) -> torch.Tensor:
        return (self.alpha / self.rank) * (self.B @ self.A)


class DecoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d, dm = config.d_model, config.d_mlp
        self.num_heads = config.num_heads
        self.head_dim = config.head_dim
        self.norm1 = RMSNorm(d, config.norm_eps)
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d, bias=False)
        self.norm2 = RMSNorm(d, config.norm_eps)
        self.mlp_up = nn.Linear(d, dm, bias=False)
        self.mlp_down = nn.Linear(dm, d, bias=False)
        self.adapters = nn.ModuleDict()

    def project(self, name: str, x: torch.Tensor) -> torch.Tensor:
        out = getattr(self, name)(x)
        if name in self.adapters:
            out = out + self.adapters[name](x)
        return out

    def forward(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor,
                mask: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.norm1(x)
        q = self.project("q", h).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.project("k", h).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.project("v", h).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        q = _apply_rotary(q, cos, sin)
        k = _apply_rotary(k, cos, sin)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim) + mask
        attn = torch.softmax(scores, dim=-1) @ v
        attn = attn.transpose(1, 2).reshape(b, t, d)
        x = x + self.project("o", attn)
        h = self.norm2(x)
        return x + self.project("mlp_down", F.gelu(self.project("mlp_up", h)))


def _apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (b, heads, t, head_dim); even/odd feature pairs rotated by the
    # position angle, so surgery never has to remap absolute positions.
    x1, x2 = x[..., 0::2], x[..., 1::2]
    r1 = x1 * cos - x2 * sin
    r2 = x1 * sin + x2 * cos
    return torch.stack((r1, r2), dim=-1).flatten(-2)


class DecoderModel(nn.Module):
    """Decoder stack plus provenance of which original layers survive.

    A model instance is single-writer: concurrent read-only forwards are
    fine, but attach/merge/surgery/optimizer steps need exclusive access.
    """

    def __init__(self, config: ModelConfig, original_layer_ids: Optional[Sequence[int]] = None):
        super().__init__()
        self.config = config
        if original_layer_ids is None:
            original_layer_ids = range(1, config.num_layers + 1)
        self.original_layer_ids = list(original_layer_ids)
        ids = self.original_layer_ids
        if ids != sorted(set(ids)) or (ids and (ids[0] < 1 or ids[-1] > config.num_layers)):
            raise ConfigurationError(f"invalid original_layer_ids {ids}")
        self.applied_plans: list[dict] = []
        self.embed = nn.Embedding(config.vocab_size, config.d_model)
        self.layers = nn.ModuleList(DecoderLayer(config) for _ in ids)
        self.final_norm = RMSNorm(config.d_model, config.norm_eps)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)

        inv = ROPE_BASE ** (-torch.arange(0, config.head_dim, 2, dtype=torch.float32)
                            / config.head_dim)
        angles = torch.outer(torch.arange(config.max_seq_len, dtype=torch.float32), inv)
        self.register_buffer("rope_cos", torch.cos(angles), persistent=False)
        self.register_buffer("rope_sin", torch.sin(angles), persistent=False)

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    def embed_tokens(self, token_ids: torch.Tensor) -> torch.Tensor:
        from .assembly import lookup_embeddings  # local import: avoids cycle

        return lookup_embeddings(self.embed.weight, token_ids)

    def forward(self, inputs: torch.Tensor, capture: bool = False,
                lengths: Optional[torch.Tensor] = None):
        """Run the stack over embedded inputs of shape (batch, t, d_model).

        Returns (logits, trace); trace is a HiddenTrace of last-token
        residual states when capture is set, else None. With ragged batches,
        ``lengths`` picks each row's true final position for the trace.
        """
        squeeze = inputs.dim() == 2
        if squeeze:
            inputs = inputs.unsqueeze(0)
        if inputs.dim() != 3 or inputs.shape[-1] != self.config.d_model:
            raise ShapeError(
                f"expected inputs (batch, t, {self.config.d_model}), got {tuple(inputs.shape)}"
            )
        if inputs.shape[1] > self.config.max_seq_len:
            raise SequenceLengthError(
                f"sequence length {inputs.shape[1]} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if not torch.isfinite(inputs).all():
            raise NumericError("non-finite values in model inputs")

        b, t, _ = inputs.shape
        cos, sin = self.rope_cos[:t], self.rope_sin[:t]
        mask = torch.full((t, t), float("-inf"), device=inputs.device).triu(1)

        if lengths is None:
            last = None
        else:
            last = (torch.as_tensor(lengths, dtype=torch.long) - 1).clamp(min=0)

        def grab(h):
            row = h[:, -1, :] if last is None else h[torch.arange(b), last]
            return row.detach().clone()

        h = inputs
        trace = [grab(h)] if capture else None
        for layer in self.layers:
            h = layer(h, cos, sin, mask)
            if capture:
                trace.append(grab(h))
        logits = self.lm_head(self.final_norm(h))
        if squeeze:
            logits = logits.squeeze(0)
        if capture:
            return logits, HiddenTrace(torch.stack(trace))
        return logits, None

    def fingerprint(self) -> str:
        import hashlib

        sha = hashlib.sha256()
        sha.update(repr(sorted(self.config.to_dict().items())).encode())
        sha.update(repr(self.original_layer_ids).encode())
        for name, tensor in sorted(self.state_dict().items()):
            sha.update(name.encode())
            sha.update(tensor.detach().cpu().numpy().astype("<f4").tobytes())
        return sha.hexdigest()[:16]


def init_decoder(config: ModelConfig) -> DecoderModel:
    """Build a decoder with deterministic scaled-Gaussian weights.

    Projections get std d_model^{-1/2}, norm gains start at one. The same
    seed always reproduces bitwise-identical weights. Base weights are
    created frozen (requires_grad False); training happens through the
    projector and adapters.
    """
    model = DecoderModel(config)
    g = torch.Generator().manual_seed(config.seed & 0x7FFFFFFFFFFFFFFF)
    std = config.d_model ** -0.5
    model.embed.weight.data.normal_(0.0, std, generator=g)
    for layer in model.layers:
        for name in PROJECTION_NAMES:
            getattr(layer, name).weight.data.normal_(0.0, std, generator=g)
    model.lm_head.weight.data.normal_(0.0, std, generator=g)
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def resolve_targets(targets: Iterable[str]) -> list[str]:
    names: list[str] = []
    for t in targets:
        if t in _TARGET_ALIASES:
            names.extend(_TARGET_ALIASES[t])
        elif t in PROJECTION_NAMES:
            names.append(t)
        else:
            raise SelectorError(
                f"unknown projection target {t!r}; expected one of "
                f"{PROJECTION_NAMES + tuple(_TARGET_ALIASES)}"
            )
    out = []
    for n in names:  # stable de-dup
        if n not in out:
            out.append(n)
    return out


def projection_dims(config: ModelConfig, target: str) -> tuple[int, int]:
    d, dm = config.d_model, config.d_mlp
    dims = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d),
            "mlp_up": (d, dm), "mlp_down": (dm, d)}
    if target not in dims:
        raise SelectorError(f"unknown projection target {target!r}")
    return dims[target]


def make_adapter(config: ModelConfig, target: str, rank: int, alpha: float,
                 dropout_p: float, generator: Optional[torch.Generator] = None
                 ) -> LoraAdapter:
    d_in, d_out = projection_dims(config, target)
    return LoraAdapter(d_in, d_out, rank, alpha, dropout_p, generator=generator)


def attach_lora(model: DecoderModel, targets: Iterable[str] = ("q", "k", "v", "o"),
                rank: int = 64, alpha: float = 64.0, dropout_p: float = 0.05,
                layers: Optional[Sequence[int]] = None,
                seed: Optional[int] = None) -> DecoderModel:
    """Attach zero-initialised adapters to the selected projections.

    Forward outputs are unchanged until the adapters train (B starts at 0).
    Adapter parameters are the only trainable ones on the model afterwards.
    """
    names = resolve_targets(targets)
    if layers is None:
        layer_idx = list(range(model.layer_count))
    else:
        layer_idx = list(layers)
        for i in layer_idx:
            if not 0 <= i < model.layer_count:
                raise SelectorError(f"layer index {i} out of range 0..{model.layer_count - 1}")
    if seed is None:
        seed = model.config.seed * 1000003 + sum(len(l.adapters) for l in model.layers) + 1
    g = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    for i in layer_idx:
        layer = model.layers[i]
        for name in names:
            if name in layer.adapters:
                raise SelectorError(f"layer {i} already has an adapter on {name!r}")
            layer.adapters[name] = make_adapter(model.config, name, rank, alpha,
                                                dropout_p, generator=g)
    return model


def merge_lora(model: DecoderModel) -> DecoderModel:
    """Fold every adapter into its host weight (W += (alpha/r) B A) and drop it.

    Idempotent: with no adapters present this is a no-op. Merged outputs match
    the eval-mode (dropout off) adapted forward.
    """
    with torch.no_grad():
        for layer in model.layers:
            for name in list(layer.adapters.keys()):
                adapter = layer.adapters[name]
                getattr(layer, name).weight += adapter.delta_weight()
            layer.adapters.clear()
    return model


def adapter_parameters(model: DecoderModel, prefix: str = "model.") -> dict[str, nn.Parameter]:
    """Named adapter parameters, in layer order."""
    out: dict[str, nn.Parameter] = {}
    for i, layer in enumerate(model.layers):
        for name, adapter in layer.adapters.items():
            out[f"{prefix}layers.{i}.adapters.{name}.A"] = adapter.A
            out[f"{prefix}layers.{i}.adapters.{name}.B"] = adapter.B
    return out


def adapter_index(model: DecoderModel) -> list[dict]:
    """Serializable description of every attached adapter."""
    entries = []
    for i, layer in enumerate(model.layers):
        for name, adapter in layer.adapters.items():
            entries.append({
                "layer": i,
                "target": name,
                "rank": adapter.rank,
                "alpha": adapter.alpha,
                "dropout_p": adapter.dropout_p,
            })
    return entries
