"""Hand-rolled training loop: Adam, warmdown schedule, gradient clipping.

Two regimes share the loop: base alignment training (projector plus any
decoder adapters attached beforehand) and post-surgery healing (whatever
registry apply_healing returned). Only registry parameters may change;
everything else is verified bitwise-frozen after the run.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .assembly import Projector, collate_batch, nll_loss
from .errors import (
    ConfigurationError,
    NumericError,
    RangeError,
    ShapeError,
    SpeechPruneError,
)
from .model import DecoderModel, adapter_parameters

ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    total_steps: int
    peak_lr: float = 5e-4
    warmdown_fraction: float = 0.6
    betas: tuple = (0.9, 0.98)
    grad_clip_norm: float = 1.0
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigurationError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.peak_lr <= 0:
            raise ConfigurationError(f"peak_lr must be positive, got {self.peak_lr}")
        if not 0.0 < self.warmdown_fraction <= 1.0:
            raise ConfigurationError(
                f"warmdown_fraction must be in (0, 1], got {self.warmdown_fraction}"
            )
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ConfigurationError(f"betas must lie in [0, 1), got {self.betas}")
        if self.grad_clip_norm <= 0:
            raise ConfigurationError("grad_clip_norm must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "peak_lr": self.peak_lr,
            "warmdown_fraction": self.warmdown_fraction,
            "betas": list(self.betas),
            "grad_clip_norm": self.grad_clip_norm,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }


@dataclass
class TrainReport:
    losses: list
    lrs: list
    final_loss: float
    wall_clock_sec: float
    steps_executed: int


def lr_at(step: int, config: TrainConfig) -> float:
    """Constant peak, then linear decay to zero over the warmdown tail."""
    total = config.total_steps
    if not 0 <= step <= total:
        raise RangeError(f"step {step} outside 0..{total}")
    plateau = total * (1.0 - config.warmdown_fraction)
    if step <= plateau:
        return config.peak_lr
    return config.peak_lr * (total - step) / (total - plateau)


def clip_gradients(grads: dict, max_norm: float) -> dict:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ConfigurationError("max_norm must be positive")
    sq = 0.0
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name!r}")
        sq += float(g.double().pow(2).sum())
    norm = sq ** 0.5
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.98), eps: float = ADAM_EPS):
    """One bias-corrected Adam update; pure function of (params, state)."""
    if set(params) != set(grads):
        raise ShapeError(
            f"params/grads name mismatch: {sorted(set(params) ^ set(grads))}"
        )
    b1, b2 = betas
    t = state.step + 1
    new_params = {}
    new_state = AdamState(step=t, m={}, v={})
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {tuple(g.shape)} != param shape "
                             f"{tuple(p.shape)} for {name!r}")
        m = b1 * state.m.get(name, torch.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, torch.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = p - lr * m_hat / (v_hat.sqrt() + eps)
        new_state.m[name] = m
        new_state.v[name] = v
    return new_params, new_state


def _hash_tensor(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().numpy().astype("<f4").tobytes()).hexdigest()


def all_named_parameters(model: DecoderModel, projector: Optional[Projector]) -> dict:
    out = {f"model.{n}": p for n, p in model.named_parameters()}
    if projector is not None:
        out.update({f"projector.{n}": p for n, p in projector.named_parameters()})
    return out


def base_registry(model: DecoderModel, projector: Projector) -> dict:
    """Trainables for base alignment: projector plus any attached adapters."""
    projector.set_trainable(True)
    registry = {f"projector.{n}": p for n, p in projector.named_parameters()}
    registry.update(adapter_parameters(model))
    for p in registry.values():
        p.requires_grad_(True)
    return registry


def train(model: DecoderModel, projector: Optional[Projector],
          rows_fn, config: TrainConfig, registry: dict,
          num_rows: int) -> TrainReport:
    """Run the loop: sample a batch, forward, clip, Adam, repeat.

    rows_fn(indices) must return freshly assembled sequences for the given
    utterance indices so the projector stays inside the autograd graph.
    Batches cycle deterministic epoch permutations drawn from config.seed.
    """
    if not registry:
        raise ConfigurationError("empty trainable registry: nothing to train")
    if num_rows < 1:
        raise ConfigurationError("dataset is empty")
    for p in registry.values():
        p.requires_grad_(True)

    frozen = {name: _hash_tensor(p)
              for name, p in all_named_parameters(model, projector).items()
              if name not in registry}

    torch.manual_seed(config.seed & 0x7FFFFFFFFFFFFFFF)
    order_rng = np.random.default_rng(config.seed)
    names = sorted(registry)
    params = [registry[n] for n in names]
    state = AdamState()
    losses = []
    lrs = []
    model.train()
    if projector is not None:
        projector.train()
    t0 = time.perf_counter()
    perm = []
    cursor = 0
    for step in range(config.total_steps):
        if cursor + config.batch_size > len(perm):
            perm = list(order_rng.permutation(num_rows))
            cursor = 0
        idx = perm[cursor: cursor + config.batch_size]
        cursor += config.batch_size
        emb, ids, mask, _ = collate_batch(rows_fn(idx))
        logits, _ = model(emb)
        loss = nll_loss(logits, ids, mask)
        if not torch.isfinite(loss):
            raise NumericError(f"loss became non-finite at step {step}")
        grads = torch.autograd.grad(loss, params)
        grad_map = clip_gradients(dict(zip(names, grads)), config.grad_clip_norm)
        lr = lr_at(step, config)
        new_vals, state = adam_step(
            {n: registry[n].detach() for n in names}, grad_map, state, lr,
            betas=config.betas,
        )
        with torch.no_grad():
            for n in names:
                registry[n].copy_(new_vals[n])
        losses.append(float(loss.detach()))
        lrs.append(lr)
    wall = time.perf_counter() - t0
    model.eval()
    if projector is not None:
        projector.eval()

    after = all_named_parameters(model, projector)
    for name, digest in frozen.items():
        if _hash_tensor(after[name]) != digest:
            raise SpeechPruneError(
                f"frozen-parameter contract violated: {name!r} changed during training"
            )
    return TrainReport(losses=losses, lrs=lrs, final_loss=losses[-1],
                       wall_clock_sec=wall, steps_executed=config.total_steps)


def run_training(model: DecoderModel, projector: Optional[Projector],
                 utterances: Sequence, config: TrainConfig, mode: str = "base",
                 registry: Optional[dict] = None) -> TrainReport:
    """Train on utterances in one of the two regimes.

    base: decoder frozen, projector (and any pre-attached adapters) train.
    heal: exactly the registry produced by apply_healing trains.
    """
    from .data import assemble_utterance

    if mode == "base":
        if projector is None:
            raise ConfigurationError("base training needs a projector")
        registry = base_registry(model, projector)
    elif mode == "heal":
        if registry is None:
            raise ConfigurationError("heal mode needs the registry from apply_healing")
    else:
        raise ConfigurationError(f"mode must be 'base' or 'heal', got {mode!r}")
    utterances = list(utterances)

    def rows_fn(indices):
        return [assemble_utterance(utterances[i], projector, model.embed.weight)
                for i in indices]

    return train(model, projector, rows_fn, config, registry, len(utterances))


def write_loss_csv(path, report: TrainReport) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "lr"])
        for i, (loss, lr) in enumerate(zip(report.losses, report.lrs)):
            w.writerow([i, f"{loss:.6f}", f"{lr:.8g}"])
