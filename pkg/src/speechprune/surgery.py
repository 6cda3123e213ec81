"""Block removal and post-pruning healing.

Pruning at (start, size) under the h-indexing convention removes layers
start+1 .. start+size (1-based within the current stack), feeding h_start
straight into what used to be layer start+size+1. Surviving weights are
never touched; the final layer is never removable.

Healing attaches rank-limited adapters to the receiving layer's MLP and/or
unfreezes the projector, returning the registry of parameters a trainer is
allowed to update.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch.nn as nn

from .assembly import Projector
from .errors import ConfigurationError, PlanError, RangeError
from .model import DecoderModel

HEALING_STRATEGIES = ("none", "decoder-only", "projector-only", "joint")

# CLI shorthand -> canonical strategy name
_STRATEGY_ALIASES = {"decoder": "decoder-only", "projector": "projector-only"}


def canonical_strategy(name: str) -> str:
    name = _STRATEGY_ALIASES.get(name, name)
    if name not in HEALING_STRATEGIES:
        raise ConfigurationError(
            f"unknown healing strategy {name!r}; expected one of {HEALING_STRATEGIES}"
        )
    return name


@dataclass
class SurgeryPlan:
    """Remove `size` layers after residual state h_start.

    start and size are interpreted against the model the plan is applied
    to; fingerprint records which analysis produced the plan.
    """

    start: int
    size: int
    fingerprint: str = ""
    strategy: str = "none"

    def __post_init__(self):
        self.strategy = canonical_strategy(self.strategy)

    def validate(self, layer_count: int) -> None:
        if self.size < 1:
            raise RangeError(f"block size must be >= 1, got {self.size}")
        if self.start < 0:
            raise RangeError(f"block start must be >= 0, got {self.start}")
        if self.start + self.size > layer_count:
            raise RangeError(
                f"block [{self.start + 1}..{self.start + self.size}] exceeds "
                f"depth {layer_count}"
            )
        if self.start + self.size == layer_count:
            raise PlanError(
                f"block [{self.start + 1}..{self.start + self.size}] covers the "
                f"final layer, which is never removed"
            )

    def to_dict(self) -> dict:
        return {"start": self.start, "size": self.size,
                "fingerprint": self.fingerprint, "strategy": self.strategy}

    @classmethod
    def from_dict(cls, d: dict) -> "SurgeryPlan":
        return cls(start=d["start"], size=d["size"],
                   fingerprint=d.get("fingerprint", ""),
                   strategy=d.get("strategy", "none"))


@dataclass
class Provenance:
    """Everything needed to explain how a checkpoint came to be."""

    original_layer_ids: list
    plans: list = field(default_factory=list)
    train_steps: int = 0
    seeds: dict = field(default_factory=dict)
    events: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "original_layer_ids": self.original_layer_ids,
            "plans": self.plans,
            "train_steps": self.train_steps,
            "seeds": self.seeds,
            "events": self.events,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Provenance":
        return cls(
            original_layer_ids=list(d.get("original_layer_ids", [])),
            plans=list(d.get("plans", [])),
            train_steps=int(d.get("train_steps", 0)),
            seeds=dict(d.get("seeds", {})),
            events=list(d.get("events", [])),
        )


def prune_block(model: DecoderModel, plan: SurgeryPlan) -> DecoderModel:
    """Delete the planned layers in place; weights of survivors untouched.

    Updates original_layer_ids and records the plan on the model. Callers
    that need both variants should deep-copy first.
    """
    plan.validate(model.layer_count)
    lo, hi = plan.start, plan.start + plan.size
    removed_ids = model.original_layer_ids[lo:hi]
    kept = [model.layers[i] for i in range(model.layer_count) if not lo <= i < hi]
    model.layers = nn.ModuleList(kept)
    del model.original_layer_ids[lo:hi]
    record = plan.to_dict()
    record["removed_original_ids"] = removed_ids
    model.applied_plans.append(record)
    return model


def receiving_layer_index(model: DecoderModel, plan: SurgeryPlan) -> int:
    """Post-prune list index of the first layer after the removed block."""
    if not any(p["start"] == plan.start and p["size"] == plan.size
               for p in model.applied_plans):
        raise ConfigurationError(
            "model was not pruned with this plan; apply prune_block first"
        )
    if plan.start >= model.layer_count:
        raise ConfigurationError(
            f"receiving layer absent: index {plan.start} in a "
            f"{model.layer_count}-layer model"
        )
    return plan.start


def apply_healing(model: DecoderModel, projector: Optional[Projector],
                  plan: SurgeryPlan, rank: int = 64, alpha: float = 64.0,
                  dropout_p: float = 0.05, seed: Optional[int] = None) -> dict:
    """Set up trainable parameters for the plan's healing strategy.

    Returns the registry (name -> parameter) a trainer may update:
      none            -> empty
      decoder-only    -> adapters on the receiving layer's MLP up and down
      projector-only  -> projector weights
      joint           -> union of the two

    Everything outside the registry is left (or put) frozen.
    """
    strategy = canonical_strategy(plan.strategy)
    registry: dict = {}
    for p in model.parameters():
        p.requires_grad_(False)
    if projector is not None:
        projector.set_trainable(False)
    if strategy == "none":
        return registry
    if strategy in ("decoder-only", "joint"):
        from .model import attach_lora

        recv = receiving_layer_index(model, plan)
        attach_lora(model, targets=("mlp",), rank=rank, alpha=alpha,
                    dropout_p=dropout_p, layers=[recv], seed=seed)
        for tgt in ("mlp_up", "mlp_down"):
            adapter = model.layers[recv].adapters[tgt]
            registry[f"model.layers.{recv}.adapters.{tgt}.A"] = adapter.A
            registry[f"model.layers.{recv}.adapters.{tgt}.B"] = adapter.B
    if strategy in ("projector-only", "joint"):
        if projector is None:
            raise ConfigurationError(f"strategy {strategy!r} needs a projector")
        projector.set_trainable(True)
        for name, param in projector.named_parameters():
            registry[f"projector.{name}"] = param
    return registry
