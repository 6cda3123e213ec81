"""Block removal, healing registries, and the frozen-parameter contract."""

import copy

import pytest
import torch

from speechprune.assembly import Projector
from speechprune.errors import ConfigurationError, PlanError, RangeError
from speechprune.model import attach_lora
from speechprune.surgery import (
    HEALING_STRATEGIES,
    Provenance,
    SurgeryPlan,
    apply_healing,
    canonical_strategy,
    prune_block,
    receiving_layer_index,
)

from conftest import make_model, make_projector, random_inputs
from oracles import skip_forward


class TestSurgeryPlan:
    def test_aliases_canonicalized(self):
        assert canonical_strategy("decoder") == "decoder-only"
        assert canonical_strategy("projector") == "projector-only"
        assert SurgeryPlan(start=0, size=1, strategy="decoder").strategy == "decoder-only"

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ConfigurationError):
            SurgeryPlan(start=0, size=1, strategy="fine-tune")

    def test_final_layer_protected(self):
        plan = SurgeryPlan(start=3, size=1)
        with pytest.raises(PlanError):
            plan.validate(4)

    def test_overflow_rejected(self):
        with pytest.raises(RangeError):
            SurgeryPlan(start=3, size=2).validate(4)

    def test_bad_sizes_rejected(self):
        with pytest.raises(RangeError):
            SurgeryPlan(start=0, size=0).validate(4)
        with pytest.raises(RangeError):
            SurgeryPlan(start=-1, size=1).validate(4)

    def test_dict_round_trip(self):
        plan = SurgeryPlan(start=1, size=2, fingerprint="ff", strategy="joint")
        assert SurgeryPlan.from_dict(plan.to_dict()) == plan


class TestPruneBlock:
    def test_original_ids_bookkeeping(self):
        model = make_model(num_layers=8)
        prune_block(model, SurgeryPlan(start=4, size=3))
        assert model.original_layer_ids == [1, 2, 3, 4, 8]
        assert model.layer_count == 5

    def test_forward_matches_skip_oracle(self):
        for num_layers in (4, 8):
            model = make_model(num_layers=num_layers, seed=num_layers)
            x = random_inputs(6, 16, seed=2)
            start, size = 1, 2
            skipped = skip_forward(model, x, set(range(start, start + size)))
            prune_block(model, SurgeryPlan(start=start, size=size))
            with torch.no_grad():
                pruned, _ = model(x)
            assert (pruned - skipped).abs().max() <= 1e-6

    def test_noop_block_preserves_logits(self):
        model = make_model(num_layers=5, seed=9)
        x = random_inputs(6, 16, seed=4)
        with torch.no_grad():
            for idx in (1, 2):
                model.layers[idx].o.weight.zero_()
                model.layers[idx].mlp_down.weight.zero_()
            before, _ = model(x)
        prune_block(model, SurgeryPlan(start=1, size=2))
        with torch.no_grad():
            after, _ = model(x)
        assert (after - before).abs().max() <= 1e-6

    def test_surviving_weights_bitwise_unchanged(self):
        model = make_model(num_layers=6, seed=3)
        survivors = {
            f"kept{i}": {k: v.clone() for k, v in layer.state_dict().items()}
            for i, layer in enumerate(model.layers) if i not in (2, 3)
        }
        head_before = model.lm_head.weight.clone()
        prune_block(model, SurgeryPlan(start=2, size=2))
        for layer, (name, reference) in zip(model.layers, survivors.items()):
            now = layer.state_dict()
            for key in reference:
                assert torch.equal(now[key], reference[key]), (name, key)
        assert torch.equal(model.lm_head.weight, head_before)

    def test_disjoint_composition(self):
        # removing {2} then {5} (original ids 3 and 6) equals removing both
        # in one pass on a fresh copy
        a = make_model(num_layers=8, seed=1)
        b = copy.deepcopy(a)
        x = random_inputs(5, 16, seed=6)

        prune_block(a, SurgeryPlan(start=2, size=1))
        # original layer 6 now sits at list index 4
        prune_block(a, SurgeryPlan(start=4, size=1))

        skipped = skip_forward(b, x, {2, 5})
        with torch.no_grad():
            composed, _ = a(x)
        assert a.original_layer_ids == [1, 2, 4, 5, 7, 8]
        assert (composed - skipped).abs().max() <= 1e-6

    def test_plan_errors_surface(self):
        model = make_model(num_layers=4)
        with pytest.raises(PlanError):
            prune_block(model, SurgeryPlan(start=2, size=2))
        with pytest.raises(RangeError):
            prune_block(model, SurgeryPlan(start=2, size=9))

    def test_applied_plans_recorded(self):
        model = make_model(num_layers=8)
        prune_block(model, SurgeryPlan(start=4, size=3, fingerprint="fp"))
        (record,) = model.applied_plans
        assert record["start"] == 4 and record["size"] == 3
        assert record["removed_original_ids"] == [5, 6, 7]


def _pruned_setup(strategy, num_layers=6, seed=0):
    model = make_model(num_layers=num_layers, seed=3)
    projector = make_projector(d_in=8, d_hidden=8, d_model=16, seed=4)
    plan = SurgeryPlan(start=2, size=2, strategy=strategy)
    prune_block(model, plan)
    registry = apply_healing(model, projector, plan, rank=4, seed=seed)
    return model, projector, plan, registry


class TestApplyHealing:
    def test_none_gives_empty_registry(self):
        model, _, _, registry = _pruned_setup("none")
        assert registry == {}
        assert all(not p.requires_grad for p in model.parameters())

    def test_decoder_only_registry(self):
        model, projector, plan, registry = _pruned_setup("decoder-only")
        recv = receiving_layer_index(model, plan)
        assert recv == 2
        expected = {
            f"model.layers.{recv}.adapters.{target}.{mat}"
            for target in ("mlp_up", "mlp_down") for mat in ("A", "B")
        }
        assert set(registry) == expected
        assert all(p.requires_grad for p in registry.values())
        assert all(not p.requires_grad for p in projector.parameters())

    def test_projector_only_registry(self):
        model, projector, _, registry = _pruned_setup("projector-only")
        assert set(registry) == {
            "projector.lin1.weight", "projector.lin1.bias",
            "projector.lin2.weight", "projector.lin2.bias",
        }
        assert all(not p.requires_grad for p in model.parameters())

    def test_joint_is_union(self):
        _, _, _, none_reg = _pruned_setup("none")
        _, _, _, dec_reg = _pruned_setup("decoder-only")
        _, _, _, proj_reg = _pruned_setup("projector-only")
        _, _, _, joint_reg = _pruned_setup("joint")
        assert set(joint_reg) == set(dec_reg) | set(proj_reg) | set(none_reg)

    def test_healing_adapters_start_as_noop(self):
        model = make_model(num_layers=6, seed=3)
        projector = make_projector(d_in=8, d_hidden=8, d_model=16, seed=4)
        plan = SurgeryPlan(start=2, size=2, strategy="decoder-only")
        prune_block(model, plan)
        x = random_inputs(5, 16, seed=7)
        with torch.no_grad():
            before, _ = model(x)
        apply_healing(model, projector, plan, rank=4, seed=0)
        model.eval()
        with torch.no_grad():
            after, _ = model(x)
        assert torch.equal(before, after)

    def test_unpruned_model_rejected(self):
        model = make_model(num_layers=6)
        projector = make_projector(d_in=8, d_hidden=8, d_model=16)
        plan = SurgeryPlan(start=2, size=2, strategy="joint")
        with pytest.raises(ConfigurationError):
            apply_healing(model, projector, plan)

    def test_strategies_enumerated(self):
        assert HEALING_STRATEGIES == ("none", "decoder-only", "projector-only", "joint")


class TestProvenance:
    def test_dict_round_trip(self):
        prov = Provenance(
            original_layer_ids=[1, 2, 4],
            plans=[SurgeryPlan(start=2, size=1, strategy="joint").to_dict()],
            train_steps=120,
            seeds={"train": 3},
            events=[{"kind": "base-train"}],
        )
        again = Provenance.from_dict(prov.to_dict())
        assert again.original_layer_ids == prov.original_layer_ids
        assert again.plans == prov.plans
        assert again.train_steps == prov.train_steps
        assert again.seeds == prov.seeds
        assert again.events == prov.events
