"""Training loop pieces: lr schedule, clipping, Adam, and the frozen contract."""

import csv
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from speechprune.errors import (
    ConfigurationError,
    NumericError,
    RangeError,
    ShapeError,
)
from speechprune.surgery import SurgeryPlan, apply_healing, prune_block
from speechprune.training import (
    AdamState,
    TrainConfig,
    adam_step,
    all_named_parameters,
    clip_gradients,
    lr_at,
    run_training,
    train,
    write_loss_csv,
)

from conftest import make_model, make_projector


def _reference_config(total_steps=50000):
    return TrainConfig(total_steps=total_steps, peak_lr=5e-4, warmdown_fraction=0.6)


class TestSchedule:
    def test_known_points(self):
        config = _reference_config()
        assert lr_at(0, config) == pytest.approx(5e-4, abs=1e-12)
        assert lr_at(50000, config) == pytest.approx(0.0, abs=1e-12)
        assert lr_at(35000, config) == pytest.approx(2.5e-4, abs=1e-12)

    def test_plateau_boundary(self):
        config = _reference_config()
        # warmdown covers the last 60%, so the plateau ends at step 20000
        assert lr_at(20000, config) == pytest.approx(5e-4, abs=1e-12)
        assert lr_at(20001, config) < 5e-4

    def test_out_of_range_step(self):
        config = _reference_config(total_steps=10)
        with pytest.raises(RangeError):
            lr_at(-1, config)
        with pytest.raises(RangeError):
            lr_at(11, config)

    @given(st.integers(min_value=0, max_value=1000))
    @settings(max_examples=200, deadline=None)
    def test_non_increasing_and_bounded(self, step):
        config = TrainConfig(total_steps=1000, peak_lr=1e-3, warmdown_fraction=0.5)
        lr = lr_at(step, config)
        assert 0.0 <= lr <= config.peak_lr
        if step < config.total_steps:
            assert lr_at(step + 1, config) <= lr + 1e-15

    def test_full_warmdown_fraction(self):
        config = TrainConfig(total_steps=100, peak_lr=1e-3, warmdown_fraction=1.0)
        assert lr_at(0, config) == pytest.approx(1e-3)
        assert lr_at(50, config) == pytest.approx(5e-4)

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(total_steps=0)
        with pytest.raises(ConfigurationError):
            TrainConfig(total_steps=10, peak_lr=0.0)
        with pytest.raises(ConfigurationError):
            TrainConfig(total_steps=10, warmdown_fraction=0.0)
        with pytest.raises(ConfigurationError):
            TrainConfig(total_steps=10, betas=(0.9, 1.0))
        with pytest.raises(ConfigurationError):
            TrainConfig(total_steps=10, grad_clip_norm=0.0)
        with pytest.raises(ConfigurationError):
            TrainConfig(total_steps=10, batch_size=0)


class TestClipping:
    def test_oversized_norm_is_scaled_down(self):
        # two tensors with global L2 norm 2.0 against a cap of 1.0
        grads = {
            "a": torch.tensor([math.sqrt(2.0), 0.0]),
            "b": torch.tensor([0.0, math.sqrt(2.0)]),
        }
        clipped = clip_gradients(grads, 1.0)
        total = sum(float(g.pow(2).sum()) for g in clipped.values()) ** 0.5
        assert total == pytest.approx(1.0, abs=1e-6)
        assert torch.allclose(clipped["a"], grads["a"] * 0.5)

    def test_small_norm_untouched(self):
        grads = {"a": torch.tensor([0.3, 0.4])}
        clipped = clip_gradients(grads, 1.0)
        assert torch.equal(clipped["a"], grads["a"])

    def test_clip_is_global_not_per_tensor(self):
        big = {"a": torch.tensor([3.0]), "b": torch.tensor([4.0])}
        clipped = clip_gradients(big, 1.0)
        # global norm is 5, so both shrink by the same factor of 5
        assert torch.allclose(clipped["a"], torch.tensor([0.6]))
        assert torch.allclose(clipped["b"], torch.tensor([0.8]))

    def test_nan_gradient_names_offender(self):
        grads = {"fine": torch.ones(2), "broken": torch.tensor([float("nan")])}
        with pytest.raises(NumericError, match="broken"):
            clip_gradients(grads, 1.0)

    def test_bad_norm_rejected(self):
        with pytest.raises(ConfigurationError):
            clip_gradients({"a": torch.ones(1)}, 0.0)

    @given(st.floats(min_value=0.1, max_value=10.0),
           st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_result_never_exceeds_cap(self, cap, seed):
        g = torch.randn(6, generator=torch.Generator().manual_seed(seed))
        clipped = clip_gradients({"g": g}, cap)
        norm = float(clipped["g"].pow(2).sum()) ** 0.5
        assert norm <= cap * (1 + 1e-6)


class TestAdam:
    def test_first_step_scalar_hand_case(self):
        # fresh state, unit gradient: bias correction cancels the betas and
        # the update collapses to -lr * g / (|g| + eps) = -0.1 almost exactly
        params = {"w": torch.tensor([1.0])}
        grads = {"w": torch.tensor([1.0])}
        new_params, state = adam_step(params, grads, AdamState(), lr=0.1)
        delta = float(new_params["w"] - params["w"])
        assert delta == pytest.approx(-0.1, rel=1e-6)
        assert state.step == 1
        assert float(state.m["w"]) == pytest.approx(0.1, rel=1e-6)
        assert float(state.v["w"]) == pytest.approx(0.02, rel=1e-6)

    def test_zero_gradient_means_no_motion(self):
        params = {"w": torch.tensor([2.5, -1.0])}
        grads = {"w": torch.zeros(2)}
        new_params, _ = adam_step(params, grads, AdamState(), lr=0.1)
        assert torch.equal(new_params["w"], params["w"])

    def test_deterministic(self):
        params = {"w": torch.linspace(-1, 1, 5)}
        grads = {"w": torch.linspace(1, -1, 5)}
        out1, s1 = adam_step(params, grads, AdamState(), lr=0.01)
        out2, s2 = adam_step(params, grads, AdamState(), lr=0.01)
        assert torch.equal(out1["w"], out2["w"])
        assert torch.equal(s1.m["w"], s2.m["w"])

    def test_two_steps_use_running_moments(self):
        params = {"w": torch.tensor([1.0])}
        grads = {"w": torch.tensor([1.0])}
        p1, state = adam_step(params, grads, AdamState(), lr=0.1)
        p2, state = adam_step(p1, grads, state, lr=0.1)
        assert state.step == 2
        # m after two unit gradients: 0.9*0.1 + 0.1*1 = 0.19
        assert float(state.m["w"]) == pytest.approx(0.19, rel=1e-6)
        assert float(p2["w"]) < float(p1["w"])

    def test_name_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="mismatch"):
            adam_step({"a": torch.ones(1)}, {"b": torch.ones(1)}, AdamState(), lr=0.1)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="shape"):
            adam_step({"a": torch.ones(2)}, {"a": torch.ones(3)}, AdamState(), lr=0.1)

    def test_input_state_left_untouched(self):
        state = AdamState()
        adam_step({"w": torch.ones(1)}, {"w": torch.ones(1)}, state, lr=0.1)
        assert state.step == 0 and state.m == {} and state.v == {}


class TestTrainLoop:
    def test_base_training_reduces_loss(self, tiny_dataset):
        model = make_model(num_layers=2, d_model=16, vocab_size=16, seed=3)
        projector = make_projector(d_in=8, d_hidden=16, d_model=16, seed=5)
        config = TrainConfig(total_steps=200, peak_lr=3e-3, batch_size=8, seed=0)
        report = run_training(model, projector, tiny_dataset.train, config, mode="base")
        assert report.steps_executed == 200
        assert len(report.losses) == 200 and len(report.lrs) == 200
        head = sum(report.losses[:20]) / 20
        tail = sum(report.losses[-20:]) / 20
        assert tail < head

    def test_frozen_contract_bitwise(self, tiny_dataset):
        model = make_model(num_layers=2, d_model=16, vocab_size=16, seed=3)
        projector = make_projector(d_in=8, d_hidden=16, d_model=16, seed=5)
        before = {name: p.detach().clone()
                  for name, p in all_named_parameters(model, projector).items()}
        config = TrainConfig(total_steps=20, peak_lr=3e-3, batch_size=4, seed=0)
        run_training(model, projector, tiny_dataset.train, config, mode="base")
        after = all_named_parameters(model, projector)
        moved = {name for name in before if not torch.equal(before[name], after[name])}
        assert moved, "training moved nothing at all"
        assert all(name.startswith("projector.") for name in moved)

    def test_heal_mode_trains_only_registry(self, tiny_dataset):
        model = make_model(num_layers=4, d_model=16, vocab_size=16, seed=3)
        projector = make_projector(d_in=8, d_hidden=16, d_model=16, seed=5)
        plan = SurgeryPlan(start=1, size=1, strategy="decoder-only")
        prune_block(model, plan)
        registry = apply_healing(model, projector, plan, rank=4, seed=9)
        before = {name: p.detach().clone()
                  for name, p in all_named_parameters(model, projector).items()}
        config = TrainConfig(total_steps=20, peak_lr=3e-3, batch_size=4, seed=0)
        run_training(model, projector, tiny_dataset.train, config,
                     mode="heal", registry=registry)
        after = all_named_parameters(model, projector)
        moved = {name for name in before if not torch.equal(before[name], after[name])}
        assert moved <= set(registry)
        assert any("adapters" in name for name in moved)

    def test_empty_registry_rejected(self, tiny_dataset):
        model = make_model(vocab_size=16)
        projector = make_projector(d_in=8)
        config = TrainConfig(total_steps=5)
        with pytest.raises(ConfigurationError, match="registry"):
            run_training(model, projector, tiny_dataset.train, config,
                         mode="heal", registry={})

    def test_base_mode_needs_projector(self, tiny_dataset):
        model = make_model(vocab_size=16)
        config = TrainConfig(total_steps=5)
        with pytest.raises(ConfigurationError, match="projector"):
            run_training(model, None, tiny_dataset.train, config, mode="base")

    def test_unknown_mode_rejected(self, tiny_dataset):
        model = make_model(vocab_size=16)
        projector = make_projector(d_in=8)
        config = TrainConfig(total_steps=5)
        with pytest.raises(ConfigurationError, match="mode"):
            run_training(model, projector, tiny_dataset.train, config, mode="anneal")

    def test_empty_dataset_rejected(self):
        model = make_model(vocab_size=16)
        projector = make_projector(d_in=8)
        config = TrainConfig(total_steps=5)
        with pytest.raises(ConfigurationError, match="empty"):
            run_training(model, projector, [], config, mode="base")

    def test_same_seed_same_losses(self, tiny_dataset):
        losses = []
        for _ in range(2):
            model = make_model(num_layers=2, d_model=16, vocab_size=16, seed=3)
            projector = make_projector(d_in=8, d_hidden=16, d_model=16, seed=5)
            config = TrainConfig(total_steps=10, peak_lr=3e-3, batch_size=4, seed=0)
            report = run_training(model, projector, tiny_dataset.train, config,
                                  mode="base")
            losses.append(report.losses)
        assert losses[0] == losses[1]

    def test_direct_train_entry_point(self, tiny_dataset):
        from speechprune.data import assemble_utterance

        model = make_model(num_layers=2, d_model=16, vocab_size=16, seed=3)
        projector = make_projector(d_in=8, d_hidden=16, d_model=16, seed=5)
        utts = list(tiny_dataset.train)

        def rows_fn(indices):
            return [assemble_utterance(utts[i], projector, model.embed.weight)
                    for i in indices]

        registry = {f"projector.{n}": p for n, p in projector.named_parameters()}
        config = TrainConfig(total_steps=5, batch_size=4, seed=0)
        report = train(model, projector, rows_fn, config, registry, len(utts))
        assert report.steps_executed == 5
        assert report.lrs[0] == pytest.approx(config.peak_lr)


class TestLossCsv:
    def test_format(self, tmp_path, tiny_dataset):
        model = make_model(num_layers=2, d_model=16, vocab_size=16, seed=3)
        projector = make_projector(d_in=8, d_hidden=16, d_model=16, seed=5)
        config = TrainConfig(total_steps=4, batch_size=4, seed=0)
        report = run_training(model, projector, tiny_dataset.train, config,
                              mode="base")
        path = tmp_path / "loss.csv"
        write_loss_csv(path, report)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["step", "loss", "lr"]
        assert len(rows) == 1 + 4
        assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3"]
        assert float(rows[1][1]) == pytest.approx(report.losses[0], abs=1e-6)
