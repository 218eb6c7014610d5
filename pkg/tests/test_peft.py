"""LoRA adapters, prediction head, class-weighted loss, fine-tuning loop."""

import math

import numpy as np
import pytest

from cladmop import numerics as nm
from cladmop.checkpoint import diff_states
from cladmop.data_pipeline import TrialRecord
from cladmop.peft import (
    FinetuneConfig,
    LoRAAdapter,
    attach_adapters,
    derive_class_weights,
    predict,
    setup_finetune,
    train_finetune,
    weighted_bce,
)
from cladmop.seeding import seeded_rng

from test_pretrain import build_tiny_model, synthetic_trials


class TestClassWeights:
    def test_thirty_percent_success(self):
        labels = [1] * 30 + [0] * 70
        assert derive_class_weights(labels) == (0.70, 0.30)

    def test_balanced(self):
        assert derive_class_weights([0, 1, 0, 1]) == (0.5, 0.5)

    def test_counts(self):
        assert derive_class_weights([1, 1, 1, 0]) == (0.25, 0.75)

    def test_single_class_warns_and_clamps(self):
        with pytest.warns(UserWarning, match="single-class"):
            w0, w1 = derive_class_weights([1, 1, 1])
        assert (w0, w1) == (0.01, 0.99)
        assert w0 + w1 == 1.0


class TestWeightedBce:
    def test_hand_value(self):
        loss = weighted_bce([1], [0.5], omega0=0.7, omega1=0.3).item()
        assert abs(loss - 0.7 * math.log(2.0)) < 1e-9
        assert abs(loss - 0.4852) < 1e-4

    def test_confident_negative_vanishes(self):
        loss = weighted_bce([0], [1e-9], omega0=0.4, omega1=0.6).item()
        assert loss < 1e-6

    def test_unit_weights_reduce_to_plain_bce(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 2, size=16)
        p = rng.uniform(0.05, 0.95, size=16)
        got = weighted_bce(y, p, 1.0, 1.0).item()
        want = float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))
        assert abs(got - want) < 1e-12

    def test_matches_closed_form(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            y = rng.integers(0, 2, size=8)
            p = rng.uniform(0.01, 0.99, size=8)
            w0, w1 = 0.66, 0.34
            got = weighted_bce(y, p, w0, w1).item()
            want = float(np.mean(
                -w0 * y * np.log(p) - w1 * (1 - y) * np.log(1 - p)))
            assert abs(got - want) < 1e-12

    def test_gradient_matches_closed_form_through_sigmoid(self):
        rng = np.random.default_rng(2)
        z = nm.Parameter(rng.uniform(-2, 2, size=(6, 1)))
        y = rng.integers(0, 2, size=6)
        w0, w1 = 0.7, 0.3
        loss = weighted_bce(y, nm.sigmoid(z.tensor()), w0, w1)
        nm.backward(loss)
        p = 1.0 / (1.0 + np.exp(-z.value))
        yv = y.reshape(-1, 1)
        want = (-w0 * yv * (1 - p) + w1 * (1 - yv) * p) / 6.0
        np.testing.assert_allclose(z.grad, want, atol=1e-9)

    def test_midpoint_convexity_in_logit(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            z1, z2 = rng.uniform(-4, 4, size=2)
            y = int(rng.integers(0, 2))
            w0, w1 = 0.8, 0.2

            def loss(z):
                p = 1.0 / (1.0 + math.exp(-z))
                return weighted_bce([y], [p], w0, w1).item()

            mid = loss((z1 + z2) / 2.0)
            assert mid <= (loss(z1) + loss(z2)) / 2.0 + 1e-9


class TestLoRA:
    def test_factor_shapes_and_zero_delta(self):
        rng = seeded_rng(0, "t")
        adapter = LoRAAdapter.init(8, rank=4, alpha=4.0, target="x", rng=rng,
                                   dtype=np.float64)
        assert adapter.a.shape == (4, 8)
        assert adapter.b.shape == (8, 4)
        np.testing.assert_array_equal(adapter.delta().data, np.zeros((8, 8)))

    def test_effective_weight_formula(self):
        rng = seeded_rng(1, "t")
        adapter = LoRAAdapter.init(6, rank=2, alpha=8.0, target="x", rng=rng,
                                   dtype=np.float64)
        adapter.b.value[...] = rng.standard_normal((6, 2))
        want = (8.0 / 2.0) * adapter.b.value @ adapter.a.value
        np.testing.assert_allclose(adapter.delta().data, want, atol=1e-12)

    def test_identity_at_init_predictions(self):
        model = build_tiny_model(seed=21)
        cfg = FinetuneConfig(seed=21, lora_sites="both")
        setup_finetune(model, cfg)
        trials = synthetic_trials(4, seed=21)
        with_lora = [predict(model, t) for t in trials]
        # same head, adapters removed
        from cladmop.peft import detach_adapters

        detach_adapters(model)
        without = [predict(model, t) for t in trials]
        assert with_lora == without

    @pytest.mark.parametrize("sites,expect_cross,expect_self",
                             [("none", False, False), ("cross_only", True, False),
                              ("self_only", False, True), ("both", True, True)])
    def test_site_selection(self, sites, expect_cross, expect_self):
        model = build_tiny_model(seed=4)
        adapters = attach_adapters(model, sites, seed=4)
        names = set(adapters)
        has_cross = any(".cross." in n for n in names)
        has_self = any(".self" in n or ".enrich." in n for n in names)
        assert has_cross == expect_cross
        assert has_self == expect_self


class TestPredict:
    def test_zero_final_layer_gives_half(self):
        model = build_tiny_model(seed=6)
        setup_finetune(model, FinetuneConfig(seed=6))
        for t in synthetic_trials(3, seed=6):
            assert predict(model, t) == 0.5

    def test_output_in_unit_interval_and_reproducible(self):
        model = build_tiny_model(seed=8)
        cfg = FinetuneConfig(seed=8, epochs=2, batch_size=8, val_fraction=0.25)
        trials = separable_trials(16, seed=8)
        train_finetune(model, trials, cfg)
        for t in trials[:4]:
            p1 = predict(model, t)
            p2 = predict(model, t)
            assert 0.0 < p1 < 1.0
            assert p1 == p2


def separable_trials(n, seed=0):
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(n):
        label = i % 2
        marker = "responder cohort" if label else "placebo washout"
        filler = " ".join(rng.choice(["adult", "stage", "prior", "dose"], size=3))
        trials.append(TrialRecord(
            nct_id=f"NCT{i:04d}", phase="III",
            smiles=[["C", "N", "O", "CC"][i % 4]],
            icd_codes=[["A00", "A01", "C34", "C50"][(i // 2) % 4]],
            criteria_text=f"{marker} {filler}",
            start_date="2013-06-01", label=label,
        ))
    return trials


class TestTrainFinetune:
    def test_only_head_and_adapters_change(self):
        model = build_tiny_model(seed=10)
        cfg = FinetuneConfig(seed=10, epochs=2, batch_size=8, lora_sites="both",
                             val_fraction=0.25)
        setup_finetune(model, cfg)
        before = model.state()
        train_finetune(model, separable_trials(16, seed=10), cfg)
        changed = diff_states(before, model.state())
        assert changed
        for name in changed:
            assert name.startswith("head.") or name.startswith("lora."), name
        backbone = {n for n in before if not (n.startswith("head.")
                                              or n.startswith("lora."))}
        assert backbone.isdisjoint(changed)

    @pytest.mark.parametrize("sites", ["none", "cross_only", "self_only", "both"])
    def test_all_site_arms_train(self, sites):
        model = build_tiny_model(seed=12)
        cfg = FinetuneConfig(seed=12, epochs=1, batch_size=8, lora_sites=sites,
                             val_fraction=0.25)
        result = train_finetune(model, separable_trials(16, seed=12), cfg)
        assert len(result.curve) == 1

    def test_overfits_separable_set_to_perfect_f1(self):
        from cladmop.metrics import ScoredExample, f1_at

        model = build_tiny_model(seed=14)
        trials = separable_trials(64, seed=14)
        cfg = FinetuneConfig(seed=14, epochs=60, batch_size=64, head_lr=3e-2,
                             lora_lr=1e-2, val_fraction=0.0, early_stop_f1=1.0)
        train_finetune(model, trials, cfg)
        examples = [ScoredExample(t.nct_id, predict(model, t), t.label)
                    for t in trials]
        assert f1_at(examples, 0.5) == 1.0

    def test_unlabeled_rejected(self):
        model = build_tiny_model(seed=16)
        trials = synthetic_trials(4, seed=16)  # label=None
        with pytest.raises(ValueError, match="labeled"):
            train_finetune(model, trials, FinetuneConfig(seed=16, epochs=1))

    def test_empty_rejected(self):
        model = build_tiny_model(seed=17)
        with pytest.raises(ValueError, match="empty"):
            train_finetune(model, [], FinetuneConfig(seed=17))
