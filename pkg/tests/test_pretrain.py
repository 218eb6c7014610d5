"""Pair-matching loss against a scalar-loop oracle, plus the training loop."""

import math

import numpy as np
import pytest

from cladmop import numerics as nm
from cladmop.criteria import ToyCriteriaEncoder
from cladmop.data_pipeline import TrialRecord
from cladmop.dm_branch import ArchConfig
from cladmop.encoders import IcdTree, SmilesSegmentDict
from cladmop.model import TrialOutcomeModel
from cladmop.pretrain import (
    PairBatch,
    PretrainConfig,
    avgpool,
    pretrain_loss,
    retrieval_eval,
    select_threshold,
    train_pretrain,
    zero_shot_score,
)


def scalar_loop_loss_oracle(f_c, f_dm, tau):
    """Independent re-derivation with plain python floats: scaled logits,
    identity labels, row- and column-wise cross-entropy averaged."""
    n, d = f_c.shape
    logits = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(d):
                s += float(f_c[i, k]) * float(f_dm[j, k])
            logits[i][j] = math.exp(tau) * s

    def ce(rows):
        total = 0.0
        for i, row in enumerate(rows):
            mx = max(row)
            denom = sum(math.exp(v - mx) for v in row)
            total += -(row[i] - mx - math.log(denom))
        return total / len(rows)

    cols = [[logits[i][j] for i in range(n)] for j in range(n)]
    return (ce(logits) + ce(cols)) / 2.0


def make_batch(f_c, f_dm):
    ids = [f"NCT{i}" for i in range(f_c.shape[0])]
    return PairBatch(nm.constant(f_c, dtype=np.float64),
                     nm.constant(f_dm, dtype=np.float64), ids)


class TestAvgpool:
    def test_single_row(self):
        x = nm.constant([[1.0, 2.0, 3.0]])
        np.testing.assert_allclose(avgpool(x).data, [[1.0, 2.0, 3.0]])

    def test_symmetry(self):
        x = nm.constant([[1.0, 3.0], [3.0, 1.0]])
        np.testing.assert_allclose(avgpool(x).data, [[2.0, 2.0]])

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(7, 5))
        want = [sum(float(x[i, j]) for i in range(7)) / 7 for j in range(5)]
        got = avgpool(nm.constant(x, dtype=np.float64)).data[0]
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestPretrainLoss:
    def test_single_pair_is_zero(self):
        rng = np.random.default_rng(1)
        batch = make_batch(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)))
        assert pretrain_loss(batch, tau=0.6).item() == 0.0

    def test_all_equal_embeddings_give_log_n(self):
        f = np.ones((2, 4))
        loss = pretrain_loss(make_batch(f, f), tau=0.6).item()
        assert abs(loss - math.log(2.0)) < 1e-9

    def test_hand_evaluated_two_by_two(self):
        # pooled embeddings chosen so the pre-scaling logit matrix is
        # [[2,0],[0,2]]; tau=0 keeps it unscaled
        f_c = np.array([[2.0, 0.0], [0.0, 2.0]])
        f_dm = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = pretrain_loss(make_batch(f_c, f_dm), tau=0.0).item()
        want = -math.log(math.exp(2.0) / (math.exp(2.0) + 1.0))
        assert abs(loss - want) < 1e-9
        assert abs(want - 0.126928) < 1e-6

    def test_matches_scalar_oracle_on_random_batches(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            f_c = rng.normal(size=(8, 4))
            f_dm = rng.normal(size=(8, 4))
            got = pretrain_loss(make_batch(f_c, f_dm), tau=0.6).item()
            want = scalar_loop_loss_oracle(f_c, f_dm, tau=0.6)
            assert abs(got - want) < 1e-9

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        f_c = rng.normal(size=(6, 4))
        f_dm = rng.normal(size=(6, 4))
        perm = rng.permutation(6)
        a = pretrain_loss(make_batch(f_c, f_dm), tau=0.6).item()
        b = pretrain_loss(make_batch(f_c[perm], f_dm[perm]), tau=0.6).item()
        assert abs(a - b) < 1e-9

    def test_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            batch = make_batch(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)))
            assert pretrain_loss(batch, tau=0.6).item() >= 0.0

    def test_gradient_wrt_embeddings(self):
        rng = np.random.default_rng(5)
        p_c = nm.Parameter(rng.uniform(-1, 1, size=(4, 3)))
        p_dm = nm.Parameter(rng.uniform(-1, 1, size=(4, 3)))

        def f():
            return pretrain_loss(
                PairBatch(p_c.tensor(), p_dm.tensor(), list("abcd")), tau=0.6
            )

        assert nm.finite_diff_check(f, [p_c, p_dm]) < 1e-3

    def test_non_finite_rejected(self):
        f = np.ones((2, 2))
        bad = f.copy()
        bad[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            pretrain_loss(make_batch(bad, f), tau=0.6)


def tiny_tree():
    return IcdTree(
        {"A00-B99": "ICD10", "C00-D49": "ICD10", "A00": "A00-B99",
         "A01": "A00-B99", "C34": "C00-D49", "C50": "C00-D49"},
        "ICD10",
    )


def tiny_arch(**overrides):
    base = dict(d_dm=8, num_heads=2, d_mol=16, enrich_layers=1, grouping_layers=1,
                self_layers=1, final_centroids=4)
    base.update(overrides)
    return ArchConfig(**base)


def synthetic_trials(n, seed=0, labeled=None):
    rng = np.random.default_rng(seed)
    atoms = ["C", "N", "O", "CC", "CO", "CN", "CCO", "CCN"]
    codes = ["A00", "A01", "C34", "C50"]
    words = ["adult", "pediatric", "stage", "prior", "therapy", "naive",
             "metastatic", "localized", "biopsy", "confirmed", "refractory",
             "relapsed", "screening", "cohort", "arm", "dose"]
    trials = []
    for i in range(n):
        text = " ".join(rng.choice(words, size=6, replace=True)) + f" trial{i}"
        trials.append(TrialRecord(
            nct_id=f"NCT{i:04d}",
            phase="II",
            smiles=[str(rng.choice(atoms))],
            icd_codes=[str(c) for c in rng.choice(codes, size=2, replace=False)],
            criteria_text=text,
            start_date="2014-01-01",
            label=labeled,
        ))
    return trials


def build_tiny_model(seed=7, d_llm=16, arch=None):
    arch = arch or tiny_arch()
    seg = SmilesSegmentDict.hash_fallback(d_mol=arch.d_mol, seed=seed)
    encoder = ToyCriteriaEncoder(seed=seed, d_llm=d_llm)
    return TrialOutcomeModel.build(arch, seg, tiny_tree(), encoder, seed=seed)


class TestTrainPretrain:
    def test_overfits_32_trials_to_perfect_retrieval(self):
        model = build_tiny_model(seed=7)
        trials = synthetic_trials(32, seed=7, labeled=1)
        cfg = PretrainConfig(batch_size=32, learning_rate=3e-3, epochs=500,
                             seed=7, val_fraction=0.0, early_stop_top1=1.0)
        result = train_pretrain(model, trials, cfg)
        acc, _ = retrieval_eval(model, trials)
        assert acc == 1.0
        assert len(result.curve) <= 500
        assert result.curve[-1]["train_loss"] < math.log(32)

    def test_deterministic_given_seed(self):
        def run():
            model = build_tiny_model(seed=7)
            trials = synthetic_trials(8, seed=7, labeled=1)
            cfg = PretrainConfig(batch_size=8, learning_rate=1e-3, epochs=3,
                                 seed=7, val_fraction=0.25)
            result = train_pretrain(model, trials, cfg)
            return [e["train_loss"] for e in result.curve], model.state()

        curve_a, state_a = run()
        curve_b, state_b = run()
        assert curve_a == curve_b
        assert all(np.array_equal(state_a[k], state_b[k]) for k in state_a)

    def test_frozen_encoder_unchanged(self):
        model = build_tiny_model(seed=3)
        trials = synthetic_trials(6, seed=3, labeled=1)
        t0 = trials[0]
        before = {
            level: model.encode_criteria(t0).level(level).data.tobytes()
            for level in ("coarse", "medium", "fine", "last")
        }
        cfg = PretrainConfig(batch_size=6, learning_rate=1e-3, epochs=2, seed=3,
                             val_fraction=0.0)
        train_pretrain(model, trials, cfg)
        fresh = ToyCriteriaEncoder(seed=3, d_llm=model.d_llm)
        after = fresh.encode(t0)
        for level, payload in before.items():
            assert after.level(level).data.tobytes() == payload

    def test_empty_dataset_rejected(self):
        model = build_tiny_model()
        with pytest.raises(ValueError, match="empty"):
            train_pretrain(model, [], PretrainConfig(epochs=1))

    def test_failed_trial_rejected(self):
        model = build_tiny_model()
        trials = synthetic_trials(4, labeled=0)
        with pytest.raises(ValueError, match="successful"):
            train_pretrain(model, trials, PretrainConfig(epochs=1))


class TestRetrievalEval:
    def test_duplicated_inputs_resolve_ties_pessimistically(self):
        model = build_tiny_model(seed=5)
        t = synthetic_trials(1, seed=5)[0]
        twin = TrialRecord(**{**t.to_json_dict(), "nct_id": "NCT9999"})
        acc, sim = retrieval_eval(model, [t, twin])
        assert acc == 0.0
        assert sim.shape == (2, 2)

    def test_untrained_accuracy_near_chance(self):
        # row i hits only when the diagonal beats n-1 exchangeable columns
        n = 4
        accs = []
        for seed in range(100):
            model = build_tiny_model(seed=seed, d_llm=8)
            trials = synthetic_trials(n, seed=seed)
            acc, _ = retrieval_eval(model, trials)
            accs.append(acc)
        mean = float(np.mean(accs))
        p = 1.0 / n
        band = 3.0 * math.sqrt(p * (1 - p) / (100 * n))
        assert abs(mean - p) <= band


class TestZeroShot:
    def test_orthogonal_embeddings_score_half(self):
        model = build_tiny_model(seed=9)
        t = synthetic_trials(1, seed=9)[0]
        # zero the joint-space projection: pooled criteria maps to the zero
        # vector, so the logit vanishes regardless of the drug-disease side
        w, b = model.params.llm_proj["last"]
        w.value[...] = 0.0
        b.value[...] = 0.0
        score, call = zero_shot_score(model, t)
        assert score == 0.5
        assert call == 1

    def test_threshold_selection_matches_brute_force(self):
        scores = [0.2, 0.6, 0.9]
        labels = [0, 1, 1]
        t = select_threshold(scores, labels)

        def f1_at(th):
            tp = sum(1 for s, y in zip(scores, labels) if s >= th and y == 1)
            fp = sum(1 for s, y in zip(scores, labels) if s >= th and y == 0)
            fn = sum(1 for s, y in zip(scores, labels) if s < th and y == 1)
            return 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0

        dense = [f1_at(x) for x in np.linspace(-0.5, 1.5, 2001)]
        assert abs(f1_at(t) - max(dense)) < 1e-12

    def test_score_monotone_in_similarity(self):
        model = build_tiny_model(seed=11)
        trials = synthetic_trials(6, seed=11)
        scored = []
        for t in trials:
            crit = model.encode_criteria(t)
            f_c = model.f_c(crit).data.reshape(-1)
            f_dm = model.f_dm(t, crit).data.reshape(-1)
            dot = float(np.dot(f_c.astype(np.float64), f_dm.astype(np.float64)))
            scored.append((dot, zero_shot_score(model, t)[0]))
        scored.sort()
        for (_, a), (_, b) in zip(scored, scored[1:]):
            assert b >= a
