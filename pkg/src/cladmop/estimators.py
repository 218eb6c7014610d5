"""Scikit-learn style wrappers around the two training stages.

``PairMatchingPretrainer`` is transformer-shaped: fit on successful trials,
transform any trials into the pooled two-branch feature vectors.
``TrialOutcomeClassifier`` is classifier-shaped: optional pair-matching
pre-training, then parameter-efficient fine-tuning on labeled trials.
Inputs are lists of :class:`TrialRecord`, validated up front.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .criteria import StoreCriteriaEncoder, EmbeddingStore, ToyCriteriaEncoder
from .data_pipeline import TrialRecord
from .dm_branch import ArchConfig
from .encoders import IcdTree, SmilesSegmentDict
from .model import TrialOutcomeModel
from .peft import FinetuneConfig, predict, train_finetune
from .pretrain import PretrainConfig, train_pretrain


def check_trial_records(X, require_labels: bool = False) -> list[TrialRecord]:
    """Validate a trial list: right type, modeling-eligible, labels present
    when required."""
    trials = list(X)
    if not trials:
        raise ValueError("empty trial list")
    for t in trials:
        if not isinstance(t, TrialRecord):
            raise TypeError(f"expected TrialRecord, got {type(t).__name__}")
        if not t.modeling_eligible:
            raise ValueError(f"{t.nct_id}: missing smiles or icd_codes")
        if require_labels and t.label is None:
            raise ValueError(f"{t.nct_id}: label required")
    return trials


def check_binary_labels(y) -> np.ndarray:
    labels = np.asarray(y)
    if labels.ndim != 1:
        raise ValueError(f"labels must be one-dimensional, got shape {labels.shape}")
    if not set(np.unique(labels)) <= {0, 1}:
        raise ValueError("labels must be 0/1")
    return labels.astype(int)


def _resolve_tree(icd_tree) -> IcdTree:
    if isinstance(icd_tree, IcdTree):
        return icd_tree
    if icd_tree is None:
        raise ValueError("icd_tree is required (IcdTree instance or file path)")
    return IcdTree.from_file(icd_tree)


def _resolve_encoder(encoder: str, seed: int, d_llm: int, store_path):
    if encoder == "toy":
        return ToyCriteriaEncoder(seed=seed, d_llm=d_llm)
    if encoder == "store":
        if store_path is None:
            raise ValueError("encoder='store' needs store_path")
        return StoreCriteriaEncoder(EmbeddingStore(store_path))
    raise ValueError(f"unknown encoder kind {encoder!r}")


class PairMatchingPretrainer(TransformerMixin, BaseEstimator):
    """Contrastive pre-training of the trainable branch on successful trials."""

    def __init__(self, icd_tree=None, encoder="toy", store_path=None, d_llm=32,
                 d_dm=16, num_heads=8, d_mol=64, enrich_layers=4,
                 grouping_layers=3, self_layers=2, final_centroids=25,
                 tau=0.6, learning_rate=1e-4, batch_size=128, epochs=50,
                 val_fraction=0.15, seed=0):
        self.icd_tree = icd_tree
        self.encoder = encoder
        self.store_path = store_path
        self.d_llm = d_llm
        self.d_dm = d_dm
        self.num_heads = num_heads
        self.d_mol = d_mol
        self.enrich_layers = enrich_layers
        self.grouping_layers = grouping_layers
        self.self_layers = self_layers
        self.final_centroids = final_centroids
        self.tau = tau
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.val_fraction = val_fraction
        self.seed = seed

    def _build_model(self) -> TrialOutcomeModel:
        arch = ArchConfig(
            d_dm=self.d_dm, num_heads=self.num_heads, d_mol=self.d_mol,
            enrich_layers=self.enrich_layers, grouping_layers=self.grouping_layers,
            self_layers=self.self_layers, final_centroids=self.final_centroids,
        )
        tree = _resolve_tree(self.icd_tree)
        seg = SmilesSegmentDict.hash_fallback(d_mol=self.d_mol, seed=self.seed)
        enc = _resolve_encoder(self.encoder, self.seed, self.d_llm, self.store_path)
        return TrialOutcomeModel.build(arch, seg, tree, enc, seed=self.seed,
                                       tau=self.tau)

    def fit(self, X, y=None):
        trials = check_trial_records(X)
        self.model_ = self._build_model()
        cfg = PretrainConfig(
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            tau=self.tau, epochs=self.epochs, seed=self.seed,
            val_fraction=self.val_fraction,
        )
        result = train_pretrain(self.model_, trials, cfg)
        self.loss_curve_ = result.curve
        self.best_epoch_ = result.best_epoch
        return self

    def transform(self, X) -> np.ndarray:
        """Pooled (criteria, drug-disease) feature rows, one per trial."""
        if not hasattr(self, "model_"):
            raise NotFittedError("fit the pretrainer first")
        trials = check_trial_records(X)
        rows = [
            self.model_.head_features(t).data.reshape(-1).astype(np.float64)
            for t in trials
        ]
        return np.stack(rows)


class TrialOutcomeClassifier(ClassifierMixin, BaseEstimator):
    """Two-stage outcome classifier over trial records.

    ``pretrain_trials`` supplies the unlabeled-stage corpus; when omitted,
    the labeled trials double as pairs, and ``pretrain_epochs=0`` skips the
    stage entirely (the fine-tuning-only ablation arm).
    """

    def __init__(self, icd_tree=None, encoder="toy", store_path=None, d_llm=32,
                 d_dm=16, num_heads=8, d_mol=64, enrich_layers=4,
                 grouping_layers=3, self_layers=2, final_centroids=25,
                 tau=0.6, pretrain_lr=1e-4, pretrain_epochs=20,
                 pretrain_trials=None, head_lr=1e-2, lora_lr=5e-2,
                 lora_sites="both", lora_rank=8, epochs=30, batch_size=128,
                 val_fraction=0.15, threshold=0.5, seed=0):
        self.icd_tree = icd_tree
        self.encoder = encoder
        self.store_path = store_path
        self.d_llm = d_llm
        self.d_dm = d_dm
        self.num_heads = num_heads
        self.d_mol = d_mol
        self.enrich_layers = enrich_layers
        self.grouping_layers = grouping_layers
        self.self_layers = self_layers
        self.final_centroids = final_centroids
        self.tau = tau
        self.pretrain_lr = pretrain_lr
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_trials = pretrain_trials
        self.head_lr = head_lr
        self.lora_lr = lora_lr
        self.lora_sites = lora_sites
        self.lora_rank = lora_rank
        self.epochs = epochs
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.threshold = threshold
        self.seed = seed

    def fit(self, X, y=None):
        if y is None:
            trials = check_trial_records(X, require_labels=True)
            labels = [t.label for t in trials]
        else:
            trials = check_trial_records(X)
            labels = check_binary_labels(y).tolist()
            trials = [
                TrialRecord(**{**t.to_json_dict(), "label": int(lab)})
                for t, lab in zip(trials, labels)
            ]
        pretrainer = PairMatchingPretrainer(
            icd_tree=self.icd_tree, encoder=self.encoder,
            store_path=self.store_path, d_llm=self.d_llm, d_dm=self.d_dm,
            num_heads=self.num_heads, d_mol=self.d_mol,
            enrich_layers=self.enrich_layers,
            grouping_layers=self.grouping_layers, self_layers=self.self_layers,
            final_centroids=self.final_centroids, tau=self.tau,
            learning_rate=self.pretrain_lr, batch_size=self.batch_size,
            epochs=self.pretrain_epochs, val_fraction=self.val_fraction,
            seed=self.seed,
        )
        if self.pretrain_epochs > 0:
            corpus = self.pretrain_trials
            if corpus is None:
                corpus = [
                    TrialRecord(**{**t.to_json_dict(), "label": 1})
                    for t in trials if t.label == 1
                ] or trials
            pretrainer.fit(check_trial_records(corpus))
            self.model_ = pretrainer.model_
        else:
            self.model_ = pretrainer._build_model()
        cfg = FinetuneConfig(
            head_lr=self.head_lr, lora_lr=self.lora_lr,
            batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
            val_fraction=self.val_fraction, lora_sites=self.lora_sites,
            lora_rank=self.lora_rank,
        )
        result = train_finetune(self.model_, trials, cfg)
        self.metric_curve_ = result.curve
        self.class_weights_ = result.class_weights
        self.classes_ = np.array([0, 1])
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("fit the classifier first")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        trials = check_trial_records(X)
        p1 = np.array([predict(self.model_, t) for t in trials])
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(int)
