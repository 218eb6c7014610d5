"""Pair-matching pre-training: symmetric cross-entropy over in-batch pairs.

Within a batch of successful trials, logits are exp(tau) times the pooled
criteria/drug-disease similarity matrix, the matched pair sits on the
diagonal, and the loss averages the row-wise and column-wise cross-entropy.
Only the trainable branch is optimized; the criteria encoder never moves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    Adam,
    Parameter,
    Tensor,
    add,
    backward,
    concat_rows,
    constant,
    l2_normalize_rows,
    log_softmax_rows,
    matmul,
    mean_rows,
    mul,
    scale,
    sum_all,
    transpose,
)
from .seeding import seeded_rng


@dataclass
class PretrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-4
    tau: float = 0.6
    epochs: int = 50
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    val_fraction: float = 0.15
    learnable_temperature: bool = False
    cosine_similarity: bool = False
    early_stop_top1: float | None = None


@dataclass
class PairBatch:
    """Row i of both pooled matrices comes from the same trial."""

    f_c: Tensor
    f_dm: Tensor
    trial_ids: list[str]

    def __post_init__(self):
        if self.f_c.shape != self.f_dm.shape:
            raise ValueError(
                f"pooled shapes disagree: {self.f_c.shape} vs {self.f_dm.shape}"
            )
        if self.f_c.shape[0] != len(self.trial_ids):
            raise ValueError("one trial id per batch row required")


def avgpool(seq: Tensor) -> Tensor:
    """Arithmetic mean over rows: (n, d) -> (1, d)."""
    if seq.shape[0] < 1:
        raise ValueError("avgpool of an empty sequence")
    return mean_rows(seq)


def pretrain_loss(batch: PairBatch, tau: float,
                  cosine: bool = False) -> Tensor:
    """Symmetric cross-entropy with identity labels over scaled logits."""
    if not (np.all(np.isfinite(batch.f_c.data))
            and np.all(np.isfinite(batch.f_dm.data))):
        raise ValueError("non-finite embeddings in batch")
    f_c, f_dm = batch.f_c, batch.f_dm
    if cosine:
        f_c, f_dm = l2_normalize_rows(f_c), l2_normalize_rows(f_dm)
    n = f_c.shape[0]
    logits = scale(matmul(f_c, transpose(f_dm)), math.exp(tau))
    eye = constant(np.eye(n), dtype=logits.data.dtype)
    loss_rows = scale(sum_all(mul(log_softmax_rows(logits), eye)), -1.0 / n)
    loss_cols = scale(sum_all(mul(log_softmax_rows(transpose(logits)), eye)),
                      -1.0 / n)
    return scale(add(loss_rows, loss_cols), 0.5)


def batch_embeddings(model, trials) -> PairBatch:
    f_c = concat_rows([model.f_c(model.encode_criteria(t)) for t in trials])
    f_dm = concat_rows([model.f_dm(t) for t in trials])
    return PairBatch(f_c, f_dm, [t.nct_id for t in trials])


@dataclass
class PretrainResult:
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    best_state: dict | None = None

    def curve_rows(self) -> list[str]:
        rows = ["epoch,train_loss,val_loss,top1_acc"]
        for entry in self.curve:
            rows.append(
                f"{entry['epoch']},{entry['train_loss']:.6f},"
                f"{entry['val_loss']:.6f},{entry['top1_acc']:.4f}"
            )
        return rows


def train_pretrain(model, trials, cfg: PretrainConfig) -> PretrainResult:
    """Adam on the trainable branch; the criteria encoder stays frozen.

    Every epoch logs train/validation loss and validation top-1 retrieval;
    the model is left holding the best-validation parameters.
    """
    if not trials:
        raise ValueError("empty pre-training dataset")
    for t in trials:
        if t.label is not None and t.label != 1:
            raise ValueError(
                f"{t.nct_id}: pre-training corpus must hold successful trials only"
            )

    rng = seeded_rng(cfg.seed, "pretrain-split")
    order = rng.permutation(len(trials))
    n_val = int(round(cfg.val_fraction * len(trials)))
    val_set = [trials[i] for i in order[:n_val]]
    train_set = [trials[i] for i in order[n_val:]]
    if not train_set:
        raise ValueError("validation fraction leaves no training trials")
    if not val_set:
        val_set = train_set

    params = model.params.parameters()
    extra: list[Parameter] = []
    tau_param = None
    if cfg.learnable_temperature:
        tau_param = Parameter(
            np.array([[cfg.tau]], dtype=model.arch.dtype), name="tau")
        extra.append(tau_param)
    opt = Adam.single(params + extra, lr=cfg.learning_rate, betas=cfg.betas)

    shuffle_rng = seeded_rng(cfg.seed, "pretrain-shuffle")
    result = PretrainResult()
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(len(train_set))
        epoch_losses = []
        for start in range(0, len(train_set), cfg.batch_size):
            chunk = [train_set[i] for i in perm[start:start + cfg.batch_size]]
            batch = batch_embeddings(model, chunk)
            tau = float(tau_param.value[0, 0]) if tau_param is not None else cfg.tau
            loss = pretrain_loss(batch, tau, cosine=cfg.cosine_similarity)
            opt.zero_grad()
            backward(loss)
            opt.step()
            epoch_losses.append(loss.item())
        val_batch = batch_embeddings(model, val_set)
        tau = float(tau_param.value[0, 0]) if tau_param is not None else cfg.tau
        val_loss = pretrain_loss(val_batch, tau,
                                 cosine=cfg.cosine_similarity).item()
        top1 = _top1_from_matrix(_similarity(val_batch, tau))
        result.curve.append({
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": val_loss,
            "top1_acc": top1,
        })
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            result.best_state = model.state()
        if cfg.early_stop_top1 is not None and top1 >= cfg.early_stop_top1:
            break
    if result.best_state is not None:
        model.load_state(result.best_state)
    return result


def _similarity(batch: PairBatch, tau: float) -> np.ndarray:
    return math.exp(tau) * (
        batch.f_c.data.astype(np.float64) @ batch.f_dm.data.astype(np.float64).T
    )


def _top1_from_matrix(sim: np.ndarray) -> float:
    """Top-1 hit iff the matched column strictly beats every other column;
    ties count as misses."""
    n = sim.shape[0]
    hits = 0
    for i in range(n):
        others = np.delete(sim[i], i)
        if others.size == 0 or sim[i, i] > np.max(others):
            hits += 1
    return hits / n


def retrieval_eval(model, trials) -> tuple[float, np.ndarray]:
    """Rank drug-disease embeddings for each criteria embedding."""
    if len(trials) < 2:
        raise ValueError("retrieval needs at least two trials")
    batch = batch_embeddings(model, trials)
    sim = _similarity(batch, model.tau)
    return _top1_from_matrix(sim), sim


def zero_shot_score(model, trial, threshold: float = 0.5) -> tuple[float, int]:
    """Sigmoid of the scaled pooled similarity, thresholded into a call."""
    crit = model.encode_criteria(trial)
    f_c = model.f_c(crit).data.astype(np.float64).reshape(-1)
    f_dm = model.f_dm(trial, crit).data.astype(np.float64).reshape(-1)
    logit = math.exp(model.tau) * float(np.dot(f_c, f_dm))
    score = 1.0 / (1.0 + math.exp(-logit))
    return score, int(score >= threshold)


def select_threshold(scores: list[float], labels: list[int]) -> float:
    """Threshold maximizing F1 on validation scores, by exhaustive sweep
    over the midpoints between adjacent distinct scores."""
    if len(scores) != len(labels) or not scores:
        raise ValueError("scores and labels must be nonempty and aligned")
    uniq = sorted(set(scores))
    candidates = [uniq[0] - 1.0]
    candidates += [(a + b) / 2.0 for a, b in zip(uniq, uniq[1:])]
    candidates.append(uniq[-1] + 1.0)
    best_t, best_f1 = candidates[0], -1.0
    for t in candidates:
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        fn = sum(1 for s, y in zip(scores, labels) if s < t and y == 1)
        f1 = (2 * tp / (2 * tp + fp + fn)) if (2 * tp + fp + fn) else 0.0
        if f1 > best_f1:
            best_t, best_f1 = t, f1
    return best_t
