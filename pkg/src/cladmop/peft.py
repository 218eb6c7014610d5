"""Parameter-efficient fine-tuning: low-rank adapters plus a prediction head.

The pre-trained branch is frozen; training touches only the head and the
adapters attached to the selected attention sites. Adapters start as an
exact identity (zero B factor), so predictions before the first step equal
the frozen model's predictions bit for bit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .metrics import ScoredExample, UndefinedMetricError, f1_at, pr_auc, roc_auc
from .numerics import (
    Adam,
    Parameter,
    Tensor,
    add,
    backward,
    clip,
    concat_rows,
    constant,
    log,
    matmul,
    mean_all,
    mul,
    relu,
    scale,
    sigmoid,
    sub,
)
from .seeding import seeded_rng

LORA_SITES = ("none", "cross_only", "self_only", "both")
PROB_EPS = 1e-7


class LoRAAdapter:
    """Additive low-rank delta on one square projection.

    Effective weight is W + (alpha/rank) * B @ A with B zero-initialized,
    so the delta is exactly zero until training moves B.
    """

    def __init__(self, a: Parameter, b: Parameter, rank: int, alpha: float,
                 target: str):
        if a.shape[0] != rank or b.shape[1] != rank:
            raise ValueError(
                f"adapter factors must be rank {rank}: A {a.shape}, B {b.shape}"
            )
        self.a = a
        self.b = b
        self.rank = rank
        self.alpha = alpha
        self.target = target

    @classmethod
    def init(cls, d_model: int, rank: int, alpha: float, target: str,
             rng: np.random.Generator, dtype=np.float32) -> "LoRAAdapter":
        a = Parameter(
            (rng.standard_normal((rank, d_model)) / math.sqrt(rank)).astype(dtype),
            name=f"lora.{target}.A")
        b = Parameter(np.zeros((d_model, rank), dtype=dtype),
                      name=f"lora.{target}.B")
        return cls(a, b, rank, alpha, target)

    def delta(self) -> Tensor:
        return scale(matmul(self.b.tensor(), self.a.tensor()), self.alpha / self.rank)

    def parameters(self) -> list[Parameter]:
        return [self.a, self.b]


def attach_adapters(model, sites: str, rank: int = 8, alpha: float = 8.0,
                    projections=("w_q", "w_k", "w_v", "w_o"),
                    seed: int = 0) -> dict[str, LoRAAdapter]:
    """Attach adapters to the chosen attention sites of the model.

    ``cross_only`` targets the grouping cross-attention layers, ``self_only``
    every self-attention layer (enrichment stacks and grouping refinement),
    ``both`` all of them.
    """
    if sites not in LORA_SITES:
        raise ValueError(f"lora sites must be one of {LORA_SITES}, got {sites!r}")
    rng = seeded_rng(seed, "lora-init")
    adapters: dict[str, LoRAAdapter] = {}
    if sites == "none":
        model.adapters = adapters
        return adapters
    wanted = {"cross_only": ("cross",), "self_only": ("self",),
              "both": ("cross", "self")}[sites]
    for site_name, kind, attn in model.params.attention_sites():
        if kind not in wanted:
            continue
        for proj in projections:
            target = f"{site_name}.{proj}"
            adapter = LoRAAdapter.init(attn.d_model, rank, alpha, target, rng,
                                       dtype=model.arch.dtype)
            attn.adapters[proj] = adapter
            adapters[target] = adapter
    model.adapters = adapters
    return adapters


def detach_adapters(model) -> None:
    for _, _, attn in model.params.attention_sites():
        attn.adapters.clear()
    model.adapters = {}


class PredictionHead:
    """Three affine layers with rectification and a residual connection;
    the final layer starts at zero so the initial output probability is 0.5."""

    def __init__(self, in_width: int, hidden: int, rng: np.random.Generator,
                 dtype=np.float32):
        std1 = 1.0 / math.sqrt(in_width)
        std2 = 1.0 / math.sqrt(hidden)
        self.w1 = Parameter((rng.standard_normal((in_width, hidden)) * std1)
                            .astype(dtype), name="head.l1.w")
        self.b1 = Parameter(np.zeros((1, hidden), dtype=dtype), name="head.l1.b")
        self.w2 = Parameter((rng.standard_normal((hidden, hidden)) * std2)
                            .astype(dtype), name="head.l2.w")
        self.b2 = Parameter(np.zeros((1, hidden), dtype=dtype), name="head.l2.b")
        self.w3 = Parameter(np.zeros((hidden, 1), dtype=dtype), name="head.l3.w")
        self.b3 = Parameter(np.zeros((1, 1), dtype=dtype), name="head.l3.b")

    def logit(self, features: Tensor) -> Tensor:
        h = relu(add(matmul(features, self.w1.tensor()), self.b1.tensor()))
        h = add(h, relu(add(matmul(h, self.w2.tensor()), self.b2.tensor())))
        return add(matmul(h, self.w3.tensor()), self.b3.tensor())

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}


@dataclass
class FinetuneConfig:
    head_lr: float = 1e-2
    lora_lr: float = 5e-2   # phase III runs use 1e-3
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    val_fraction: float = 0.15
    lora_sites: str = "both"
    lora_rank: int = 8
    lora_alpha: float = 8.0
    class_weights: tuple[float, float] | None = None  # derived when None
    early_stop_f1: float | None = None


def derive_class_weights(labels: list[int]) -> tuple[float, float]:
    """Fractions of negative and positive labels, clamped away from 0/1."""
    if not labels:
        raise ValueError("empty label list")
    frac_pos = sum(labels) / len(labels)
    omega0 = 1.0 - frac_pos
    omega1 = frac_pos
    if omega0 == 0.0 or omega1 == 0.0:
        warnings.warn("single-class training labels; clamping class weights")
        omega0 = min(max(omega0, 0.01), 0.99)
        omega1 = min(max(omega1, 0.01), 0.99)
    return omega0, omega1


def weighted_bce(y, yhat, omega0: float, omega1: float) -> Tensor:
    """Class-weighted binary cross-entropy, mean over the batch.

    The positive term carries the negative-class fraction and vice versa,
    which up-weights the minority class. Predictions are clamped to
    (eps, 1-eps) before the logs.
    """
    if not isinstance(yhat, Tensor):
        yhat = constant(np.reshape(yhat, (-1, 1)), dtype=np.float64)
    y_arr = np.reshape(np.asarray(y, dtype=yhat.data.dtype), yhat.shape)
    y_const = constant(y_arr, dtype=yhat.data.dtype)
    ones = constant(np.ones_like(y_arr), dtype=yhat.data.dtype)
    p = clip(yhat, PROB_EPS, 1.0 - PROB_EPS)
    pos = scale(mul(y_const, log(p)), -omega0)
    neg = scale(mul(sub(ones, y_const), log(sub(ones, p))), -omega1)
    return mean_all(add(pos, neg))


def predict(model, trial) -> float:
    """Probability of success from the pooled two-branch features."""
    if model.head is None:
        raise ValueError("model has no prediction head; run fine-tuning setup")
    logit = model.head.logit(model.head_features(trial))
    return sigmoid(logit).item()


def _predict_batch_tensor(model, trials) -> Tensor:
    feats = concat_rows([model.head_features(t) for t in trials])
    return sigmoid(model.head.logit(feats))


@dataclass
class FinetuneResult:
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_f1: float = -1.0
    best_state: dict | None = None
    class_weights: tuple[float, float] = (0.5, 0.5)

    def curve_rows(self) -> list[str]:
        rows = ["epoch,train_loss,val_f1,val_prauc,val_rocauc"]
        for e in self.curve:
            rows.append(
                f"{e['epoch']},{e['train_loss']:.6f},{e['val_f1']:.4f},"
                f"{_fmt(e['val_prauc'])},{_fmt(e['val_rocauc'])}"
            )
        return rows


def _fmt(v) -> str:
    return "nan" if v is None else f"{v:.4f}"


def setup_finetune(model, cfg: FinetuneConfig) -> PredictionHead:
    """Freeze the backbone, attach adapters, create the head."""
    model.params.set_trainable(False)
    attach_adapters(model, cfg.lora_sites, rank=cfg.lora_rank,
                    alpha=cfg.lora_alpha, seed=cfg.seed)
    head = PredictionHead(model.d_llm + model.arch.d_dm, model.arch.head_hidden,
                          seeded_rng(cfg.seed, "head-init"), dtype=model.arch.dtype)
    model.head = head
    return head


def train_finetune(model, trials, cfg: FinetuneConfig) -> FinetuneResult:
    """Supervised stage: only head and adapter parameters move."""
    if not trials:
        raise ValueError("empty fine-tuning dataset")
    for t in trials:
        if t.label is None:
            raise ValueError(f"{t.nct_id}: fine-tuning needs labeled trials")

    if model.head is None:
        setup_finetune(model, cfg)

    rng = seeded_rng(cfg.seed, "finetune-split")
    order = rng.permutation(len(trials))
    n_val = int(round(cfg.val_fraction * len(trials)))
    val_set = [trials[i] for i in order[:n_val]]
    train_set = [trials[i] for i in order[n_val:]]
    if not train_set:
        raise ValueError("validation fraction leaves no training trials")
    if not val_set:
        val_set = train_set

    omega = cfg.class_weights or derive_class_weights(
        [t.label for t in train_set])
    head_params = model.head.parameters()
    lora_params = [p for a in model.adapters.values() for p in a.parameters()]
    groups = [(head_params, cfg.head_lr)]
    if lora_params:
        groups.append((lora_params, cfg.lora_lr))
    opt = Adam(groups, betas=cfg.betas)

    shuffle_rng = seeded_rng(cfg.seed, "finetune-shuffle")
    result = FinetuneResult(class_weights=omega)
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(train_set), cfg.batch_size):
            chunk = [train_set[i] for i in perm[start:start + cfg.batch_size]]
            probs = _predict_batch_tensor(model, chunk)
            loss = weighted_bce([t.label for t in chunk], probs, *omega)
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(loss.item())
        val_probs = _predict_batch_tensor(model, val_set).data.reshape(-1)
        examples = [
            ScoredExample(t.nct_id, float(p), t.label)
            for t, p in zip(val_set, val_probs)
        ]
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_f1": f1_at(examples, 0.5),
            "val_prauc": _safe(pr_auc, examples),
            "val_rocauc": _safe(roc_auc, examples),
        }
        result.curve.append(entry)
        if entry["val_f1"] > result.best_val_f1:
            result.best_val_f1 = entry["val_f1"]
            result.best_epoch = epoch
            result.best_state = model.state()
        if cfg.early_stop_f1 is not None and entry["val_f1"] >= cfg.early_stop_f1:
            break
    if result.best_state is not None:
        model.load_state(result.best_state)
    return result


def _safe(metric, examples):
    try:
        return metric(examples)
    except UndefinedMetricError:
        return None
