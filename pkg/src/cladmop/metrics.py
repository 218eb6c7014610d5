"""Evaluation metrics and the bootstrap protocol.

ROC-AUC uses the midrank formulation (ties count half); PR-AUC is average
precision over the per-example ranking with deterministic tie ordering by
(score descending, id ascending). Bootstrap evaluation repeats each metric
on seeded 80% subsamples and reports mean and standard deviation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .seeding import seeded_rng

DEFAULT_METRICS = ("f1", "pr_auc", "roc_auc", "accuracy")


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ScoredExample:
    trial_id: str
    score: float
    label: int

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"{self.trial_id}: non-finite score")
        if self.label not in (0, 1):
            raise ValueError(f"{self.trial_id}: label must be 0 or 1")


def roc_auc(examples: list[ScoredExample]) -> float:
    """Probability that a random positive outranks a random negative."""
    labels = np.array([e.label for e in examples])
    scores = np.array([e.score for e in examples], dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pr_auc(examples: list[ScoredExample]) -> float:
    """Average precision over the deterministic ranking."""
    n_pos = sum(e.label for e in examples)
    if n_pos == 0:
        raise UndefinedMetricError("pr_auc needs at least one positive")
    ranked = sorted(examples, key=lambda e: (-e.score, e.trial_id))
    tp = 0
    total = 0.0
    for rank, e in enumerate(ranked, start=1):
        if e.label == 1:
            tp += 1
            total += tp / rank
    return total / n_pos


def f1_at(examples: list[ScoredExample], threshold: float = 0.5) -> float:
    """F1 of the binary calls score >= threshold; 0 when degenerate."""
    tp = sum(1 for e in examples if e.score >= threshold and e.label == 1)
    fp = sum(1 for e in examples if e.score >= threshold and e.label == 0)
    fn = sum(1 for e in examples if e.score < threshold and e.label == 1)
    denom = 2 * tp + fp + fn
    return (2 * tp / denom) if denom else 0.0


def accuracy_at(examples: list[ScoredExample], threshold: float = 0.5) -> float:
    if not examples:
        raise UndefinedMetricError("accuracy of an empty set")
    hits = sum(1 for e in examples if (e.score >= threshold) == bool(e.label))
    return hits / len(examples)


_METRIC_FNS = {
    "f1": f1_at,
    "pr_auc": lambda ex: pr_auc(ex),
    "roc_auc": lambda ex: roc_auc(ex),
    "accuracy": accuracy_at,
}


@dataclass
class MetricStat:
    mean: float
    std: float


@dataclass
class EvalReport:
    metrics: dict[str, MetricStat]
    n_draws: int
    draw_fraction: float
    subset_name: str
    notes: list[str] = field(default_factory=list)

    def csv_rows(self) -> list[str]:
        rows = ["metric,mean,std,n_draws,subset"]
        for name in sorted(self.metrics):
            stat = self.metrics[name]
            rows.append(
                f"{name},{stat.mean:.6f},{stat.std:.6f},{self.n_draws},"
                f"{self.subset_name}"
            )
        return rows

    def to_json(self) -> str:
        payload = {
            "subset": self.subset_name,
            "n_draws": self.n_draws,
            "draw_fraction": self.draw_fraction,
            "metrics": {
                name: {"mean": stat.mean, "std": stat.std}
                for name, stat in sorted(self.metrics.items())
            },
            "notes": self.notes,
        }
        return json.dumps(payload, sort_keys=True, indent=2)


def bootstrap_eval(examples: list[ScoredExample],
                   metric_names: tuple[str, ...] = DEFAULT_METRICS,
                   n_draws: int = 10, fraction: float = 0.8, seed: int = 0,
                   subset_name: str = "full", max_resample_attempts: int = 100,
                   max_workers: int = 1) -> EvalReport:
    """Seeded subsampling without replacement; draws on which a metric is
    undefined are resampled with a note. Draw seeds are derived
    independently, so running draws across up to ``max_workers`` threads
    cannot change the report."""
    if not examples:
        raise ValueError("bootstrap over an empty example set")
    for name in metric_names:
        if name not in _METRIC_FNS:
            raise ValueError(f"unknown metric {name!r}")
    take = max(1, int(math.floor(fraction * len(examples))))

    def run_draw(draw: int) -> tuple[dict[str, float], list[str]]:
        draw_notes: list[str] = []
        for attempt in range(max_resample_attempts):
            rng = seeded_rng(seed, "bootstrap", draw, attempt)
            idx = rng.choice(len(examples), size=take, replace=False)
            sample = [examples[i] for i in idx]
            try:
                return (
                    {name: _METRIC_FNS[name](sample) for name in metric_names},
                    draw_notes,
                )
            except UndefinedMetricError as e:
                draw_notes.append(f"draw {draw} attempt {attempt} resampled: {e}")
        raise UndefinedMetricError(
            f"draw {draw}: no valid subsample in {max_resample_attempts} attempts"
        )

    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(run_draw, range(n_draws)))
    else:
        outcomes = [run_draw(d) for d in range(n_draws)]

    notes: list[str] = []
    per_metric: dict[str, list[float]] = {name: [] for name in metric_names}
    for values, draw_notes in outcomes:
        notes.extend(draw_notes)
        for name, v in values.items():
            per_metric[name].append(v)
    stats = {
        name: MetricStat(float(np.mean(vals)), float(np.std(vals)))
        for name, vals in per_metric.items()
    }
    return EvalReport(stats, n_draws, fraction, subset_name, notes)


@dataclass
class PredictedCall:
    trial_id: str
    call: int
    label: int


def gain(ours: list[PredictedCall], baseline: list[PredictedCall]) -> int:
    """Correct predictions gained over the baseline on the identical subset."""
    ours_by_id = {c.trial_id: c for c in ours}
    base_by_id = {c.trial_id: c for c in baseline}
    if set(ours_by_id) != set(base_by_id):
        raise ValueError("call sets cover different trial ids")
    for tid, call in ours_by_id.items():
        if call.label != base_by_id[tid].label:
            raise ValueError(f"{tid}: label disagreement between call sets")
    correct_ours = sum(1 for c in ours if c.call == c.label)
    correct_base = sum(1 for c in baseline if c.call == c.label)
    return correct_ours - correct_base
