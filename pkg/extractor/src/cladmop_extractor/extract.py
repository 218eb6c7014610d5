"""Run a causal language model over eligibility criteria and dump per-level
hidden states.

Levels are captured post-block: the hidden state after blocks 6, 12 and 18
(coarse/medium/fine) plus the model's final output (last). Inference runs
sample by sample with no sampling or dropout, so a fixed model revision and
input file always produce the identical store.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .store import validate_store, write_store

logger = logging.getLogger(__name__)

DEFAULT_LEVEL_BLOCKS = (6, 12, 18)
DEFAULT_MAX_TOKENS = 512


class ExtractionError(RuntimeError):
    pass


@dataclass
class ExtractionJob:
    input_path: str
    model_id: str
    output_path: str
    max_tokens: int = DEFAULT_MAX_TOKENS
    device: str = "cpu"
    level_blocks: tuple[int, int, int] = DEFAULT_LEVEL_BLOCKS


@dataclass
class ExtractionSummary:
    d_llm: int
    trial_ids: list[str] = field(default_factory=list)
    token_counts: dict[str, int] = field(default_factory=dict)
    truncated: list[str] = field(default_factory=list)


def read_criteria(path) -> list[tuple[str, str]]:
    """(trial id, criteria text) pairs from the trial JSON-lines format."""
    pairs = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                trial_id = obj["nct_id"]
                text = obj["criteria_text"]
            except (json.JSONDecodeError, KeyError) as e:
                raise ExtractionError(f"{path}: line {lineno}: {e}") from None
            if trial_id in seen:
                raise ExtractionError(f"{path}: duplicate nct_id {trial_id!r}")
            if not text.strip():
                raise ExtractionError(f"{trial_id}: empty criteria text")
            seen.add(trial_id)
            pairs.append((trial_id, text))
    if not pairs:
        raise ExtractionError(f"{path}: no trials")
    return pairs


def load_model(model_id: str, device: str = "cpu"):
    from transformers import AutoModel, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(model_id)
    model = AutoModel.from_pretrained(model_id)
    model.eval()
    model.to(device)
    return tokenizer, model


def extract(job: ExtractionJob) -> ExtractionSummary:
    pairs = read_criteria(job.input_path)
    try:
        tokenizer, model = load_model(job.model_id, job.device)
    except Exception as e:
        raise ExtractionError(f"cannot load model {job.model_id!r}: {e}") from e

    n_blocks = int(model.config.num_hidden_layers)
    if max(job.level_blocks) > n_blocks:
        raise ExtractionError(
            f"model has {n_blocks} blocks, cannot capture at {job.level_blocks}"
        )
    d_llm = int(model.config.hidden_size)

    summary = ExtractionSummary(d_llm=d_llm)
    records: dict[str, tuple[np.ndarray, ...]] = {}
    for trial_id, text in pairs:
        full_len = len(tokenizer(text)["input_ids"])
        enc = tokenizer(text, truncation=True, max_length=job.max_tokens,
                        return_tensors="pt").to(job.device)
        if full_len > job.max_tokens:
            logger.warning("%s: %d tokens truncated to %d", trial_id, full_len,
                           job.max_tokens)
            summary.truncated.append(trial_id)
        with torch.no_grad():
            out = model(**enc, output_hidden_states=True)
        hidden = out.hidden_states
        levels = [hidden[b][0] for b in job.level_blocks]
        levels.append(out.last_hidden_state[0])
        mats = tuple(
            lv.to(torch.float32).cpu().numpy() for lv in levels
        )
        n_c = mats[0].shape[0]
        if any(m.shape != (n_c, d_llm) for m in mats):
            raise ExtractionError(f"{trial_id}: level shapes disagree")
        records[trial_id] = mats
        summary.trial_ids.append(trial_id)
        summary.token_counts[trial_id] = n_c

    write_store(job.output_path, d_llm, records)
    checked_d_llm, checked_ids = validate_store(job.output_path)
    if checked_d_llm != d_llm or set(checked_ids) != set(summary.trial_ids):
        raise ExtractionError(f"{job.output_path}: store failed self-validation")
    _write_meta(job, summary)
    logger.info("wrote %d records (d_llm=%d) to %s", len(checked_ids), d_llm,
                job.output_path)
    return summary


def _write_meta(job: ExtractionJob, summary: ExtractionSummary) -> None:
    blocks = ",".join(str(b) for b in job.level_blocks)
    line = (
        f"model={job.model_id} d_llm={summary.d_llm} max_tokens={job.max_tokens} "
        f"levels=post-block hidden states at blocks {blocks}; "
        "last level is the model's final output"
    )
    with open(str(job.output_path) + ".meta", "w", encoding="utf-8") as fh:
        fh.write(line + "\n")
