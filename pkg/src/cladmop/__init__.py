"""Two-branch clinical-trial outcome model.

A frozen text encoder supplies multi-level token embeddings of eligibility
criteria; a lightweight trainable branch encodes drug molecules and target
diseases and fuses the criteria levels through grouping blocks. Training is
two-stage: contrastive pair-matching pre-training on successful trials, then
parameter-efficient fine-tuning (low-rank adapters plus a prediction head)
on labeled outcomes.
"""

__version__ = "0.1.0"
