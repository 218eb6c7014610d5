"""Full two-branch model: inputs in, pooled embeddings and predictions out."""

from __future__ import annotations

import numpy as np

from .criteria import CachingEncoder, MultiLevelCriteriaEmbedding
from .dm_branch import ArchConfig, DMBranchParams
from .encoders import (
    IcdTree,
    SmilesSegmentDict,
    TokenSequence,
    embed_diseases,
    embed_molecules,
)
from .numerics import Parameter, Tensor, add, concat_cols, matmul, mean_rows

DEFAULT_TAU = 0.6


class TrialOutcomeModel:
    """Trainable branch plus a frozen criteria encoder.

    ``head`` stays ``None`` until fine-tuning attaches a prediction head;
    ``adapters`` maps site/projection names to low-rank adapters.
    """

    def __init__(self, arch: ArchConfig, params: DMBranchParams,
                 seg_dict: SmilesSegmentDict, tree: IcdTree, encoder,
                 tau: float = DEFAULT_TAU):
        self.arch = arch
        self.params = params
        self.seg_dict = seg_dict
        self.tree = tree
        self.encoder = CachingEncoder(encoder)
        self.tau = tau
        self.head = None
        self.adapters: dict[str, object] = {}

    @classmethod
    def build(cls, arch: ArchConfig, seg_dict: SmilesSegmentDict, tree: IcdTree,
              encoder, seed: int, tau: float = DEFAULT_TAU) -> "TrialOutcomeModel":
        params = DMBranchParams.build(arch, tree, encoder.d_llm, seed)
        return cls(arch, params, seg_dict, tree, encoder, tau)

    @property
    def d_llm(self) -> int:
        return self.encoder.d_llm

    # ------------------------------------------------------------------
    # forward paths

    def encode_criteria(self, trial) -> MultiLevelCriteriaEmbedding:
        return self.encoder.encode(trial)

    def input_tokens(self, trial) -> tuple[TokenSequence, TokenSequence]:
        mol = embed_molecules(trial.smiles, self.seg_dict, self.params.mol)
        dis = embed_diseases(trial.icd_codes, self.tree, self.params.dis)
        return mol, dis

    def fused(self, trial, crit: MultiLevelCriteriaEmbedding | None = None) -> Tensor:
        if crit is None:
            crit = self.encode_criteria(trial)
        mol, dis = self.input_tokens(trial)
        return self.params.fuse_forward(mol, dis, crit)

    def f_dm(self, trial, crit=None) -> Tensor:
        """Pooled drug-disease embedding, one row of width d_dm."""
        return mean_rows(self.fused(trial, crit))

    def f_c(self, crit: MultiLevelCriteriaEmbedding) -> Tensor:
        """Pooled criteria embedding projected into the joint space."""
        pooled = mean_rows(crit.last)
        w, b = self.params.llm_proj["last"]
        return add(matmul(pooled, w.tensor()), b.tensor())

    def head_features(self, trial, crit=None) -> Tensor:
        """Concatenated pooled last-level criteria and drug-disease rows."""
        if crit is None:
            crit = self.encode_criteria(trial)
        return concat_cols([mean_rows(crit.last), self.f_dm(trial, crit)])

    # ------------------------------------------------------------------
    # parameter bookkeeping

    def named_parameters(self) -> dict[str, Parameter]:
        named = dict(self.params.named_parameters())
        for name, adapter in self.adapters.items():
            named[f"lora.{name}.A"] = adapter.a
            named[f"lora.{name}.B"] = adapter.b
        if self.head is not None:
            named.update(self.head.named_parameters())
        return named

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        named = self.named_parameters()
        if strict and set(named) != set(state):
            missing = sorted(set(named) - set(state))
            extra = sorted(set(state) - set(named))
            raise KeyError(
                f"checkpoint/model parameter sets differ: missing {missing}, "
                f"unexpected {extra}"
            )
        for name, value in state.items():
            p = named.get(name)
            if p is None:
                raise KeyError(f"checkpoint parameter {name!r} not in model")
            if p.value.shape != value.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: model {p.value.shape}, "
                    f"checkpoint {value.shape}"
                )
            p.value[...] = value
