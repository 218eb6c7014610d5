"""Grouping-block fusion of criteria levels into the drug-disease branch.

A grouping layer cross-attends from trainable centroid tokens onto its input
tokens, pinning the output length at the centroid count, then refines the
aggregate with residual self-attention. A grouping block chains layers with
halving centroid counts (default 100 -> 50 -> 25). Fusion runs one block per
criteria level: coarse first, then medium, then fine, each block consuming
the previous aggregate, and a final layer norm scales the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .criteria import MultiLevelCriteriaEmbedding
from .encoders import (
    SOURCE_TYPES,
    SOURCE_TYPE_INDEX,
    DiseaseEncoderParams,
    IcdTree,
    MoleculeEncoderParams,
    TokenSequence,
    enrich,
)
from .numerics import (
    AttentionParams,
    Parameter,
    Tensor,
    add,
    concat_rows,
    layer_norm,
    matmul,
    multi_head_attention,
    slice_rows,
)
from .seeding import seeded_rng

FUSION_LEVELS = ("coarse", "medium", "fine")
LAYER_NORM_EPS = 1e-5


@dataclass
class ArchConfig:
    """Architecture hyperparameters of the trainable branch."""

    d_dm: int = 16
    num_heads: int = 8
    d_mol: int = 64
    enrich_layers: int = 4
    grouping_layers: int = 3   # G: layers per block
    self_layers: int = 2       # S: self-attention layers per grouping layer
    final_centroids: int = 25
    max_molecules: int = 16
    head_hidden: int = 64
    dtype: type = np.float32

    def __post_init__(self):
        if self.d_dm % self.num_heads != 0:
            raise ValueError(
                f"d_dm {self.d_dm} not divisible by {self.num_heads} heads"
            )
        if self.grouping_layers < 1 or self.self_layers < 0:
            raise ValueError("need G >= 1 grouping layers and S >= 0 self layers")

    def centroid_schedule(self) -> list[int]:
        """Centroid counts per layer, halving down to ``final_centroids``."""
        return [
            self.final_centroids * 2 ** (self.grouping_layers - 1 - i)
            for i in range(self.grouping_layers)
        ]


class GroupingLayerParams:
    def __init__(self, centroids: Parameter, cross_attn: AttentionParams,
                 self_stack: list[AttentionParams]):
        if centroids.shape[0] < 1:
            raise ValueError("a grouping layer needs at least one centroid")
        self.centroids = centroids
        self.cross_attn = cross_attn
        self.self_stack = list(self_stack)

    @property
    def num_centroids(self) -> int:
        return self.centroids.shape[0]

    @classmethod
    def build(cls, num_centroids: int, arch: ArchConfig, rng: np.random.Generator,
              name: str) -> "GroupingLayerParams":
        centroids = Parameter(
            rng.standard_normal((num_centroids, arch.d_dm)).astype(arch.dtype),
            name=f"{name}.centroids",
        )
        cross = AttentionParams.init(arch.d_dm, arch.num_heads, rng,
                                     name=f"{name}.cross", dtype=arch.dtype)
        selfs = [
            AttentionParams.init(arch.d_dm, arch.num_heads, rng,
                                 name=f"{name}.self.{s}", dtype=arch.dtype)
            for s in range(arch.self_layers)
        ]
        return cls(centroids, cross, selfs)

    def parameters(self) -> list[Parameter]:
        out = [self.centroids] + self.cross_attn.parameters()
        for s in self.self_stack:
            out.extend(s.parameters())
        return out

    def attention_layers(self) -> list[tuple[str, AttentionParams]]:
        return [("cross", self.cross_attn)] + [
            (f"self.{i}", s) for i, s in enumerate(self.self_stack)
        ]


class GroupingBlockParams:
    def __init__(self, layers: list[GroupingLayerParams]):
        if not layers:
            raise ValueError("a grouping block needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.num_centroids != 2 * b.num_centroids:
                raise ValueError(
                    "centroid counts must halve between consecutive layers, got "
                    f"{a.num_centroids} -> {b.num_centroids}"
                )
        self.layers = list(layers)

    @property
    def output_length(self) -> int:
        return self.layers[-1].num_centroids

    @classmethod
    def build(cls, arch: ArchConfig, rng: np.random.Generator,
              name: str) -> "GroupingBlockParams":
        return cls([
            GroupingLayerParams.build(c, arch, rng, f"{name}.layer{i}")
            for i, c in enumerate(arch.centroid_schedule())
        ])

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


def grouping_layer_forward(p: GroupingLayerParams, seq: TokenSequence) -> TokenSequence:
    """Cross-attend centroid queries onto the input tokens, then refine.

    Output length is exactly the centroid count regardless of input length.
    """
    agg = multi_head_attention(p.centroids.tensor(), seq.tokens, p.cross_attn)
    for layer in p.self_stack:
        agg = add(agg, multi_head_attention(agg, agg, layer))
    return TokenSequence(agg, "aggregate", [0] * p.num_centroids)


def grouping_block_forward(b: GroupingBlockParams, seq: TokenSequence) -> TokenSequence:
    for layer in b.layers:
        seq = grouping_layer_forward(layer, seq)
    return seq


class DMBranchParams:
    """Every trainable weight of the drug-disease branch.

    Exactly one grouping block per fused criteria level, plus one linear
    projection per embedding level (the ``last`` projection maps the pooled
    criteria embedding into the joint space for the contrastive objective).
    """

    def __init__(self, arch: ArchConfig, mol: MoleculeEncoderParams,
                 mol_enrich: list[AttentionParams], dis: DiseaseEncoderParams,
                 dis_enrich: list[AttentionParams],
                 blocks: list[GroupingBlockParams],
                 llm_proj: dict[str, tuple[Parameter, Parameter]],
                 source_type: Parameter, norm_gain: Parameter, norm_bias: Parameter):
        if len(blocks) != len(FUSION_LEVELS):
            raise ValueError(f"expected {len(FUSION_LEVELS)} grouping blocks")
        self.arch = arch
        self.mol = mol
        self.mol_enrich = mol_enrich
        self.dis = dis
        self.dis_enrich = dis_enrich
        self.blocks = blocks
        self.llm_proj = llm_proj
        self.source_type = source_type
        self.norm_gain = norm_gain
        self.norm_bias = norm_bias

    @classmethod
    def build(cls, arch: ArchConfig, tree: IcdTree, d_llm: int,
              seed: int) -> "DMBranchParams":
        rng = seeded_rng(seed, "dm-branch-init")
        mol = MoleculeEncoderParams.build(arch.d_mol, arch.d_dm, arch.max_molecules,
                                          rng, dtype=arch.dtype)
        mol_enrich = [
            AttentionParams.init(arch.d_dm, arch.num_heads, rng,
                                 name=f"mol.enrich.{i}", dtype=arch.dtype)
            for i in range(arch.enrich_layers)
        ]
        dis = DiseaseEncoderParams.build(tree, arch.d_dm, rng, dtype=arch.dtype)
        dis_enrich = [
            AttentionParams.init(arch.d_dm, arch.num_heads, rng,
                                 name=f"dis.enrich.{i}", dtype=arch.dtype)
            for i in range(arch.enrich_layers)
        ]
        blocks = [
            GroupingBlockParams.build(arch, rng, name=f"block{b}")
            for b in range(len(FUSION_LEVELS))
        ]
        std = 1.0 / math.sqrt(d_llm)
        llm_proj = {}
        for level in FUSION_LEVELS + ("last",):
            w = Parameter((rng.standard_normal((d_llm, arch.d_dm)) * std)
                          .astype(arch.dtype), name=f"llm_proj.{level}.w")
            b = Parameter(np.zeros((1, arch.d_dm), dtype=arch.dtype),
                          name=f"llm_proj.{level}.b")
            llm_proj[level] = (w, b)
        source_type = Parameter(
            rng.standard_normal((len(SOURCE_TYPES), arch.d_dm)).astype(arch.dtype),
            name="source_type")
        norm_gain = Parameter(np.ones((1, arch.d_dm), dtype=arch.dtype),
                              name="final_norm.gain")
        norm_bias = Parameter(np.zeros((1, arch.d_dm), dtype=arch.dtype),
                              name="final_norm.bias")
        return cls(arch, mol, mol_enrich, dis, dis_enrich, blocks, llm_proj,
                   source_type, norm_gain, norm_bias)

    def parameters(self) -> list[Parameter]:
        out = self.mol.parameters()
        for layer in self.mol_enrich:
            out.extend(layer.parameters())
        out.extend(self.dis.parameters())
        for layer in self.dis_enrich:
            out.extend(layer.parameters())
        for block in self.blocks:
            out.extend(block.parameters())
        for w, b in self.llm_proj.values():
            out.extend([w, b])
        out.extend([self.source_type, self.norm_gain, self.norm_bias])
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def attention_sites(self) -> list[tuple[str, str, AttentionParams]]:
        """(site name, kind in {cross, self}, layer) for every attention layer."""
        sites = []
        for i, layer in enumerate(self.mol_enrich):
            sites.append((f"mol.enrich.{i}", "self", layer))
        for i, layer in enumerate(self.dis_enrich):
            sites.append((f"dis.enrich.{i}", "self", layer))
        for b, block in enumerate(self.blocks):
            for l, glayer in enumerate(block.layers):
                for kind_name, attn in glayer.attention_layers():
                    kind = "cross" if kind_name == "cross" else "self"
                    sites.append((f"block{b}.layer{l}.{kind_name}", kind, attn))
        return sites

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def _tagged(self, seq: TokenSequence) -> Tensor:
        row = slice_rows(self.source_type.tensor(),
                         SOURCE_TYPE_INDEX[seq.source_tag],
                         SOURCE_TYPE_INDEX[seq.source_tag] + 1)
        return add(seq.tokens, row)

    def project_level(self, crit: MultiLevelCriteriaEmbedding, level: str) -> Tensor:
        w, b = self.llm_proj[level]
        return add(matmul(crit.level(level), w.tensor()), b.tensor())

    def fuse_forward(self, mol: TokenSequence, dis: TokenSequence,
                     crit: MultiLevelCriteriaEmbedding,
                     trace: list | None = None) -> Tensor:
        """Fuse enriched drug/disease tokens with the three criteria levels.

        Block 1 sees molecules, diseases and the coarse level; each later
        block sees the previous aggregate and the next level. Every token
        gets its source-type embedding before entering a block, and the
        final aggregate is layer-normalized. ``trace``, when given, collects
        (block input length, block output array) pairs.
        """
        mol_e = enrich(mol, self.mol_enrich)
        dis_e = enrich(dis, self.dis_enrich)
        current: TokenSequence | None = None
        for i, level in enumerate(FUSION_LEVELS):
            crit_tokens = TokenSequence(
                self.project_level(crit, level), "criteria",
                [0] * crit.n_c,
            )
            if i == 0:
                parts = [self._tagged(mol_e), self._tagged(dis_e),
                         self._tagged(crit_tokens)]
            else:
                parts = [self._tagged(current), self._tagged(crit_tokens)]
            merged = TokenSequence(
                concat_rows(parts), "aggregate",
                [0] * sum(p.shape[0] for p in parts),
            )
            current = grouping_block_forward(self.blocks[i], merged)
            if trace is not None:
                trace.append((merged.tokens.shape[0], current.tokens.data.copy()))
        return layer_norm(current.tokens, self.norm_gain.tensor(),
                          self.norm_bias.tensor(), LAYER_NORM_EPS)


def fuse_forward(params: DMBranchParams, mol: TokenSequence, dis: TokenSequence,
                 crit: MultiLevelCriteriaEmbedding) -> Tensor:
    return params.fuse_forward(mol, dis, crit)


# ---------------------------------------------------------------------------
# attention op counting


@dataclass
class AttentionSiteCount:
    """Multiply-accumulate counts for one attention layer."""

    name: str
    query_len: int
    kv_len: int
    d_model: int
    touches_criteria: bool

    @property
    def attn_macs(self) -> int:
        # score and value mixing: q*kv*d each
        return 2 * self.query_len * self.kv_len * self.d_model

    @property
    def proj_macs(self) -> int:
        d2 = self.d_model * self.d_model
        return d2 * (2 * self.query_len + 2 * self.kv_len)


@dataclass
class OpCountReport:
    """Per-site costs for grouping fusion vs. flat concatenation fusion."""

    n_mol: int
    n_dis: int
    n_crit: int
    grouping_sites: list[AttentionSiteCount] = field(default_factory=list)
    flat_sites: list[AttentionSiteCount] = field(default_factory=list)

    @property
    def grouping_fusion_macs(self) -> int:
        """Attention-map cost of the cross-attention sites that read criteria."""
        return sum(s.attn_macs for s in self.grouping_sites if s.touches_criteria)

    @property
    def flat_fusion_macs(self) -> int:
        """Attention-map cost of self-attention over the accumulated sequence."""
        return sum(s.attn_macs for s in self.flat_sites if s.touches_criteria)

    @property
    def grouping_total_macs(self) -> int:
        return sum(s.attn_macs + s.proj_macs for s in self.grouping_sites)

    @property
    def flat_total_macs(self) -> int:
        return sum(s.attn_macs + s.proj_macs for s in self.flat_sites)


def count_attention_ops(arch: ArchConfig, n_mol: int, n_dis: int,
                        n_crit: int) -> OpCountReport:
    """MAC counts per attention site for the grouping architecture and for a
    hypothetical fusion that concatenates every level onto one growing
    sequence processed by self-attention."""
    if min(n_mol, n_dis, n_crit) < 1:
        raise ValueError("token counts must be positive")
    report = OpCountReport(n_mol, n_dis, n_crit)
    d = arch.d_dm
    schedule = arch.centroid_schedule()

    for side, n in (("mol", n_mol), ("dis", n_dis)):
        for i in range(arch.enrich_layers):
            report.grouping_sites.append(
                AttentionSiteCount(f"{side}.enrich.{i}", n, n, d, False))

    for b in range(len(FUSION_LEVELS)):
        kv = (n_mol + n_dis + n_crit) if b == 0 else (arch.final_centroids + n_crit)
        for l, c in enumerate(schedule):
            report.grouping_sites.append(
                AttentionSiteCount(f"block{b}.layer{l}.cross", c, kv, d, l == 0))
            for s in range(arch.self_layers):
                report.grouping_sites.append(
                    AttentionSiteCount(f"block{b}.layer{l}.self.{s}", c, c, d, False))
            kv = c

    # flat variant: same enrichment, then per level the sequence grows by
    # n_crit and is processed by as many attention layers as one block holds
    for side, n in (("mol", n_mol), ("dis", n_dis)):
        for i in range(arch.enrich_layers):
            report.flat_sites.append(
                AttentionSiteCount(f"{side}.enrich.{i}", n, n, d, False))
    layers_per_level = arch.grouping_layers * (1 + arch.self_layers)
    length = n_mol + n_dis
    for b in range(len(FUSION_LEVELS)):
        length += n_crit
        for l in range(layers_per_level):
            report.flat_sites.append(
                AttentionSiteCount(f"level{b}.self.{l}", length, length, d, True))
    return report
