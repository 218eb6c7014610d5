"""Deterministic encoders for drug molecules and target diseases.

Molecules are SMILES strings split into segments; each segment has a fixed
base vector from a dictionary (loaded from file, or derived from a seeded
hash when no dictionary is available). Diseases are ICD-10 codes embedded
by averaging learnable node embeddings along the code's path in the code
tree. Both token streams are then enriched by residual self-attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    AttentionParams,
    Parameter,
    Tensor,
    add,
    constant,
    gather_rows,
    matmul,
    residual_self_attention,
)
from .seeding import seeded_rng

SOURCE_TYPES = ("molecule", "disease", "criteria", "aggregate")
SOURCE_TYPE_INDEX = {name: i for i, name in enumerate(SOURCE_TYPES)}

# two-character organic-subset atoms kept as single segments
TWO_CHAR_ATOMS = ("Cl", "Br")


class SmilesParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at index {position}")
        self.position = position


def segment_smiles(smiles: str) -> list[str]:
    """Split a SMILES string into segments whose concatenation reproduces it.

    Bracket atoms ``[...]`` and the two-character atoms Cl/Br are single
    segments; every other character (atoms, bonds, ring digits, branches)
    is its own segment.
    """
    if not smiles:
        raise ValueError("empty SMILES string")
    segments = []
    i = 0
    n = len(smiles)
    while i < n:
        ch = smiles[i]
        if ch == "[":
            end = smiles.find("]", i + 1)
            if end < 0:
                raise SmilesParseError("unbalanced '['", i)
            segments.append(smiles[i : end + 1])
            i = end + 1
        elif ch == "]":
            raise SmilesParseError("unbalanced ']'", i)
        elif smiles[i : i + 2] in TWO_CHAR_ATOMS:
            segments.append(smiles[i : i + 2])
            i += 2
        else:
            segments.append(ch)
            i += 1
    return segments


class SmilesSegmentDict:
    """Fixed per-segment base vectors of width ``d_mol``.

    ``file_loaded`` dictionaries contain exactly the segments of their file
    and reject unknown ones; ``hash_fallback`` dictionaries derive a
    deterministic N(0,1) vector from a seeded hash of the segment string.
    """

    def __init__(self, entries: dict[str, np.ndarray], d_mol: int, source: str,
                 seed: int = 0):
        if source not in ("file_loaded", "hash_fallback"):
            raise ValueError(f"unknown dictionary source {source!r}")
        for seg, vec in entries.items():
            if vec.shape != (d_mol,):
                raise ValueError(
                    f"segment {seg!r} has width {vec.shape[0]}, expected {d_mol}"
                )
        self.entries = dict(entries)
        self.d_mol = d_mol
        self.source = source
        self.seed = seed

    @classmethod
    def hash_fallback(cls, d_mol: int = 64, seed: int = 0) -> "SmilesSegmentDict":
        return cls({}, d_mol, "hash_fallback", seed=seed)

    @classmethod
    def from_file(cls, path) -> "SmilesSegmentDict":
        entries: dict[str, np.ndarray] = {}
        d_mol = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    seg, values = line.split("\t")
                    vec = np.array([float(v) for v in values.split(",")],
                                   dtype=np.float32)
                except ValueError as e:
                    raise ValueError(f"{path}: line {lineno}: {e}") from None
                if d_mol is None:
                    d_mol = vec.shape[0]
                elif vec.shape[0] != d_mol:
                    raise ValueError(
                        f"{path}: line {lineno}: width {vec.shape[0]} != {d_mol}"
                    )
                entries[seg] = vec
        if not entries:
            raise ValueError(f"{path}: empty segment dictionary")
        return cls(entries, d_mol, "file_loaded")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for seg in sorted(self.entries):
                values = ",".join(repr(float(v)) for v in self.entries[seg])
                fh.write(f"{seg}\t{values}\n")

    def vector(self, segment: str) -> np.ndarray:
        vec = self.entries.get(segment)
        if vec is not None:
            return vec
        if self.source == "file_loaded":
            raise KeyError(f"segment {segment!r} not in dictionary")
        rng = seeded_rng(self.seed, "smiles-segment", segment)
        vec = rng.standard_normal(self.d_mol).astype(np.float32)
        self.entries[segment] = vec
        return vec


class IcdTree:
    """ICD-10 code hierarchy: a parent map under a single synthetic root."""

    def __init__(self, parent: dict[str, str], root: str):
        self.parent = dict(parent)
        self.root = root
        self.nodes = frozenset(parent) | {root}
        self._validate()
        self.chapters = sorted(c for c, p in self.parent.items() if p == root)
        self._chapter_index = {c: i for i, c in enumerate(self.chapters)}
        self.node_index = {n: i for i, n in enumerate(sorted(self.nodes))}

    def _validate(self) -> None:
        for node in self.parent:
            seen = {node}
            cur = node
            while cur != self.root:
                cur = self.parent.get(cur)
                if cur is None:
                    raise ValueError(f"node {node!r} does not reach the root")
                if cur in seen:
                    raise ValueError(f"cycle through node {cur!r}")
                seen.add(cur)

    @classmethod
    def from_file(cls, path) -> "IcdTree":
        parent: dict[str, str] = {}
        root = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    child, par = line.split("\t")
                except ValueError:
                    raise ValueError(
                        f"{path}: line {lineno}: expected 'child<TAB>parent'"
                    ) from None
                if par == "ROOT":
                    if root is not None and root != child:
                        raise ValueError(f"{path}: line {lineno}: second root {child!r}")
                    root = child
                else:
                    parent[child] = par
        if root is None:
            raise ValueError(f"{path}: no root (node with parent ROOT)")
        return cls(parent, root)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{self.root}\tROOT\n")
            for child in sorted(self.parent):
                fh.write(f"{child}\t{self.parent[child]}\n")

    def __contains__(self, code: str) -> bool:
        return code in self.nodes

    def path_from_chapter(self, code: str) -> list[str]:
        """Nodes from the chapter-level ancestor down to the code itself."""
        if code not in self.nodes:
            raise KeyError(f"unknown ICD code {code!r}")
        if code == self.root:
            raise KeyError(f"code {code!r} is the tree root, not a disease code")
        path = [code]
        cur = code
        while self.parent[cur] != self.root:
            cur = self.parent[cur]
            path.append(cur)
        return path[::-1]

    def chapter(self, code: str) -> str:
        return self.path_from_chapter(code)[0]

    def chapter_index(self, code: str) -> int:
        return self._chapter_index[self.chapter(code)]


@dataclass
class TokenSequence:
    """A block of same-width tokens with their provenance."""

    tokens: Tensor
    source_tag: str
    group_ids: list[int]

    def __post_init__(self):
        if self.source_tag not in SOURCE_TYPES:
            raise ValueError(f"unknown source tag {self.source_tag!r}")
        if self.tokens.shape[0] < 1:
            raise ValueError("token sequence must hold at least one token")
        if len(self.group_ids) != self.tokens.shape[0]:
            raise ValueError(
                f"group_ids length {len(self.group_ids)} != token count "
                f"{self.tokens.shape[0]}"
            )

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


@dataclass
class MoleculeEncoderParams:
    """Projection from dictionary width to model width plus per-molecule slots."""

    proj_w: Parameter
    proj_b: Parameter
    pos_table: Parameter

    @classmethod
    def build(cls, d_mol: int, d_dm: int, max_molecules: int,
              rng: np.random.Generator, dtype=np.float32) -> "MoleculeEncoderParams":
        std = 1.0 / np.sqrt(d_mol)
        return cls(
            proj_w=Parameter((rng.standard_normal((d_mol, d_dm)) * std).astype(dtype),
                             name="mol.proj_w"),
            proj_b=Parameter(np.zeros((1, d_dm), dtype=dtype), name="mol.proj_b"),
            pos_table=Parameter(rng.standard_normal((max_molecules, d_dm)).astype(dtype),
                                name="mol.pos_table"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.proj_w, self.proj_b, self.pos_table]


@dataclass
class DiseaseEncoderParams:
    """Learnable tree-node embeddings plus per-chapter slots."""

    node_table: Parameter
    chapter_table: Parameter
    tree: IcdTree = field(repr=False)

    @classmethod
    def build(cls, tree: IcdTree, d_dm: int, rng: np.random.Generator,
              dtype=np.float32) -> "DiseaseEncoderParams":
        return cls(
            node_table=Parameter(
                rng.standard_normal((len(tree.nodes), d_dm)).astype(dtype),
                name="dis.node_table"),
            chapter_table=Parameter(
                rng.standard_normal((len(tree.chapters), d_dm)).astype(dtype),
                name="dis.chapter_table"),
            tree=tree,
        )

    def parameters(self) -> list[Parameter]:
        return [self.node_table, self.chapter_table]


def embed_molecules(mols: list[str], seg_dict: SmilesSegmentDict,
                    params: MoleculeEncoderParams) -> TokenSequence:
    """One token per SMILES segment, tagged with its molecule's ordinal.

    Molecules are put in canonical (lexicographic) order before ordinals are
    assigned, so the positional slot follows the molecule rather than its
    input position and reordering the input list cannot change the output.
    """
    if not mols:
        raise ValueError("trial has no drug molecules")
    ordered = sorted(mols)
    if len(ordered) > params.pos_table.shape[0]:
        raise ValueError(
            f"{len(ordered)} molecules exceed the positional table "
            f"({params.pos_table.shape[0]} slots)"
        )
    base_rows = []
    group_ids: list[int] = []
    for ordinal, smiles in enumerate(ordered):
        for seg in segment_smiles(smiles):
            base_rows.append(seg_dict.vector(seg))
            group_ids.append(ordinal)
    base = constant(np.stack(base_rows), dtype=params.proj_w.value.dtype)
    projected = add(matmul(base, params.proj_w.tensor()), params.proj_b.tensor())
    positional = gather_rows(params.pos_table.tensor(), group_ids)
    return TokenSequence(add(projected, positional), "molecule", group_ids)


def embed_diseases(codes: list[str], tree: IcdTree,
                   params: DiseaseEncoderParams) -> TokenSequence:
    """One token per ICD code: depth-weighted mean of path-node embeddings
    plus a chapter-shared slot embedding."""
    if not codes:
        raise ValueError("trial has no disease codes")
    for code in codes:
        if code not in tree or code == tree.root:
            raise KeyError(f"unknown ICD code {code!r}")
    ordered = sorted(codes)
    dtype = params.node_table.value.dtype
    # averaging matrix: row per code, 1/len(path) at each path node
    avg = np.zeros((len(ordered), len(tree.nodes)), dtype=dtype)
    chapter_ids: list[int] = []
    for i, code in enumerate(ordered):
        path = tree.path_from_chapter(code)
        for node in path:
            avg[i, tree.node_index[node]] = 1.0 / len(path)
        chapter_ids.append(tree.chapter_index(code))
    path_mean = matmul(constant(avg, dtype=dtype), params.node_table.tensor())
    chapter = gather_rows(params.chapter_table.tensor(), chapter_ids)
    return TokenSequence(add(path_mean, chapter), "disease", chapter_ids)


def enrich(seq: TokenSequence, stack: list[AttentionParams]) -> TokenSequence:
    """Pass tokens through a residual self-attention stack; provenance kept."""
    for layer in stack:
        if layer.d_model != seq.width:
            raise ValueError(
                f"enrichment width mismatch: tokens {seq.width}, layer {layer.d_model}"
            )
    return TokenSequence(
        residual_self_attention(seq.tokens, stack), seq.source_tag, seq.group_ids
    )
