"""Multi-head attention built from tape primitives.

One :class:`AttentionParams` carries the four square projections of a single
attention layer. Cross-attention and self-attention share the same forward:
self-attention is the ``q_src is kv_src`` case. Low-rank adapters attached
to a projection are folded into the effective weight at forward time, so the
tape differentiates through them for free.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    concat_cols,
    matmul,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
)

PROJECTION_NAMES = ("w_q", "w_k", "w_v", "w_o")


class AttentionParams:
    """Projection weights for one attention layer."""

    def __init__(self, w_q: Parameter, w_k: Parameter, w_v: Parameter, w_o: Parameter,
                 num_heads: int):
        d_model = w_q.shape[0]
        if d_model % num_heads != 0:
            raise ShapeError(f"d_model {d_model} not divisible by {num_heads} heads")
        for name, p in zip(PROJECTION_NAMES, (w_q, w_k, w_v, w_o)):
            if p.shape != (d_model, d_model):
                raise ShapeError(
                    f"{name} must be {d_model}x{d_model}, got {p.shape}"
                )
        self.w_q = w_q
        self.w_k = w_k
        self.w_v = w_v
        self.w_o = w_o
        self.num_heads = num_heads
        self.d_model = d_model
        self.d_k = d_model // num_heads
        # projection name -> low-rank adapter, attached during fine-tuning
        self.adapters: dict = {}

    @classmethod
    def init(cls, d_model: int, num_heads: int, rng: np.random.Generator,
             name: str = "", dtype=np.float32) -> "AttentionParams":
        std = 1.0 / math.sqrt(d_model)

        def fresh(proj):
            w = rng.standard_normal((d_model, d_model)) * std
            return Parameter(w.astype(dtype), name=f"{name}.{proj}")

        return cls(*(fresh(p) for p in PROJECTION_NAMES), num_heads=num_heads)

    def parameters(self) -> list[Parameter]:
        return [self.w_q, self.w_k, self.w_v, self.w_o]

    def projection(self, which: str) -> Tensor:
        """Effective projection: base weight plus any adapter delta."""
        base = getattr(self, which).tensor()
        adapter = self.adapters.get(which)
        if adapter is None:
            return base
        return add(base, adapter.delta())


def multi_head_attention(q_src: Tensor, kv_src: Tensor, p: AttentionParams) -> Tensor:
    """Scaled dot-product attention over ``num_heads`` independent slices.

    ``q_src`` is m x d_model, ``kv_src`` is n x d_model; the output is
    m x d_model (concatenated head outputs projected by w_o).
    """
    if q_src.data.ndim != 2 or q_src.shape[1] != p.d_model:
        raise ShapeError(f"query width {q_src.shape} does not match d_model {p.d_model}")
    if kv_src.data.ndim != 2 or kv_src.shape[1] != p.d_model:
        raise ShapeError(f"key/value width {kv_src.shape} does not match d_model {p.d_model}")
    q = matmul(q_src, p.projection("w_q"))
    k = matmul(kv_src, p.projection("w_k"))
    v = matmul(kv_src, p.projection("w_v"))
    inv_sqrt_dk = 1.0 / math.sqrt(p.d_k)
    heads = []
    for h in range(p.num_heads):
        lo, hi = h * p.d_k, (h + 1) * p.d_k
        qh, kh, vh = slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi)
        weights = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_dk))
        heads.append(matmul(weights, vh))
    return matmul(concat_cols(heads), p.projection("w_o"))


def residual_self_attention(x: Tensor, stack: list[AttentionParams]) -> Tensor:
    """Self-attention layers with a residual connection around each."""
    for layer in stack:
        x = add(x, multi_head_attention(x, x, layer))
    return x
