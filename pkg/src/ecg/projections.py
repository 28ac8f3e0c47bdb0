"""Projection blocks mapping encoder hidden states to the shared retrieval
representation and that representation to compressed generation context.

Each block is a stack of 4 identical gated-residual layers:

    h_next = sigmoid(w_gate . h + b_gate) * h + relu(W_proj LN(h) + b_proj)

with the ReLU dropped on the final layer so outputs are not confined to
positive values. The gate is a per-row scalar (w_gate has shape [1, d])
broadcast across the row's features. The gate bias starts large and
positive so each layer begins close to a pass-through.

The retrieval projection divides its output by sqrt(m) to normalize the
inner products the similarity search consumes; the compression projection
multiplies by sqrt(m) first, undoing that scale before its own block. Only
one set of vectors is ever stored: compression context is always derived
from the stored retrieval vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

BLOCK_LAYERS = 4

# Init keeps the 4-layer stack within 5% of a pass-through (max-norm, unit-scale
# inputs): the gate bias must satisfy sigmoid(b)^4 >= 0.95 and the projection
# branch must start near zero. sigmoid(6.0) = 0.9975; a plain 1/sqrt(d) weight
# scale would make the ReLU branch as large as the input itself.
GATE_BIAS_INIT = 6.0
PROJ_INIT_GAIN = 0.02


@dataclass(frozen=True)
class MultiVectorEmbedding:
    """Retrieval vectors for one text: n rows of dimension m, 1/sqrt(m)-scaled."""

    source_id: int
    vectors: np.ndarray

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError(f"embedding needs shape [n, m] with n >= 1, got {self.vectors.shape}")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class CompressedContext:
    """Generation-ready context vectors derived from a MultiVectorEmbedding."""

    source_id: int
    vectors: Tensor


def init_proj_params(prefix: str, d: int, rng: np.random.Generator, dtype=None) -> dict[str, Tensor]:
    """Scaled-down uniform weights, zero projection bias, large positive gate bias."""
    bound = PROJ_INIT_GAIN / math.sqrt(d)
    params: dict[str, Tensor] = {}
    for layer in range(BLOCK_LAYERS):
        base = f"{prefix}.layer{layer}"
        params[f"{base}.w_gate"] = Tensor(
            rng.uniform(-bound, bound, size=(1, d)), requires_grad=True, dtype=dtype
        )
        params[f"{base}.b_gate"] = Tensor(
            np.full((1,), GATE_BIAS_INIT), requires_grad=True, dtype=dtype
        )
        params[f"{base}.w_proj"] = Tensor(
            rng.uniform(-bound, bound, size=(d, d)), requires_grad=True, dtype=dtype
        )
        params[f"{base}.b_proj"] = Tensor(np.zeros(d), requires_grad=True, dtype=dtype)
    return params


def block_forward(h: Tensor, params: dict[str, Tensor], prefix: str, eps: float = 1e-5) -> Tensor:
    """Apply the 4 gated-residual layers; no ReLU on the last."""
    d = h.shape[-1]
    if params[f"{prefix}.layer0.w_proj"].shape != (d, d):
        raise T.DimensionError(
            f"{prefix} block built for d={params[f'{prefix}.layer0.w_proj'].shape[0]}, input has d={d}"
        )
    for layer in range(BLOCK_LAYERS):
        base = f"{prefix}.layer{layer}"
        gate = T.sigmoid(T.add(T.matmul(h, T.transpose(params[f"{base}.w_gate"])), params[f"{base}.b_gate"]))
        branch = T.add(T.matmul(T.layer_norm(h, eps), T.transpose(params[f"{base}.w_proj"])), params[f"{base}.b_proj"])
        if layer < BLOCK_LAYERS - 1:
            branch = T.relu(branch)
        h = T.add(T.scale_rows(h, gate), branch)
    return h


def ret_project(hidden: Tensor, params: dict[str, Tensor], eps: float = 1e-5) -> Tensor:
    """Hidden states -> retrieval vectors, scaled by 1/sqrt(m) (m = d here)."""
    out = block_forward(hidden, params, "ret", eps)
    return T.mul(out, 1.0 / math.sqrt(out.shape[-1]))


def comp_project(ret_vectors: Tensor, params: dict[str, Tensor], eps: float = 1e-5) -> Tensor:
    """Retrieval vectors -> compressed generation context (undo the scale first)."""
    d = params["comp.layer0.w_proj"].shape[0]
    if ret_vectors.shape[-1] != d:
        raise T.DimensionError(
            f"compression block expects m = d = {d}, got vectors of dim {ret_vectors.shape[-1]}"
        )
    rescaled = T.mul(ret_vectors, math.sqrt(ret_vectors.shape[-1]))
    return block_forward(rescaled, params, "comp", eps)
