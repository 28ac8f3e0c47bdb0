"""Training objectives.

Self-supervised stage: next-token loss on the target text conditioned on a
compressed context, plus an in-batch contrastive loss over the retrieval
vectors with a learnable temperature.

Fine-tuning stage: KL distillation from a text-reader teacher onto the
compressed-context student, InfoNCE over the positive document and all
negatives, and a margin-MSE distillation of teacher relevance margins with
a learnable scale on the teacher side.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import EcgModel, MixedInput
from .tensor import Tensor


def pair_similarity(query_vectors: Tensor, doc_vectors: Tensor) -> Tensor:
    """Differentiable mean-pooled late-interaction score between two [n, m] tensors."""
    if query_vectors.shape[-1] != doc_vectors.shape[-1]:
        raise T.DimensionError(f"similarity dims differ: {query_vectors.shape} vs {doc_vectors.shape}")
    sims = T.matmul(query_vectors, T.transpose(doc_vectors))
    return T.tmean(T.tmax(sims, axis=1))


def token_cross_entropy(logits: Tensor, rows: np.ndarray, labels: list[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` at prediction ``rows``."""
    logp = T.log_softmax(logits)
    return T.neg(T.tmean(T.pick(logp, rows, labels)))


def lm_loss(model: EcgModel, target_ids: list[int], compressed: Tensor) -> Tensor:
    """Mean next-token cross-entropy over the target tokens only.

    The context vectors and their wrapper tokens are input-only; loss
    positions cover each target token plus the closing <eos>.
    """
    if not target_ids:
        raise ValueError("lm_loss needs a non-empty target")
    v = model.vocab
    mixed = MixedInput()
    mixed.append_tokens([v.emb_start_id])
    mixed.append_vectors(compressed)
    mixed.append_tokens([v.emb_stop_id])
    prefix_len = len(mixed)
    labels = list(target_ids) + [v.eos_id]
    mixed.append_tokens(labels)
    _, logits = model.forward(mixed)
    rows = np.arange(prefix_len - 1, prefix_len - 1 + len(labels))
    return token_cross_entropy(logits, rows, labels)


def sequence_loss(model: EcgModel, prompt_ids: list[int], target_ids: list[int]) -> Tensor:
    """Mean cross-entropy on target tokens (plus <eos>) after a token prompt."""
    if not target_ids:
        raise ValueError("sequence_loss needs a non-empty target")
    labels = list(target_ids) + [model.vocab.eos_id]
    mixed = MixedInput()
    mixed.append_tokens(list(prompt_ids) + labels)
    _, logits = model.forward(mixed)
    rows = np.arange(len(prompt_ids) - 1, len(prompt_ids) - 1 + len(labels))
    return token_cross_entropy(logits, rows, labels)


def infonce(sims: Tensor, tau) -> Tensor:
    """Temperature-scaled contrastive loss; positives sit on the diagonal.

    Works for the in-batch form (square [B, B] matrix) and the single-query
    form ([1, 1+N] row with the positive at index 0).
    """
    if sims.ndim != 2:
        raise T.DimensionError(f"infonce expects a 2-D similarity matrix, got {sims.shape}")
    rows, cols = sims.shape
    if cols < rows:
        raise T.DimensionError(f"similarity matrix {sims.shape} has fewer columns than rows")
    if isinstance(tau, Tensor):
        if tau.data.item() <= 0.0:
            raise ValueError(f"temperature must be positive, got {tau.data.item()}")
        scaled = T.scale(sims, T.exp(T.neg(T.log(tau))))
    else:
        if tau <= 0.0:
            raise ValueError(f"temperature must be positive, got {tau}")
        scaled = T.mul(sims, 1.0 / tau)
    logp = T.log_softmax(scaled)
    idx = np.arange(rows)
    return T.neg(T.tmean(T.pick(logp, idx, idx)))


def margin_mse(
    student_scores: Tensor,
    teacher_scores: np.ndarray,
    positive_index: int,
    negative_indices: list[int],
    alpha,
) -> Tensor:
    """Mean squared difference between student margins and scaled teacher margins.

    Margins are positive-minus-negative over the hard negatives only; alpha
    multiplies the teacher margins and may be a learnable scalar tensor.
    """
    if not negative_indices:
        raise ValueError("margin_mse needs at least one hard negative")
    teacher_scores = np.asarray(teacher_scores, dtype=np.float64)
    s_pos = T.gather_rows(student_scores, [positive_index])
    s_neg = T.gather_rows(student_scores, negative_indices)
    student_margins = T.add(T.neg(s_neg), s_pos)
    teacher_margins = Tensor(teacher_scores[positive_index] - teacher_scores[negative_indices])
    if isinstance(alpha, Tensor):
        scaled_teacher = T.scale(teacher_margins, alpha)
    else:
        scaled_teacher = T.mul(teacher_margins, float(alpha))
    diff = T.sub(student_margins, scaled_teacher)
    return T.tmean(T.mul(diff, diff))


def kl_distill(student_logits: Tensor, teacher_logits: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean over selected positions of KL(teacher || student).

    The teacher side is a constant; only the student's log-probabilities
    carry gradient. ``mask`` selects the answer positions (all rows when
    omitted).
    """
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if student_logits.shape != teacher_logits.shape:
        raise T.DimensionError(
            f"logit shapes differ: student {student_logits.shape} vs teacher {teacher_logits.shape}"
        )
    if mask is not None:
        rows = np.flatnonzero(np.asarray(mask))
        if rows.size == 0:
            raise ValueError("mask selects no positions")
        student_logits = T.gather_rows(student_logits, rows)
        teacher_logits = teacher_logits[rows]
    z = teacher_logits - teacher_logits.max(axis=-1, keepdims=True)
    teacher_logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    teacher_p = np.exp(teacher_logp)
    entropy_term = float((teacher_p * teacher_logp).sum(axis=-1).mean())
    student_logp = T.log_softmax(student_logits)
    cross = T.tmean(T.tsum(T.mul(student_logp, Tensor(teacher_p)), axis=-1))
    return T.add(T.neg(cross), entropy_term)
