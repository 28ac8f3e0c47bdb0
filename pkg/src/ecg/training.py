"""Two-stage training recipe.

Stage 1 (self-supervised): passages are split in half into context/target
pairs, by one of two equally likely strategies (reconstruct the same half,
or predict the neighboring half). Each pair contributes a bidirectional
next-token loss through the compressed vectors plus an in-batch
contrastive loss over the retrieval vectors with a learnable temperature.
Embedding-token counts vary per encoding pass so the model learns every
capacity level.

Stage 2 (RAG fine-tuning): each example samples one positive and two
weighted hard negatives. Generation distills a text-reader teacher through
KL on the answer positions, with the student conditioned on one to three
compressed documents (positive always present, order shuffled). Retrieval
trains with InfoNCE over hard plus in-batch negatives and a margin-MSE
distillation of the oracle scorer's margins, with a learnable scale on the
teacher side. The joint loss is the plain sum of the three terms.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import TrainExample
from .losses import (
    infonce,
    kl_distill,
    lm_loss,
    margin_mse,
    pair_similarity,
    sequence_loss,
    token_cross_entropy,
)
from .model import EcgModel, reader_prompt, parametric_prompt
from .projections import comp_project, ret_project
from .tensor import Tensor


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 3e-3
    weight_decay: float = 0.01
    epochs: int = 1
    steps: int | None = None  # overrides epochs when set
    t: int = 8
    n_min: int = 2
    n_max: int = 8
    negative_temperature: float = 0.15
    warmup_ratio: float = 0.05
    contrastive_pretrain: bool = True
    distillation: bool = True
    loss_scaling: bool = True
    weighted_negatives: bool = True

    def __post_init__(self):
        if self.negative_temperature <= 0:
            raise ValueError("negative_temperature must be positive")
        if not (1 <= self.n_min <= self.n_max):
            raise ValueError(f"bad embedding-count range [{self.n_min}, {self.n_max}]")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in mapping:
                continue
            raw = mapping[f.name]
            if f.name in ("contrastive_pretrain", "distillation", "loss_scaling", "weighted_negatives"):
                kwargs[f.name] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes", "on")
            elif f.name in ("learning_rate", "weight_decay", "negative_temperature", "warmup_ratio"):
                kwargs[f.name] = float(raw)
            elif f.name == "steps":
                kwargs[f.name] = None if str(raw).lower() in ("", "none") else int(raw)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


@dataclass(frozen=True)
class SslPair:
    context: str
    target: str
    strategy: str  # "reconstruction" | "neighboring"
    n_ctx: int
    n_tgt: int


@dataclass(frozen=True)
class SslStepReport:
    step: int
    l_lm: float
    l_contrastive: float | None
    total: float
    tau: float

    def columns(self) -> dict:
        return {
            "step": self.step,
            "l_lm": self.l_lm,
            "l_contrastive": "" if self.l_contrastive is None else self.l_contrastive,
            "total": self.total,
            "tau": self.tau,
        }


@dataclass(frozen=True)
class RagStepReport:
    step: int
    l_gen: float
    l_contrastive: float
    l_margin: float
    total: float
    tau: float
    alpha: float

    def columns(self) -> dict:
        return {
            "step": self.step,
            "l_gen": self.l_gen,
            "l_contrastive": self.l_contrastive,
            "l_margin": self.l_margin,
            "total": self.total,
            "tau": self.tau,
            "alpha": self.alpha,
        }


class AdamW:
    """Decoupled-weight-decay Adam with linear warmup then linear decay."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        total_steps: int,
        weight_decay: float = 0.0,
        warmup_ratio: float = 0.05,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.total_steps = max(1, total_steps)
        self.weight_decay = weight_decay
        self.warmup_steps = max(1, int(round(self.total_steps * warmup_ratio)))
        self.betas = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def lr_at(self, step: int) -> float:
        if step <= self.warmup_steps:
            return self.lr * step / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        return self.lr * max(0.0, self.total_steps - step) / span

    def step(self) -> None:
        self.t += 1
        lr_t = self.lr_at(self.t)
        b1, b2 = self.betas
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self._m[name] = b1 * self._m[name] + (1 - b1) * p.grad
            v = self._v[name] = b2 * self._v[name] + (1 - b2) * p.grad**2
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= lr_t * update

    def zero_grad(self) -> None:
        T.zero_grads(self.params.values())


def make_ssl_pairs(passage_text: str, rng: np.random.Generator, n_min: int, n_max: int) -> SslPair | None:
    """Split a passage in half and draw a strategy; None for too-short passages."""
    words = passage_text.split()
    if len(words) < 2:
        warnings.warn(f"skipping passage with {len(words)} token(s)", stacklevel=2)
        return None
    mid = (len(words) + 1) // 2
    first, second = " ".join(words[:mid]), " ".join(words[mid:])
    reconstruction = rng.random() < 0.5
    n_ctx = int(rng.integers(n_min, n_max + 1))
    n_tgt = int(rng.integers(n_min, n_max + 1))
    if reconstruction:
        half = first if rng.integers(2) == 0 else second
        return SslPair(half, half, "reconstruction", n_ctx, n_tgt)
    return SslPair(first, second, "neighboring", n_ctx, n_tgt)


def sample_negatives(
    scores: Sequence[float],
    tau_neg: float,
    count: int,
    rng: np.random.Generator,
    weighted: bool = True,
) -> list[int]:
    """Draw ``count`` distinct indices, each from the softmax over remaining scores."""
    if tau_neg <= 0:
        raise ValueError("tau_neg must be positive")
    scores = np.asarray(scores, dtype=np.float64)
    if count > scores.size:
        raise ValueError(f"cannot sample {count} from {scores.size} negatives")
    if weighted:
        z = scores / tau_neg
        z -= z.max()
        probs = np.exp(z)
    else:
        probs = np.ones_like(scores)
    probs = probs / probs.sum()
    remaining = list(range(scores.size))
    chosen: list[int] = []
    for _ in range(count):
        p = probs[remaining]
        p = p / p.sum()
        pick = rng.choice(len(remaining), p=p)
        chosen.append(remaining.pop(int(pick)))
    return chosen


def _scaling_tensors(model: EcgModel, cfg: TrainConfig) -> tuple[Tensor, Tensor]:
    """Effective (tau, alpha): learnable when loss scaling is on, else fixed 1."""
    if cfg.loss_scaling:
        return T.exp(model.params["scale.log_tau"]), model.params["scale.alpha"]
    return Tensor(np.array([1.0])), Tensor(np.array([1.0]))


def lock_scaling_params(model: EcgModel) -> None:
    """Pin tau and alpha to exactly 1.0 for the loss-scaling ablation."""
    model.params["scale.log_tau"].data[:] = 0.0
    model.params["scale.alpha"].data[:] = 1.0


def trainable_params(model: EcgModel, cfg: TrainConfig, stage: str) -> dict[str, Tensor]:
    selected: dict[str, Tensor] = {}
    for name, p in model.params.items():
        if name.startswith("scale."):
            if not cfg.loss_scaling:
                continue
            if name == "scale.alpha" and stage != "rag":
                continue
            selected[name] = p
        elif stage == "reader":
            if name.startswith("lm."):
                selected[name] = p
        else:
            selected[name] = p
    return selected


def _sim_matrix(rows: list[list[Tensor]]) -> Tensor:
    return T.concat_rows([T.reshape(T.stack_scalars(row), (1, len(row))) for row in rows])


def ssl_step(model: EcgModel, pairs: Sequence[SslPair], opt: AdamW, cfg: TrainConfig) -> SslStepReport:
    if not pairs:
        raise ValueError("empty batch")
    ret_ctx, ret_tgt, lm_terms = [], [], []
    for pair in pairs:
        hidden_c = model.encode_hidden(pair.context, pair.n_ctx)
        hidden_t = model.encode_hidden(pair.target, pair.n_tgt)
        rc = ret_project(hidden_c, model.params, model.cfg.eps)
        rt = ret_project(hidden_t, model.params, model.cfg.eps)
        ret_ctx.append(rc)
        ret_tgt.append(rt)
        comp_c = comp_project(rc, model.params, model.cfg.eps)
        comp_t = comp_project(rt, model.params, model.cfg.eps)
        fwd = lm_loss(model, model.vocab.encode(pair.target), comp_c)
        bwd = lm_loss(model, model.vocab.encode(pair.context), comp_t)
        lm_terms.append(T.mul(T.add(fwd, bwd), 0.5))
    l_lm = T.tmean(T.stack_scalars(lm_terms))

    tau, _ = _scaling_tensors(model, cfg)
    if cfg.contrastive_pretrain:
        sims = _sim_matrix(
            [[pair_similarity(rc, rt) for rt in ret_tgt] for rc in ret_ctx]
        )
        l_con = infonce(sims, tau)
        total = T.add(l_lm, l_con)
    else:
        l_con = None
        total = l_lm

    opt.zero_grad()
    total.backward()
    opt.step()
    return SslStepReport(
        step=opt.t,
        l_lm=l_lm.item(),
        l_contrastive=None if l_con is None else l_con.item(),
        total=total.item(),
        tau=tau.item(),
    )


def _answer_rows(input_len: int, n_labels: int) -> np.ndarray:
    """Prediction rows for the last ``n_labels`` continuations of an input.

    The input ends with the answer tokens (without <eos>); row input_len - 1
    predicts the <eos> that closes the answer.
    """
    return np.arange(input_len - n_labels, input_len)


def rag_step(
    model: EcgModel,
    teacher: EcgModel,
    batch: Sequence[TrainExample],
    opt: AdamW,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> RagStepReport:
    if not batch:
        raise ValueError("empty batch")
    tau, alpha = _scaling_tensors(model, cfg)
    t = cfg.t

    queries, doc_rets, doc_texts = [], [], []
    gen_terms, margin_terms = [], []
    for ex in batch:
        neg_scores = [n.score for n in ex.negatives]
        picked = sample_negatives(neg_scores, cfg.negative_temperature, 2, rng, cfg.weighted_negatives)
        chosen = [ex.negatives[i] for i in picked]
        answer = ex.answers[int(rng.integers(len(ex.answers)))]

        q_ret = ret_project(model.encode_hidden(ex.question, t), model.params, model.cfg.eps)
        docs = [(ex.positive, ex.positive_score)] + [(n.passage, n.score) for n in chosen]
        rets = [ret_project(model.encode_hidden(p.text, t), model.params, model.cfg.eps) for p, _ in docs]
        queries.append(q_ret)
        doc_rets.append(rets)
        doc_texts.append([p.text for p, _ in docs])

        # Generation arm: 1-3 compressed documents, positive always included.
        n_gen = min(int(rng.integers(1, 4)), len(docs))
        order = [0] + list(rng.choice(np.arange(1, len(docs)), size=n_gen - 1, replace=False))
        order = [int(i) for i in order]
        rng.shuffle(order)
        contexts = [comp_project(rets[i], model.params, model.cfg.eps) for i in order]

        answer_ids = model.vocab.encode(answer)
        labels = answer_ids + [model.vocab.eos_id]
        student_in = model.build_gen_input(ex.question, contexts, answer_prefix=answer)
        _, student_logits = model.forward(student_in)
        student_rows = _answer_rows(len(student_in), len(labels))
        if cfg.distillation:
            teacher_prompt = reader_prompt(ex.question, [docs[i][0].text for i in order])
            teacher_ids = teacher.vocab.encode(teacher_prompt) + answer_ids
            with T.no_grad():
                t_in = _token_input(teacher_ids)
                _, teacher_logits = teacher.forward(t_in)
            teacher_rows = _answer_rows(len(teacher_ids), len(labels))
            gen_terms.append(
                kl_distill(
                    T.gather_rows(student_logits, student_rows),
                    teacher_logits.data[teacher_rows],
                )
            )
        else:
            gen_terms.append(token_cross_entropy(student_logits, student_rows, labels))

        student_scores = T.stack_scalars([pair_similarity(q_ret, r) for r in rets])
        teacher_scores = np.array([s for _, s in docs])
        margin_terms.append(margin_mse(student_scores, teacher_scores, 0, [1, 2], alpha))

    # InfoNCE per query: own positive first, then own hard negatives, then
    # every document of the other batch examples as in-batch negatives.
    con_terms = []
    for i, q_ret in enumerate(queries):
        row = [pair_similarity(q_ret, r) for r in doc_rets[i]]
        for j, rets in enumerate(doc_rets):
            if j != i:
                row += [pair_similarity(q_ret, r) for r in rets]
        con_terms.append(infonce(T.reshape(T.stack_scalars(row), (1, len(row))), tau))

    l_gen = T.tmean(T.stack_scalars(gen_terms))
    l_con = T.tmean(T.stack_scalars(con_terms))
    l_margin = T.tmean(T.stack_scalars(margin_terms))
    total = T.add(T.add(l_gen, l_con), l_margin)

    opt.zero_grad()
    total.backward()
    opt.step()
    return RagStepReport(
        step=opt.t,
        l_gen=l_gen.item(),
        l_contrastive=l_con.item(),
        l_margin=l_margin.item(),
        total=total.item(),
        tau=tau.item(),
        alpha=alpha.item(),
    )


def _token_input(ids: list[int]):
    from .model import MixedInput

    mixed = MixedInput()
    mixed.append_tokens(ids)
    return mixed


def _resolve_steps(cfg: TrainConfig, n_items: int) -> int:
    if cfg.steps is not None:
        return cfg.steps
    return cfg.epochs * max(1, math.ceil(n_items / cfg.batch_size))


def _draw_batch(rng: np.random.Generator, n_items: int, batch_size: int) -> list[int]:
    take = min(batch_size, n_items)
    return [int(i) for i in rng.choice(n_items, size=take, replace=False)]


def train_ssl(
    model: EcgModel,
    passages: Sequence,
    cfg: TrainConfig,
    seed: int,
    on_step: Callable[[SslStepReport], None] | None = None,
) -> list[SslStepReport]:
    """Self-supervised stage over a passage collection."""
    rng = np.random.default_rng(seed)
    if not cfg.loss_scaling:
        lock_scaling_params(model)
    steps = _resolve_steps(cfg, len(passages))
    opt = AdamW(
        trainable_params(model, cfg, "ssl"),
        lr=cfg.learning_rate,
        total_steps=steps,
        weight_decay=cfg.weight_decay,
        warmup_ratio=cfg.warmup_ratio,
    )
    history: list[SslStepReport] = []
    texts = [p.text for p in passages]
    for _ in range(steps):
        pairs = []
        for idx in _draw_batch(rng, len(texts), cfg.batch_size):
            pair = make_ssl_pairs(texts[idx], rng, cfg.n_min, cfg.n_max)
            if pair is not None:
                pairs.append(pair)
        if not pairs:
            raise ValueError("no usable passages in batch")
        report = ssl_step(model, pairs, opt, cfg)
        history.append(report)
        if on_step:
            on_step(report)
    return history


def train_rag(
    model: EcgModel,
    teacher: EcgModel,
    examples: Sequence[TrainExample],
    cfg: TrainConfig,
    seed: int,
    on_step: Callable[[RagStepReport], None] | None = None,
) -> list[RagStepReport]:
    """RAG fine-tuning stage; requires a trained teacher reader."""
    rng = np.random.default_rng(seed)
    if not cfg.loss_scaling:
        lock_scaling_params(model)
    steps = _resolve_steps(cfg, len(examples))
    opt = AdamW(
        trainable_params(model, cfg, "rag"),
        lr=cfg.learning_rate,
        total_steps=steps,
        weight_decay=cfg.weight_decay,
        warmup_ratio=cfg.warmup_ratio,
    )
    history: list[RagStepReport] = []
    for _ in range(steps):
        batch = [examples[i] for i in _draw_batch(rng, len(examples), cfg.batch_size)]
        report = rag_step(model, teacher, batch, opt, cfg, rng)
        history.append(report)
        if on_step:
            on_step(report)
    return history


@dataclass(frozen=True)
class ReaderStepReport:
    step: int
    loss: float
    val_loss: float | None = None

    def columns(self) -> dict:
        return {
            "step": self.step,
            "loss": self.loss,
            "val_loss": "" if self.val_loss is None else self.val_loss,
        }


def _held_out_loss(model: EcgModel, val_examples: Sequence[TrainExample], parametric: bool) -> float:
    """Deterministic validation loss: first answer, positive document only."""
    total = 0.0
    with T.no_grad():
        for ex in val_examples:
            prompt = parametric_prompt(ex.question) if parametric else reader_prompt(ex.question, [ex.positive.text])
            total += sequence_loss(model, model.vocab.encode(prompt), model.vocab.encode(ex.answers[0])).item()
    return total / len(val_examples)


def train_reader(
    model: EcgModel,
    examples: Sequence[TrainExample],
    cfg: TrainConfig,
    seed: int,
    parametric: bool = False,
    val_examples: Sequence[TrainExample] | None = None,
    val_every: int = 50,
    on_step: Callable[[ReaderStepReport], None] | None = None,
) -> list[ReaderStepReport]:
    """Supervised next-token training of the reader (or no-context) baseline.

    The reader sees the question plus one to three raw documents (positive
    always included, order shuffled); the parametric variant sees the
    question only, which is the same template with zero documents. When
    ``val_examples`` is given, the checkpoint with the lowest held-out loss
    is restored at the end (a question-only model that merely memorizes
    training answers degrades on held-out questions, so selection stops it
    early; a model whose skill generalizes keeps its final weights).
    """
    rng = np.random.default_rng(seed)
    steps = _resolve_steps(cfg, len(examples))
    opt = AdamW(
        trainable_params(model, cfg, "reader"),
        lr=cfg.learning_rate,
        total_steps=steps,
        weight_decay=cfg.weight_decay,
        warmup_ratio=cfg.warmup_ratio,
    )
    history: list[ReaderStepReport] = []
    best: tuple[float, dict[str, np.ndarray]] | None = None
    for _ in range(steps):
        terms = []
        for idx in _draw_batch(rng, len(examples), cfg.batch_size):
            ex = examples[idx]
            answer = ex.answers[int(rng.integers(len(ex.answers)))]
            if parametric:
                prompt = parametric_prompt(ex.question)
            else:
                n_docs = min(int(rng.integers(1, 4)), 1 + len(ex.negatives))
                order = [0] + [
                    1 + int(i)
                    for i in rng.choice(len(ex.negatives), size=n_docs - 1, replace=False)
                ]
                rng.shuffle(order)
                texts = [ex.positive.text if i == 0 else ex.negatives[i - 1].passage.text for i in order]
                prompt = reader_prompt(ex.question, texts)
            terms.append(sequence_loss(model, model.vocab.encode(prompt), model.vocab.encode(answer)))
        loss = T.tmean(T.stack_scalars(terms))
        opt.zero_grad()
        loss.backward()
        opt.step()
        val_loss = None
        if val_examples and (opt.t % val_every == 0 or opt.t == steps):
            val_loss = _held_out_loss(model, val_examples, parametric)
            if best is None or val_loss < best[0]:
                best = (val_loss, {k: p.data.copy() for k, p in model.params.items()})
        report = ReaderStepReport(step=opt.t, loss=loss.item(), val_loss=val_loss)
        history.append(report)
        if on_step:
            on_step(report)
    if best is not None:
        for name, data in best[1].items():
            model.params[name].data[:] = data
    return history


def history_to_csv(history: Sequence, path: str | Path) -> None:
    if not history:
        Path(path).write_text("")
        return
    cols = list(history[0].columns())
    lines = [",".join(cols)]
    for row in history:
        values = row.columns()
        lines.append(",".join(repr(values[c]) if isinstance(values[c], float) else str(values[c]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")
