"""End-to-end evaluation under a fixed context budget.

The context budget counts document representations only: raw tokens for
text readers, vectors for compressed readers. Question, template, and
wrapper tokens are free. Four method arms share the harness:

- parametric: no retrieval, question-only prompt (budget is ignored);
- rag_reader: lexical retrieval, raw document text truncated to budget;
- compression_reader: lexical retrieval, compressed vectors as context;
- ecg: own multi-vector retrieval, compressed vectors from the same store.

Exact-match scoring normalizes both sides (lowercase, strip punctuation,
collapse whitespace, drop leading articles) and requires full equality.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .bm25 import Bm25Stats, bm25_topk
from .data import EvalQuery, Passage
from .model import EcgModel, MixedInput, parametric_prompt, reader_prompt
from .retrieval import EmbeddingStore, search_topk
from .tensor import Tensor

DEFAULT_BUDGET_GRID = tuple(range(32, 257, 32))

_ARTICLES = {"a", "an", "the"}
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


class BudgetError(ValueError):
    pass


def normalize_answer(text: str) -> str:
    text = text.lower().translate(_PUNCT_TABLE)
    words = text.split()
    while words and words[0] in _ARTICLES:
        words.pop(0)
    return " ".join(words)


def exact_match(prediction: str, answers: Sequence[str]) -> bool:
    if not answers:
        raise ValueError("need at least one reference answer")
    norm = normalize_answer(prediction)
    return any(norm == normalize_answer(a) for a in answers)


@dataclass(frozen=True)
class EvalRecord:
    qid: int
    question: str
    prediction: str
    answers: tuple[str, ...]
    correct: bool
    retrieved: tuple[int, ...]


@dataclass
class EvalReport:
    dataset: str
    method: str
    budget: int
    k: int
    em: float
    records: list[EvalRecord] = field(default_factory=list)


def truncate_to_token_budget(model: EcgModel, text: str, max_tokens: int) -> str:
    """Keep the leading words whose total token count fits the budget."""
    kept: list[str] = []
    used = 0
    for word in text.split():
        cost = len(model.vocab.encode(word))
        if used + cost > max_tokens:
            break
        kept.append(word)
        used += cost
    return " ".join(kept)


def _token_input(model: EcgModel, ids: list[int]) -> MixedInput:
    mixed = MixedInput()
    mixed.append_tokens(ids)
    return mixed


def generate_text(model: EcgModel, prompt: str, max_new: int = 12) -> str:
    ids = model.generate(_token_input(model, model.vocab.encode(prompt)), max_new)
    return model.vocab.decode(ids, skip_special=True)


def ecg_retriever(model: EcgModel, store: EmbeddingStore, threads: int = 1) -> Callable[[str, int], list[int]]:
    def retrieve(question: str, k: int) -> list[int]:
        with T.no_grad():
            query = model.embed_text(question).data
        return [r.passage_id for r in search_topk(query, store, k, threads=threads)]

    return retrieve


def bm25_retriever(corpus: Sequence[Passage]) -> Callable[[str, int], list[int]]:
    stats = Bm25Stats.build([(p.id, p.text) for p in corpus])

    def retrieve(question: str, k: int) -> list[int]:
        return [pid for pid, _ in bm25_topk(question, stats, k)]

    return retrieve


def compressed_contexts(model: EcgModel, store: EmbeddingStore, doc_ids: Sequence[int]) -> list[Tensor]:
    contexts = []
    with T.no_grad():
        for pid in doc_ids:
            vectors = Tensor(store.get(pid).vectors.astype(np.float64))
            contexts.append(model.compress(vectors))
    return contexts


def text_reader_answer(
    model: EcgModel, question: str, doc_texts: Sequence[str], budget: int, max_new: int = 12
) -> str:
    """Truncate each document to its share of the budget and read the prompt."""
    k = len(doc_texts)
    share = budget // k if k else 0
    if k and share < 1:
        raise BudgetError(f"budget {budget} cannot cover {k} documents")
    truncated = [truncate_to_token_budget(model, text, share) for text in doc_texts]
    used = sum(len(model.vocab.encode(t)) for t in truncated)
    assert used <= budget, f"assembled context of {used} tokens exceeds budget {budget}"
    return generate_text(model, reader_prompt(question, truncated), max_new)


def vector_reader_answer(
    model: EcgModel,
    store: EmbeddingStore,
    question: str,
    doc_ids: Sequence[int],
    budget: int,
    max_new: int = 12,
) -> str:
    vectors_used = sum(store.get(pid).count for pid in doc_ids)
    if vectors_used > budget:
        raise BudgetError(f"{len(doc_ids)} documents need {vectors_used} vectors, budget is {budget}")
    contexts = compressed_contexts(model, store, doc_ids)
    with T.no_grad():
        ids = model.generate(model.build_gen_input(question, contexts), max_new)
    return model.vocab.decode(ids, skip_special=True)


def eval_queries(
    queries: Sequence[EvalQuery],
    retrieve: Callable[[str, int], list[int]] | None,
    answer: Callable[[str, list[int]], str],
    *,
    dataset: str,
    method: str,
    budget: int,
    k: int,
) -> EvalReport:
    """Shared fold: retrieve per query, answer, aggregate EM ordered by qid."""
    records = []
    for q in sorted(queries, key=lambda q: q.qid):
        doc_ids = retrieve(q.question, k) if retrieve else []
        prediction = answer(q.question, doc_ids)
        records.append(
            EvalRecord(
                qid=q.qid,
                question=q.question,
                prediction=prediction,
                answers=tuple(q.answers),
                correct=exact_match(prediction, q.answers),
                retrieved=tuple(doc_ids),
            )
        )
    em = sum(r.correct for r in records) / len(records) if records else 0.0
    return EvalReport(dataset=dataset, method=method, budget=budget, k=k, em=em, records=records)


METHODS = ("parametric", "rag_reader", "compression_reader", "ecg")


def eval_fixed_budget(
    method: str,
    queries: Sequence[EvalQuery],
    *,
    budget: int,
    k: int = 1,
    dataset: str = "synthetic",
    ecg_model: EcgModel | None = None,
    store: EmbeddingStore | None = None,
    reader_model: EcgModel | None = None,
    parametric_model: EcgModel | None = None,
    compression_model: EcgModel | None = None,
    corpus: Sequence[Passage] | None = None,
    threads: int = 1,
    max_new: int = 12,
) -> EvalReport:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if budget < 1:
        raise BudgetError("budget must be >= 1")
    if method != "parametric" and k < 1:
        raise ValueError("k must be >= 1 for retrieval methods")

    if method == "parametric":
        if parametric_model is None:
            raise ValueError("parametric method needs parametric_model")
        model = parametric_model
        return eval_queries(
            queries,
            None,
            lambda q, _ids: generate_text(model, parametric_prompt(q), max_new),
            dataset=dataset,
            method=method,
            budget=budget,
            k=0,
        )

    if method == "rag_reader":
        if reader_model is None or corpus is None:
            raise ValueError("rag_reader needs reader_model and corpus")
        if budget // k < 1:
            raise BudgetError(f"budget {budget} cannot cover {k} documents")
        texts = {p.id: p.text for p in corpus}
        retrieve = bm25_retriever(corpus)
        answer = lambda q, ids: text_reader_answer(reader_model, q, [texts[i] for i in ids], budget, max_new)
        return eval_queries(queries, retrieve, answer, dataset=dataset, method=method, budget=budget, k=k)

    if method == "compression_reader":
        if compression_model is None or store is None or corpus is None:
            raise ValueError("compression_reader needs compression_model, store, and corpus")
        retrieve = bm25_retriever(corpus)
        model = compression_model
    else:  # ecg
        if ecg_model is None or store is None:
            raise ValueError("ecg needs ecg_model and store")
        retrieve = ecg_retriever(ecg_model, store, threads)
        model = ecg_model

    per_doc = max(rec.count for rec in store) if len(store) else 0
    if per_doc * k > budget:
        raise BudgetError(f"k={k} documents at {per_doc} vectors each exceed budget {budget}")
    answer = lambda q, ids: vector_reader_answer(model, store, q, ids, budget, max_new)
    return eval_queries(queries, retrieve, answer, dataset=dataset, method=method, budget=budget, k=k)


@dataclass(frozen=True)
class FixedPerformanceResult:
    budget: int
    em: float
    reached: bool


def fixed_performance_search(
    eval_at_budget: Callable[[int], float],
    target_em: float,
    budgets: Sequence[int] = DEFAULT_BUDGET_GRID,
) -> FixedPerformanceResult:
    """Smallest budget reaching the target, else the best-performing budget.

    Budgets are evaluated in the given order; ties on the fallback best-EM
    pick resolve to the smallest budget.
    """
    if not 0.0 <= target_em <= 1.0:
        raise ValueError("target_em must lie in [0, 1]")
    results = [(budget, eval_at_budget(budget)) for budget in budgets]
    for budget, em in results:
        if em >= target_em:
            return FixedPerformanceResult(budget, em, True)
    best_budget, best_em = min(results, key=lambda pair: (-pair[1], pair[0]))
    return FixedPerformanceResult(best_budget, best_em, False)


def pool_corpus(
    retrievers: dict[str, Callable[[str, int], list[int]]],
    queries: Sequence[EvalQuery],
    top_n: int,
    corpus: Sequence[Passage],
) -> list[Passage]:
    """Union of every retriever's top-n per query, plus all gold passages."""
    if not retrievers:
        raise ValueError("need at least one retriever")
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    keep: set[int] = {q.gold_id for q in queries}
    for retrieve in retrievers.values():
        for q in queries:
            keep.update(retrieve(q.question, top_n))
    return [p for p in corpus if p.id in keep]


def k_sweep(
    retrieve: Callable[[str, int], list[int]],
    answer: Callable[[str, list[int]], str],
    queries: Sequence[EvalQuery],
    ks: Sequence[int],
    *,
    dataset: str = "synthetic",
    method: str = "sweep",
    budget: int = 0,
) -> list[EvalReport]:
    """One report per k, reusing a single retrieval ranking per query."""
    ks = sorted(set(ks))
    if not ks or ks[0] < 1 or ks[-1] > 5:
        raise ValueError("k range must lie within [1, 5]")
    rankings = {
        q.question: retrieve(q.question, ks[-1]) for q in sorted(queries, key=lambda q: q.qid)
    }
    return [
        eval_queries(
            queries,
            lambda question, kk: rankings[question][:kk],
            answer,
            dataset=dataset,
            method=method,
            budget=budget,
            k=k,
        )
        for k in ks
    ]


def write_report_csv(reports: Sequence[EvalReport], path: str | Path) -> None:
    lines = ["dataset,method,budget,k,em"]
    for r in reports:
        lines.append(f"{r.dataset},{r.method},{r.budget},{r.k},{r.em!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_records_jsonl(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in report.records:
            fh.write(
                json.dumps(
                    {
                        "qid": rec.qid,
                        "question": rec.question,
                        "prediction": rec.prediction,
                        "answers": list(rec.answers),
                        "correct": rec.correct,
                        "retrieved": list(rec.retrieved),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
