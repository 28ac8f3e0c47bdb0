"""Corpus handling and the synthetic closed-vocabulary world.

The generator builds a small fact world: every fact is one gold passage
"the <relation> of <entity> is <value>", one question, and a unique
two-word value that appears nowhere else in the corpus. Distractor
passages reuse fact entities and relations (so lexical retrieval cannot
trivially win) but never contain any value words. Relevance labels come
from an oracle scorer: the gold passage scores 2.0 and negatives get a
graded score from entity/relation overlap, so the positive's score always
dominates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ENTITIES = (
    "atlantis", "zephyria", "quorath", "velmora", "thrynn", "obsidia",
    "lumenor", "caldris", "myrrhen", "solvane", "tarnwick", "eldoria",
    "vexhall", "norvath", "brindel", "ostrava",
)

RELATIONS = ("capital", "anthem", "emblem", "currency", "dialect", "festival", "harbor", "beacon")

VALUE_ADJECTIVES = (
    "crimson", "silver", "jade", "amber", "cobalt", "ivory",
    "umber", "viridian", "sable", "coral", "russet", "pewter",
)

VALUE_NOUNS = (
    "falcon", "lantern", "orchid", "bastion", "meridian", "citadel",
    "harp", "glacier", "compass", "whisper", "anvil", "drum",
)

# Ten-word templates with the relation in the first five words and the
# entity in the last five, so splitting a distractor in half leaves a
# distinguishing word on each side.
DISTRACTOR_TEMPLATES = (
    "travelers ask about the {relation} when visiting {entity} each season",
    "many songs praise the {relation} across all of {entity} proudly",
    "the famous {relation} interests scholars who roam {entity} every year",
    "few maps mention the {relation} near the gates of {entity}",
    "stories of the {relation} travel far beyond distant {entity} tonight",
    "people debate the {relation} loudly while touring {entity} in spring",
)

GOLD_TEMPLATE = "the {relation} of {entity} is {value}"
QUESTION_TEMPLATE = "what is the {relation} of {entity}"

GOLD_SCORE = 2.0


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Passage:
    id: int
    text: str

    def __post_init__(self):
        if not self.text:
            raise CorpusError(f"passage {self.id} has empty text")

    @property
    def token_count(self) -> int:
        return len(self.text.split())


@dataclass(frozen=True)
class ScoredPassage:
    passage: Passage
    score: float


@dataclass(frozen=True)
class TrainExample:
    question: str
    answers: tuple[str, ...]
    positive: Passage
    negatives: tuple[ScoredPassage, ...]
    positive_score: float

    def __post_init__(self):
        if not self.answers:
            raise CorpusError("example needs at least one answer")
        if len(self.negatives) < 2:
            raise CorpusError(f"example {self.question!r} has {len(self.negatives)} negatives; need >= 2")
        worst = max((n.score for n in self.negatives), default=0.0)
        if worst > self.positive_score:
            raise CorpusError(
                f"example {self.question!r}: negative score {worst} exceeds positive {self.positive_score}"
            )


@dataclass(frozen=True)
class EvalQuery:
    qid: int
    question: str
    answers: tuple[str, ...]
    gold_id: int


@dataclass
class SyntheticWorld:
    entities: tuple[str, ...]
    relations: tuple[str, ...]
    facts: list[tuple[str, str, str]]  # (entity, relation, value)
    passages: list[Passage]
    examples: list[TrainExample]
    queries: list[EvalQuery]


def chunk_text(document: str, target_words: int, first_id: int = 0) -> list[Passage]:
    """Greedy word-boundary chunks of ``target_words`` plus a final remainder."""
    if target_words < 2:
        raise ValueError("target_words must be >= 2")
    words = document.split()
    passages = []
    for start in range(0, len(words), target_words):
        text = " ".join(words[start : start + target_words])
        passages.append(Passage(first_id + len(passages), text))
    return passages


def oracle_score(entity: str, relation: str, passage_text: str) -> float:
    """Graded relevance: entity and relation mentions each add half a point."""
    words = set(passage_text.split())
    return 0.25 + 0.5 * (entity in words) + 0.5 * (relation in words)


def synth_corpus(
    seed: int,
    n_facts: int,
    n_distractors: int,
    negatives_per_example: int = 6,
) -> SyntheticWorld:
    if n_facts < 4:
        raise ValueError("need at least 4 facts")
    rng = np.random.default_rng(seed)

    pairs = [(e, r) for e in ENTITIES for r in RELATIONS]
    values = [f"{a} {n}" for a in VALUE_ADJECTIVES for n in VALUE_NOUNS]
    if n_facts > len(pairs) or n_facts > len(values):
        raise CorpusError(f"cannot build {n_facts} facts from {len(ENTITIES)} entities")
    pair_idx = rng.choice(len(pairs), size=n_facts, replace=False)
    value_idx = rng.choice(len(values), size=n_facts, replace=False)
    facts = [(pairs[p][0], pairs[p][1], values[v]) for p, v in zip(pair_idx, value_idx)]

    passages: list[Passage] = []
    for entity, relation, value in facts:
        passages.append(Passage(len(passages), GOLD_TEMPLATE.format(relation=relation, entity=entity, value=value)))

    fact_pairs = {(e, r) for e, r, _ in facts}
    hard_pool = [(t, e, r) for t in DISTRACTOR_TEMPLATES for (e, r) in sorted(fact_pairs)]
    easy_pool = [
        (t, e, r)
        for t in DISTRACTOR_TEMPLATES
        for (e, r) in pairs
        if (e, r) not in fact_pairs
    ]
    rng.shuffle(hard_pool)
    rng.shuffle(easy_pool)
    n_hard = min((n_distractors + 1) // 2, len(hard_pool))
    chosen = hard_pool[:n_hard] + easy_pool[: n_distractors - n_hard]
    if len(chosen) < n_distractors:
        raise CorpusError(f"distractor pool exhausted: wanted {n_distractors}, built {len(chosen)}")
    for template, entity, relation in chosen:
        passages.append(Passage(len(passages), template.format(relation=relation, entity=entity)))

    # Gold uniqueness: each answer string must appear in its gold passage only.
    for i, (_, _, value) in enumerate(facts):
        for passage in passages:
            contains = value in passage.text
            if passage.id == i and not contains:
                raise CorpusError(f"gold passage {i} lost its answer string")
            if passage.id != i and contains:
                raise CorpusError(f"answer {value!r} leaked into passage {passage.id}")

    examples: list[TrainExample] = []
    queries: list[EvalQuery] = []
    for i, (entity, relation, value) in enumerate(facts):
        question = QUESTION_TEMPLATE.format(relation=relation, entity=entity)
        gold = passages[i]
        scored = sorted(
            (ScoredPassage(p, oracle_score(entity, relation, p.text)) for p in passages if p.id != gold.id),
            key=lambda sp: (-sp.score, sp.passage.id),
        )
        negatives = tuple(scored[:negatives_per_example])
        examples.append(
            TrainExample(
                question=question,
                answers=(value,),
                positive=gold,
                negatives=negatives,
                positive_score=GOLD_SCORE,
            )
        )
        queries.append(EvalQuery(qid=i, question=question, answers=(value,), gold_id=gold.id))

    return SyntheticWorld(ENTITIES, RELATIONS, facts, passages, examples, queries)


SSL_VERBS = ("guards", "follows", "circles", "greets", "mirrors", "carries", "shadows", "heralds")

SSL_FILLERS = ("quietly", "slowly", "brightly", "daily", "endlessly", "gently", "boldly", "warmly")


def synth_ssl_passages(seed: int, count: int) -> list[Passage]:
    """Unlabeled passages for the self-supervised stage.

    Each passage keeps a topical anchor (a noun-entity pair, unique per
    passage) visible in both halves, mirroring the lexical continuity of
    real text that lets split halves be paired; adjectives, verbs, and
    fillers keep the halves themselves distinct.
    """
    rng = np.random.default_rng(seed)
    anchors = [(n, e) for n in VALUE_NOUNS for e in ENTITIES]
    if count > len(anchors):
        raise CorpusError(f"cannot build {count} passages from {len(anchors)} anchors")
    picks = rng.choice(len(anchors), size=count, replace=False)
    passages: list[Passage] = []
    for idx in picks:
        noun, entity = anchors[idx]
        a1, a2 = rng.choice(VALUE_ADJECTIVES, size=2, replace=False)
        verb = SSL_VERBS[int(rng.integers(len(SSL_VERBS)))]
        filler = SSL_FILLERS[int(rng.integers(len(SSL_FILLERS)))]
        text = f"the {a1} {noun} {verb} {entity} while the {a2} {noun} watches {entity} {filler}"
        passages.append(Passage(len(passages), text))
    tokens_mid = [((p.text.split()), (len(p.text.split()) + 1) // 2) for p in passages]
    halves = [" ".join(w[:m]) for w, m in tokens_mid] + [" ".join(w[m:]) for w, m in tokens_mid]
    if len(set(halves)) != len(halves):
        raise CorpusError("duplicate half-passages in generated collection")
    return passages


def all_world_texts(world: SyntheticWorld) -> list[str]:
    """Every string the model must tokenize: passages, questions, answers."""
    texts = [p.text for p in world.passages]
    texts += [q.question for q in world.queries]
    texts += [a for q in world.queries for a in q.answers]
    return texts


def _dump_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def save_corpus(passages: Iterable[Passage], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in passages:
            fh.write(_dump_line({"id": p.id, "text": p.text}))


def load_corpus(path: str | Path) -> list[Passage]:
    passages: list[Passage] = []
    seen: dict[int, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                passage = Passage(int(obj["id"]), obj["text"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed passage line ({exc})") from None
            if passage.id in seen:
                raise CorpusError(
                    f"{path}:{lineno}: duplicate passage id {passage.id} (first at line {seen[passage.id]})"
                )
            seen[passage.id] = lineno
            passages.append(passage)
    return passages


def save_examples(examples: Iterable[TrainExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(
                _dump_line(
                    {
                        "question": ex.question,
                        "answers": list(ex.answers),
                        "positive": {"id": ex.positive.id, "text": ex.positive.text},
                        "negatives": [
                            {"id": n.passage.id, "text": n.passage.text, "score": n.score}
                            for n in ex.negatives
                        ],
                        "positive_score": ex.positive_score,
                    }
                )
            )


def load_examples(path: str | Path) -> list[TrainExample]:
    examples: list[TrainExample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                example = TrainExample(
                    question=obj["question"],
                    answers=tuple(obj["answers"]),
                    positive=Passage(int(obj["positive"]["id"]), obj["positive"]["text"]),
                    negatives=tuple(
                        ScoredPassage(Passage(int(n["id"]), n["text"]), float(n["score"]))
                        for n in obj["negatives"]
                    ),
                    positive_score=float(obj["positive_score"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed example line ({exc})") from None
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
            examples.append(example)
    return examples


def save_queries(queries: Iterable[EvalQuery], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(
                _dump_line(
                    {"qid": q.qid, "question": q.question, "answers": list(q.answers), "gold_id": q.gold_id}
                )
            )


def load_queries(path: str | Path) -> list[EvalQuery]:
    queries: list[EvalQuery] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                queries.append(
                    EvalQuery(int(obj["qid"]), obj["question"], tuple(obj["answers"]), int(obj["gold_id"]))
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed query line ({exc})") from None
    return queries
