"""Toy decoder-only transformer that doubles as encoder and generator.

The same weights serve three roles:

- encoder: append placeholder embedding tokens to a prompted text and read
  their final hidden states as the text's multi-vector representation;
- generator over mixed input: continuous context vectors are injected
  directly into the first layer, bypassing the token-embedding lookup but
  receiving positions exactly like token elements;
- plain language model for the reader / no-retrieval baselines.

Architecture: pre-norm blocks, learned absolute positions, weight-tied
output head. Layer norm carries no affine parameters (the following linear
layer absorbs it). Decoding is greedy with ties broken toward the lowest
token id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .projections import comp_project, init_proj_params, ret_project
from .tensor import Tensor
from .vocab import Vocabulary

ENCODE_PROMPT = "Encode the following text into embedding tokens."

PARAMETRIC_PREFIX = "Generate a response to the following question.\n\nQuestion: {question}\n\nResponse:"

READER_PREFIX = "Generate a response to the following question using the context.\n\nQuestion: {question}\n\nContext: {context}\n\nResponse:"

COMPRESSED_PREFIX = "Generate a response to the following question using the embedded context.\n\nQuestion: {question}\n\nContext:"

RESPONSE_SUFFIX = "Response:"

PROMPT_TEXTS = [
    ENCODE_PROMPT,
    PARAMETRIC_PREFIX.replace("{question}", ""),
    READER_PREFIX.replace("{question}", "").replace("{context}", ""),
    COMPRESSED_PREFIX.replace("{question}", ""),
    RESPONSE_SUFFIX,
]


class LengthError(ValueError):
    pass


@dataclass
class LmConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 4
    d: int = 64
    max_len: int = 160
    t: int = 8  # default embedding-token count per text
    eps: float = 1e-5

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"hidden size {self.d} not divisible by {self.heads} heads")
        if self.t < 1:
            raise ValueError("t must be >= 1")

    def save(self, path: str | Path) -> None:
        lines = [f"{k}={getattr(self, k)}" for k in ("vocab_size", "layers", "heads", "d", "max_len", "t", "eps")]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LmConfig":
        kwargs = {}
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            kwargs[key] = float(value) if key == "eps" else int(value)
        return cls(**kwargs)


@dataclass
class TokenRun:
    ids: list[int]


@dataclass
class VectorSpan:
    vectors: Tensor  # [n, d]


Segment = Union[TokenRun, VectorSpan]


@dataclass
class MixedInput:
    """Ordered sequence of token ids and injected context vectors."""

    segments: list[Segment] = field(default_factory=list)

    def append_tokens(self, ids: Sequence[int]) -> None:
        ids = list(ids)
        if not ids:
            return
        if self.segments and isinstance(self.segments[-1], TokenRun):
            self.segments[-1].ids.extend(ids)
        else:
            self.segments.append(TokenRun(ids))

    def append_vectors(self, vectors: Tensor) -> None:
        self.segments.append(VectorSpan(vectors))

    def __len__(self) -> int:
        return sum(len(s.ids) if isinstance(s, TokenRun) else s.vectors.shape[0] for s in self.segments)

    def element_kinds(self) -> list[str]:
        kinds: list[str] = []
        for seg in self.segments:
            if isinstance(seg, TokenRun):
                kinds.extend("token" for _ in seg.ids)
            else:
                kinds.extend("vector" for _ in range(seg.vectors.shape[0]))
        return kinds

    def token_ids(self) -> list[int]:
        """Flat token ids with vector positions omitted."""
        out: list[int] = []
        for seg in self.segments:
            if isinstance(seg, TokenRun):
                out.extend(seg.ids)
        return out

    def validate_spans(self, emb_start_id: int, emb_stop_id: int) -> None:
        """Every vector span must sit between an <emb_start> and an <emb_stop>."""
        for i, seg in enumerate(self.segments):
            if not isinstance(seg, VectorSpan):
                continue
            prev_ok = (
                i > 0
                and isinstance(self.segments[i - 1], TokenRun)
                and self.segments[i - 1].ids
                and self.segments[i - 1].ids[-1] == emb_start_id
            )
            next_ok = (
                i + 1 < len(self.segments)
                and isinstance(self.segments[i + 1], TokenRun)
                and self.segments[i + 1].ids
                and self.segments[i + 1].ids[0] == emb_stop_id
            )
            if not (prev_ok and next_ok):
                raise ValueError("injected vectors must be wrapped in <emb_start> ... <emb_stop>")


def init_lm_params(cfg: LmConfig, rng: np.random.Generator, dtype=None) -> dict[str, Tensor]:
    std = 0.02

    def normal(*shape):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)

    params = {"lm.embed": normal(cfg.vocab_size, cfg.d), "lm.pos": normal(cfg.max_len, cfg.d)}
    for layer in range(cfg.layers):
        base = f"lm.layer{layer}"
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{base}.attn.{name}"] = normal(cfg.d, cfg.d)
            params[f"{base}.attn.b{name[1]}"] = zeros(cfg.d)
        params[f"{base}.mlp.w1"] = normal(cfg.d, 4 * cfg.d)
        params[f"{base}.mlp.b1"] = zeros(4 * cfg.d)
        params[f"{base}.mlp.w2"] = normal(4 * cfg.d, cfg.d)
        params[f"{base}.mlp.b2"] = zeros(cfg.d)
    return params


def lm_forward(params: dict[str, Tensor], cfg: LmConfig, mixed: MixedInput) -> tuple[Tensor, Tensor]:
    """Run the decoder over a mixed token/vector input.

    Returns (final hidden states [len, d], next-token logits [len, vocab]).
    """
    length = len(mixed)
    if length == 0:
        raise LengthError("empty input")
    if length > cfg.max_len:
        raise LengthError(f"input length {length} exceeds max sequence length {cfg.max_len}")

    blocks: list[Tensor] = []
    for seg in mixed.segments:
        if isinstance(seg, TokenRun):
            blocks.append(T.gather_rows(params["lm.embed"], seg.ids))
        else:
            if seg.vectors.shape[-1] != cfg.d:
                raise T.DimensionError(f"injected vectors have dim {seg.vectors.shape[-1]}, model d={cfg.d}")
            blocks.append(seg.vectors)
    x = blocks[0] if len(blocks) == 1 else T.concat_rows(blocks)
    x = T.add(x, T.gather_rows(params["lm.pos"], np.arange(length)))

    head_dim = cfg.d // cfg.heads
    mask = Tensor(np.triu(np.full((length, length), -1e9, dtype=x.dtype), k=1))
    inv_sqrt = 1.0 / math.sqrt(head_dim)

    for layer in range(cfg.layers):
        base = f"lm.layer{layer}"
        a = T.layer_norm(x, cfg.eps)
        q = T.add(T.matmul(a, params[f"{base}.attn.wq"]), params[f"{base}.attn.bq"])
        k = T.add(T.matmul(a, params[f"{base}.attn.wk"]), params[f"{base}.attn.bk"])
        v = T.add(T.matmul(a, params[f"{base}.attn.wv"]), params[f"{base}.attn.bv"])
        q3 = T.transpose(T.reshape(q, (length, cfg.heads, head_dim)), (1, 0, 2))
        k3 = T.transpose(T.reshape(k, (length, cfg.heads, head_dim)), (1, 0, 2))
        v3 = T.transpose(T.reshape(v, (length, cfg.heads, head_dim)), (1, 0, 2))
        att = T.add(T.mul(T.matmul(q3, T.transpose(k3, (0, 2, 1))), inv_sqrt), mask)
        ctx = T.matmul(T.softmax(att, axis=-1), v3)
        merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (length, cfg.d))
        x = T.add(x, T.add(T.matmul(merged, params[f"{base}.attn.wo"]), params[f"{base}.attn.bo"]))

        m = T.layer_norm(x, cfg.eps)
        hidden = T.relu(T.add(T.matmul(m, params[f"{base}.mlp.w1"]), params[f"{base}.mlp.b1"]))
        x = T.add(x, T.add(T.matmul(hidden, params[f"{base}.mlp.w2"]), params[f"{base}.mlp.b2"]))

    final = T.layer_norm(x, cfg.eps)
    logits = T.matmul(final, T.transpose(params["lm.embed"]))
    return final, logits


def parametric_prompt(question: str) -> str:
    return PARAMETRIC_PREFIX.replace("{question}", question)


def reader_prompt(question: str, doc_texts: Sequence[str]) -> str:
    """Reader template; degenerates to the no-context template when empty."""
    if not doc_texts:
        return parametric_prompt(question)
    return READER_PREFIX.replace("{question}", question).replace("{context}", "\n\n".join(doc_texts))


class EcgModel:
    """Bundle of config, vocabulary, and all learnable parameters."""

    def __init__(self, cfg: LmConfig, vocab: Vocabulary, params: dict[str, Tensor]):
        if len(vocab) != cfg.vocab_size:
            raise ValueError(f"vocab has {len(vocab)} tokens, config says {cfg.vocab_size}")
        self.cfg = cfg
        self.vocab = vocab
        self.params = params

    @classmethod
    def new(cls, cfg: LmConfig, vocab: Vocabulary, seed: int, dtype=None) -> "EcgModel":
        rng = np.random.default_rng(seed)
        params = init_lm_params(cfg, rng, dtype)
        params.update(init_proj_params("ret", cfg.d, rng, dtype))
        params.update(init_proj_params("comp", cfg.d, rng, dtype))
        params["scale.log_tau"] = Tensor(np.array([math.log(0.05)]), requires_grad=True, dtype=dtype)
        params["scale.alpha"] = Tensor(np.array([1.0]), requires_grad=True, dtype=dtype)
        return cls(cfg, vocab, params)

    def forward(self, mixed: MixedInput) -> tuple[Tensor, Tensor]:
        mixed.validate_spans(self.vocab.emb_start_id, self.vocab.emb_stop_id)
        return lm_forward(self.params, self.cfg, mixed)

    def encode_hidden(self, text: str, n: int | None = None) -> Tensor:
        """Final hidden states at the n placeholder positions, in order."""
        n = self.cfg.t if n is None else n
        if n < 1:
            raise ValueError("need at least one embedding token")
        ids = self.vocab.encode(ENCODE_PROMPT) + self.vocab.encode(text)
        ids += [self.vocab.emb_start_id] + [self.vocab.emb_id] * n + [self.vocab.emb_stop_id]
        if len(ids) > self.cfg.max_len:
            raise LengthError(
                f"encoding input of {len(ids)} tokens exceeds max length {self.cfg.max_len}; chunk the text"
            )
        mixed = MixedInput()
        mixed.append_tokens(ids)
        hidden, _ = self.forward(mixed)
        start = len(ids) - n - 1
        return T.gather_rows(hidden, np.arange(start, start + n))

    def embed_text(self, text: str, n: int | None = None) -> Tensor:
        """Retrieval vectors for a text (already 1/sqrt(m)-scaled)."""
        return ret_project(self.encode_hidden(text, n), self.params, self.cfg.eps)

    def compress(self, ret_vectors: Tensor) -> Tensor:
        return comp_project(ret_vectors, self.params, self.cfg.eps)

    def build_gen_input(
        self,
        question: str,
        contexts: Sequence[Tensor],
        answer_prefix: str = "",
    ) -> MixedInput:
        """Assemble the generation input for k >= 0 compressed contexts.

        With no contexts this is exactly the no-retrieval prompt; otherwise
        each context's vectors are wrapped in <emb_start> ... <emb_stop>
        between the question prefix and the response suffix.
        """
        mixed = MixedInput()
        if not contexts:
            mixed.append_tokens(self.vocab.encode(parametric_prompt(question)))
        else:
            mixed.append_tokens(self.vocab.encode(COMPRESSED_PREFIX.replace("{question}", question)))
            for vectors in contexts:
                mixed.append_tokens([self.vocab.emb_start_id])
                mixed.append_vectors(vectors)
                mixed.append_tokens([self.vocab.emb_stop_id])
            mixed.append_tokens(self.vocab.encode(RESPONSE_SUFFIX))
        if answer_prefix:
            mixed.append_tokens(self.vocab.encode(answer_prefix))
        return mixed

    def generate(self, mixed: MixedInput, max_new: int) -> list[int]:
        """Greedy decoding until <eos> or the budget runs out; deterministic."""
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        out: list[int] = []
        base = list(mixed.segments)
        with T.no_grad():
            budget = min(max_new, self.cfg.max_len - len(mixed))
            while len(out) < budget:
                segments = base + ([TokenRun(list(out))] if out else [])
                _, logits = self.forward(MixedInput(segments=segments))
                next_id = int(np.argmax(logits.data[-1]))
                out.append(next_id)
                if next_id == self.vocab.eos_id:
                    break
        return out

    def answer(self, question: str, contexts: Sequence[Tensor], max_new: int = 12) -> str:
        ids = self.generate(self.build_gen_input(question, contexts), max_new)
        return self.vocab.decode(ids, skip_special=True)
