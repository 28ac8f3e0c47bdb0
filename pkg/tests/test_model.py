import numpy as np
import pytest

from ecg import tensor as T
from ecg.model import EcgModel, LengthError, LmConfig, MixedInput, TokenRun, parametric_prompt
from ecg.tensor import Tensor
from ecg.vocab import Vocabulary

CORPUS = [
    "the capital of atlantis is pearl haven",
    "the anthem of zephyria is wind song",
    "what is the capital of atlantis",
]


@pytest.fixture(scope="module")
def vocab():
    from ecg.model import PROMPT_TEXTS

    return Vocabulary.build(CORPUS + PROMPT_TEXTS)


@pytest.fixture(scope="module")
def model(vocab):
    cfg = LmConfig(vocab_size=len(vocab), layers=2, heads=2, d=16, max_len=160, t=4)
    return EcgModel.new(cfg, vocab, seed=0)


def tokens_input(ids):
    mixed = MixedInput()
    mixed.append_tokens(ids)
    return mixed


class TestForward:
    def test_all_pad_input_is_finite(self, model):
        _, logits = model.forward(tokens_input([model.vocab.pad_id] * 5))
        assert np.isfinite(logits.data).all()

    def test_deterministic(self, model):
        ids = model.vocab.encode("the capital of atlantis")
        _, a = model.forward(tokens_input(ids))
        _, b = model.forward(tokens_input(ids))
        assert np.array_equal(a.data, b.data)

    def test_injection_equivalence_is_bit_exact(self, model):
        v = model.vocab
        word = v.encode("pearl")[0]
        pure = tokens_input(v.encode("the capital is") + [v.emb_start_id, word, v.emb_stop_id])
        _, pure_logits = model.forward(pure)

        injected = MixedInput()
        injected.append_tokens(v.encode("the capital is") + [v.emb_start_id])
        row = T.gather_rows(model.params["lm.embed"], [word])
        injected.append_vectors(row)
        injected.append_tokens([v.emb_stop_id])
        _, inj_logits = model.forward(injected)
        assert np.array_equal(pure_logits.data, inj_logits.data)

    def test_causality(self, model):
        ids = model.vocab.encode("the capital of atlantis is pearl haven")
        _, base = model.forward(tokens_input(ids))
        for j in (3, 5):
            perturbed = list(ids)
            perturbed[j] = model.vocab.pad_id
            _, out = model.forward(tokens_input(perturbed))
            assert np.array_equal(out.data[:j], base.data[:j])
            assert not np.array_equal(out.data[j:], base.data[j:])

    def test_overlong_input_rejected(self, model):
        with pytest.raises(LengthError):
            model.forward(tokens_input([model.vocab.pad_id] * (model.cfg.max_len + 1)))

    def test_unwrapped_vectors_rejected(self, model):
        mixed = MixedInput()
        mixed.append_tokens(model.vocab.encode("the capital"))
        mixed.append_vectors(Tensor(np.zeros((2, model.cfg.d))))
        with pytest.raises(ValueError, match="emb_start"):
            model.forward(mixed)


class TestEncode:
    def test_shape_contract(self, model):
        e = model.encode_hidden("the capital of atlantis", n=1)
        assert e.shape == (1, model.cfg.d)

    def test_deterministic(self, model):
        a = model.encode_hidden("the capital of atlantis", n=4)
        b = model.encode_hidden("the capital of atlantis", n=4)
        assert np.array_equal(a.data, b.data)

    def test_distinct_texts_differ(self, model):
        a = model.encode_hidden("the capital of atlantis", n=4)
        b = model.encode_hidden("the anthem of zephyria", n=4)
        assert not np.array_equal(a.data, b.data)

    @pytest.mark.parametrize("n", [1, 2, 7, 16, 33, 64])
    def test_count_matches_request(self, model, n):
        assert model.encode_hidden("pearl haven", n=n).shape[0] == n

    def test_too_long_for_budget(self, model):
        with pytest.raises(LengthError, match="chunk"):
            model.encode_hidden("pearl " * 200, n=4)

    def test_ret_embedding_shape(self, model):
        e = model.embed_text("the capital of atlantis", n=3)
        assert e.shape == (3, model.cfg.d)


class TestBuildGenInput:
    def test_no_context_matches_parametric_prompt(self, model):
        mixed = model.build_gen_input("what is the capital of atlantis", [])
        expected = model.vocab.encode(parametric_prompt("what is the capital of atlantis"))
        assert mixed.token_ids() == expected
        assert all(kind == "token" for kind in mixed.element_kinds())

    def test_single_context_span(self, model):
        ctx = Tensor(np.zeros((3, model.cfg.d)))
        mixed = model.build_gen_input("what is the capital of atlantis", [ctx])
        kinds = mixed.element_kinds()
        assert kinds.count("vector") == 3
        first, last = kinds.index("vector"), len(kinds) - 1 - kinds[::-1].index("vector")
        assert kinds[first : last + 1] == ["vector"] * 3
        ids = mixed.token_ids()
        assert ids.count(model.vocab.emb_start_id) == 1
        assert ids.count(model.vocab.emb_stop_id) == 1

    def test_two_contexts_in_order(self, model):
        v = model.vocab
        c1 = Tensor(np.zeros((2, model.cfg.d)))
        c2 = Tensor(np.ones((2, model.cfg.d)))
        mixed = model.build_gen_input("what is the capital of atlantis", [c1, c2])
        ids = mixed.token_ids()
        assert ids.count(v.emb_start_id) == 2 and ids.count(v.emb_stop_id) == 2
        spans = [seg for seg in mixed.segments if hasattr(seg, "vectors")]
        assert np.array_equal(spans[0].vectors.data, c1.data)
        assert np.array_equal(spans[1].vectors.data, c2.data)


class TestGenerate:
    def test_uniform_logits_emit_eos_first(self, model, vocab):
        cfg = model.cfg
        zero = EcgModel.new(cfg, vocab, seed=1)
        for name, p in zero.params.items():
            if name.startswith("lm."):
                p.data[:] = 0.0
        out = zero.generate(tokens_input(vocab.encode("the capital")), max_new=5)
        assert out == [vocab.eos_id]

    def test_budget_of_one(self, model):
        out = model.generate(tokens_input(model.vocab.encode("the capital")), max_new=1)
        assert len(out) == 1

    def test_deterministic(self, model):
        inp = tokens_input(model.vocab.encode("the capital of"))
        assert model.generate(inp, 6) == model.generate(inp, 6)

    def test_does_not_mutate_input(self, model):
        inp = tokens_input(model.vocab.encode("the capital of"))
        before = list(inp.token_ids())
        model.generate(inp, 4)
        assert inp.token_ids() == before


def test_config_round_trip(tmp_path, vocab):
    cfg = LmConfig(vocab_size=len(vocab), layers=1, heads=2, d=8, max_len=32, t=2)
    path = tmp_path / "model.cfg"
    cfg.save(path)
    assert LmConfig.load(path) == cfg


def test_config_validation():
    with pytest.raises(ValueError):
        LmConfig(vocab_size=10, heads=3, d=16)
    with pytest.raises(ValueError):
        LmConfig(vocab_size=10, t=0)
