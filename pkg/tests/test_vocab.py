import pytest

from ecg.vocab import SPECIAL_TOKENS, Vocabulary


@pytest.fixture
def vocab():
    return Vocabulary.build(["the capital of atlantis is pearl", "what is the capital"])


def test_empty_string(vocab):
    assert vocab.encode("") == []


def test_known_words_round_trip(vocab):
    ids = vocab.encode("capital of atlantis")
    assert len(ids) == 3
    assert vocab.decode(ids) == "capital of atlantis"


def test_unseen_symbol_maps_to_unk(vocab):
    ids = vocab.encode("capital @ atlantis")
    assert vocab.unk_id in ids
    assert "<unk>" in vocab.decode(ids)


def test_character_fallback_preserves_word_boundaries(vocab):
    # "pearls" and "laof" are unseen words over the known alphabet.
    ids = vocab.encode("pearls of laof")
    assert vocab.decode(ids) == "pearls of laof"
    assert vocab.unk_id not in ids


def test_special_tokens_first_in_fixed_order(vocab):
    assert tuple(vocab.token(i) for i in range(len(SPECIAL_TOKENS))) == SPECIAL_TOKENS
    assert vocab.eos_id == 0
    assert len({vocab.emb_start_id, vocab.emb_id, vocab.emb_stop_id}) == 3


def test_decode_skip_special(vocab):
    ids = [vocab.emb_start_id] + vocab.encode("pearl") + [vocab.eos_id]
    assert vocab.decode(ids, skip_special=True) == "pearl"


def test_file_round_trip(tmp_path, vocab):
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    loaded = Vocabulary.load(path)
    assert len(loaded) == len(vocab)
    text = "what is the capital of atlantis"
    assert loaded.encode(text) == vocab.encode(text)
    lines = path.read_text().splitlines()
    assert tuple(lines[:7]) == SPECIAL_TOKENS
    assert lines[7:] == sorted(lines[7:])


def test_bad_vocab_file_rejected(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("foo\nbar\n")
    with pytest.raises(ValueError):
        Vocabulary.load(path)
