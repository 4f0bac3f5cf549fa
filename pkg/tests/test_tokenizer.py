import string

import pytest
from hypothesis import given, settings, strategies as st

from slt.tokenizer import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    CasingModel,
    EmptyCorpusError,
    TokenizerError,
    VocabSizeError,
    Vocabulary,
    decode,
    encode,
    train_casing,
    train_vocab,
    truecase,
)

CORPUS = [
    "the cat sat on the mat",
    "the dog sat on the log",
    "a cat and a dog",
    "dogs chase cats all day",
]


def test_special_id_layout():
    vocab = train_vocab(CORPUS, 64)
    assert vocab.subwords[BOS_ID] == "<s>"
    assert vocab.subwords[PAD_ID] == "<pad>"
    assert vocab.subwords[EOS_ID] == "</s>"
    assert vocab.subwords[UNK_ID] == "<unk>"
    assert PAD_ID == 1


def test_first_merge_on_tiny_corpus():
    # "aaab aaab": pairs (▁a,a), (a,a), (a,b) all tie at count 2;
    # lexicographic tie-break selects (a,a)
    vocab = train_vocab(["aaab aaab"], 32)
    assert vocab.merges[0] == ("a", "a")


def test_size_at_base_inventory_learns_no_merges():
    # "aaab" -> base symbols {▁a, a, b}
    vocab = train_vocab(["aaab aaab"], 3 + 4)
    assert vocab.merges == []
    assert len(vocab) == 7


def test_training_deterministic():
    v1 = train_vocab(CORPUS, 50)
    v2 = train_vocab(CORPUS, 50)
    assert v1.subwords == v2.subwords
    assert v1.merges == v2.merges


def test_empty_corpus_rejected():
    with pytest.raises(EmptyCorpusError):
        train_vocab(["", "   "], 10)


def test_size_too_small_rejected():
    with pytest.raises(VocabSizeError):
        train_vocab(CORPUS, 5)


def test_vocab_never_exceeds_requested_size():
    for size in (8, 20, 50, 200):
        try:
            vocab = train_vocab(CORPUS, size)
        except VocabSizeError:
            continue
        assert len(vocab) <= size


def test_encode_empty_string():
    vocab = train_vocab(CORPUS, 64)
    assert encode("", vocab) == []


def test_roundtrip_on_corpus_lines():
    vocab = train_vocab(CORPUS, 120)
    for line in CORPUS:
        ids = encode(line, vocab)
        assert decode(ids, vocab) == line.lower()
        assert PAD_ID not in ids


def test_unknown_character_maps_to_unk():
    vocab = train_vocab(CORPUS, 64)
    ids = encode("zebra", vocab)  # z, b, r absent from corpus
    assert UNK_ID in ids


def test_decode_out_of_range():
    vocab = train_vocab(CORPUS, 64)
    with pytest.raises(TokenizerError):
        decode([len(vocab)], vocab)


def test_encode_recase_invariance():
    vocab = train_vocab(CORPUS, 64)
    assert encode("The CAT", vocab) == encode("the cat", vocab)


def test_save_load_identical(tmp_path):
    vocab = train_vocab(CORPUS, 64)
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    loaded = Vocabulary.load(path)
    assert loaded.subwords == vocab.subwords
    assert loaded.merges == vocab.merges
    text = "the cat sat"
    assert encode(text, loaded) == encode(text, vocab)


def test_vocab_file_layout(tmp_path):
    vocab = train_vocab(["aaab aaab"], 12)
    path = tmp_path / "v.txt"
    vocab.save(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "SLTVOCAB 1"
    assert lines[1] == f"size={len(vocab)}"
    assert lines[2 + len(vocab)] == "#MERGES"
    assert "\t" in lines[3 + len(vocab)]


def test_merge_outputs_all_in_table():
    vocab = train_vocab(CORPUS, 100)
    for left, right in vocab.merges:
        assert left + right in vocab.subwords


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.text(alphabet=string.ascii_lowercase, min_size=1, max_size=6),
        min_size=1,
        max_size=8,
    )
)
def test_roundtrip_property(words):
    text = " ".join(words)
    vocab = train_vocab([text], 400)
    assert decode(encode(text, vocab), vocab) == text


@settings(max_examples=40, deadline=None)
@given(st.text(alphabet=string.ascii_lowercase + " %$#0189", max_size=40))
def test_encode_total(text):
    vocab = train_vocab(CORPUS, 64)
    ids = encode(text, vocab)
    assert all(0 <= i < len(vocab) for i in ids)
    assert PAD_ID not in ids


class TestTruecase:
    def test_hand_example_with_phrase_key(self):
        casing = CasingModel(forms={"new york": "New York", "i": "I"})
        assert truecase("i live in new york", casing) == "I live in New York"

    def test_empty_string(self):
        assert truecase("", CasingModel(forms={})) == ""

    def test_unknown_word_passthrough(self):
        casing = CasingModel(forms={"usa": "USA"})
        assert truecase("the usa flag", casing) == "The USA flag"

    def test_initial_capital_applied_without_model_entry(self):
        assert truecase("hello there", CasingModel(forms={})) == "Hello there"

    def test_keys_must_be_lowercase(self):
        with pytest.raises(TokenizerError):
            CasingModel(forms={"USA": "USA"})

    def test_surface_must_match_key_modulo_case(self):
        with pytest.raises(TokenizerError):
            CasingModel(forms={"usa": "America"})

    def test_train_casing_picks_majority_form(self):
        model = train_casing(
            [
                "we visited NASA today",
                "the NASA launch",
                "about nasa and space",
                "I said I would",
            ]
        )
        assert model.forms["nasa"] == "NASA"
        assert model.forms["i"] == "I"

    def test_train_casing_skips_sentence_initial(self):
        # "Big" only ever appears sentence-initially; its capital is positional
        model = train_casing(["Big dogs bark", "Big cats purr"])
        assert "big" not in model.forms

    def test_save_load(self, tmp_path):
        model = train_casing(["we visited NASA today", "the NASA launch"])
        path = tmp_path / "case.txt"
        model.save(path)
        loaded = CasingModel.load(path)
        assert loaded.forms == model.forms
        assert loaded.capitalize_initial == model.capitalize_initial
