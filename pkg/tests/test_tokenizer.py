"""Vocabulary training, lossless round-trips, and id-space layout."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minicoder import tokenizer as tok


SNIPPETS = [
    "def add(a, b):\n    return a + b\n",
    "def sub(a, b):\n    return a - b\n",
    "for i in range(10):\n    print(i)\n",
    "class Point:\n    def __init__(self, x, y):\n        self.x = x\n",
    "while n > 0:\n    n -= 1\n",
    "import math\nvalue = math.sqrt(2)\n",
]


@pytest.fixture(scope="module")
def vocab():
    return tok.train_vocabulary(SNIPPETS * 4, target_size=320)


def test_special_ids_are_reserved():
    assert tok.SPECIAL_TOKENS == ("<descr>", "<python>", "<eoc>", "<mask>", "<pad>")
    assert tok.DESCR_ID == 0
    assert tok.PYTHON_ID == 1
    assert tok.EOC_ID == 2
    assert tok.MASK_ID == 3
    assert tok.PAD_ID == 4
    assert tok.MIN_VOCAB_SIZE == 261


def test_round_trip_single_snippet():
    text = "def f():\n    return 1"
    vocab = tok.train_vocabulary([text], target_size=300)
    seq = tok.encode(text, tok.Segment.DESCR, vocab)
    assert tok.decode(seq.ids, vocab) == text


def test_requested_size_honored():
    texts = [
        f"def fn_{i}(x{i % 13}):\n    y = x{i % 13} * {i} + {i * i % 97}\n"
        f"    return y - {i % 7}\n"
        for i in range(1000)
    ]
    vocab = tok.train_vocabulary(texts, target_size=512)
    assert vocab.size == 512
    assert vocab.size == len(vocab.subwords) + tok.NUM_SPECIALS


def test_size_counts_subwords_plus_specials(vocab):
    assert vocab.size == len(vocab.subwords) + tok.NUM_SPECIALS


def test_training_is_deterministic():
    a = tok.train_vocabulary(SNIPPETS, target_size=280)
    b = tok.train_vocabulary(SNIPPETS, target_size=280)
    assert a.subwords == b.subwords


def test_merge_tie_break_is_lexicographic():
    # (a,a) and (b,b) both occur twice; the lexicographically smaller pair
    # must merge first.
    vocab = tok.train_vocabulary(["bbxbb", "aaxaa"], target_size=262)
    assert vocab.subwords[256] == b"aa"


def test_encode_never_emits_control_ids(vocab):
    text = "x = '<eoc>' + '<descr>'"
    seq = tok.encode(text, tok.Segment.DESCR, vocab)
    assert all(i >= tok.NUM_SPECIALS for i in seq.ids)
    assert tok.decode(seq.ids, vocab) == text


def test_below_byte_fallback_minimum_rejected():
    with pytest.raises(ValueError, match="byte-fallback minimum"):
        tok.train_vocabulary(SNIPPETS, target_size=260)


def test_code_segment_tagging_without_offset(vocab):
    text = "\n    return 1"
    descr = tok.encode(text, tok.Segment.DESCR, vocab)
    code = tok.encode(text, tok.Segment.CODE, vocab)
    assert code.ids == descr.ids
    assert set(code.segments) == {tok.Segment.CODE}
    assert set(descr.segments) == {tok.Segment.DESCR}


def test_separate_code_space_offsets_are_a_bijection():
    vocab = tok.train_vocabulary(SNIPPETS, target_size=300, separate_code_space=True)
    text = "\n    return 1"
    descr = tok.encode(text, tok.Segment.DESCR, vocab)
    code = tok.encode(text, tok.Segment.CODE, vocab)
    assert code.ids == [i + vocab.size for i in descr.ids]
    assert all(i >= vocab.size for i in code.ids)
    assert vocab.embedding_size == 2 * vocab.size
    # Decoding un-offsets code ids back to the same text.
    assert tok.decode(code.ids, vocab) == text
    assert tok.decode(descr.ids, vocab) == text


def test_embedding_size_without_flag(vocab):
    assert vocab.embedding_size == vocab.size


def test_decode_renders_markers_on_request(vocab):
    seq = tok.TokenSequence()
    seq.append_special(tok.PYTHON_ID)
    seq.extend(tok.encode("pass", tok.Segment.CODE, vocab))
    seq.append_special(tok.EOC_ID)
    assert tok.decode(seq.ids, vocab, markers=True) == "<python>pass<eoc>"
    assert tok.decode(seq.ids, vocab) == "pass"


def test_decode_out_of_range_names_position(vocab):
    with pytest.raises(ValueError, match="position 1"):
        tok.decode([5, vocab.embedding_size + 3], vocab)


def test_save_load_round_trip(tmp_path, vocab):
    path = tmp_path / "vocab.txt"
    tok.save_vocabulary(vocab, str(path))
    loaded = tok.load_vocabulary(str(path))
    assert loaded.subwords == vocab.subwords
    assert loaded.separate_code_space == vocab.separate_code_space
    for text in SNIPPETS:
        assert (
            tok.encode(text, tok.Segment.CODE, loaded).ids
            == tok.encode(text, tok.Segment.CODE, vocab).ids
        )
    # A second save of the loaded vocabulary is byte-identical.
    path2 = tmp_path / "vocab2.txt"
    tok.save_vocabulary(loaded, str(path2))
    assert path.read_bytes() == path2.read_bytes()


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "bogus.txt"
    path.write_text("not a vocabulary\n")
    with pytest.raises(ValueError, match="not a vocabulary file"):
        tok.load_vocabulary(str(path))


def test_token_sequence_validates_lengths():
    with pytest.raises(ValueError):
        tok.TokenSequence([1, 2], [tok.Segment.CODE])
    seq = tok.TokenSequence()
    with pytest.raises(ValueError):
        seq.append_special(99)


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=200))
def test_round_trip_arbitrary_text(text):
    vocab = _SHARED_VOCAB
    for segment in (tok.Segment.DESCR, tok.Segment.CODE):
        seq = tok.encode(text, segment, vocab)
        assert tok.decode(seq.ids, vocab) == text


_SHARED_VOCAB = tok.train_vocabulary(SNIPPETS, target_size=300, separate_code_space=True)
