"""Token table layout and encode/decode round trips."""

import numpy as np
import pytest

from longctx import vocab as V
from longctx.vocab import DEFAULT_VOCAB, Vocab, VocabError


def test_id_layout_constants():
    assert V.VOCAB_SIZE == 1024
    assert V.TEXT_SIZE == 512
    assert V.VISION_CODE_START == 512
    assert V.VISION_CODE_COUNT == 510
    assert V.VISION_CODE_START + V.VISION_CODE_COUNT == V.EOF_ID
    assert V.EOF_ID == 1022
    assert V.EOV_ID == 1023
    assert V.FRAME_TOKENS == 256
    assert (V.PAD_ID, V.BOS_ID, V.EOS_ID) == (0, 1, 2)
    assert (V.VISION_OPEN_ID, V.VISION_CLOSE_ID) == (3, 4)


def test_text_table_fits_and_has_no_collisions():
    v = Vocab()
    assert v.text_used <= V.TEXT_SIZE
    assert len(v.cities) == len(set(v.cities))
    assert len(v.filler_ids) == len(set(v.filler_ids))


def test_encode_decode_round_trip_text():
    for text in (
        "the magic number for paris is 4281903.",
        "what is the magic number for tokyo?",
        "user: help assistant: here, now!",
    ):
        ids = DEFAULT_VOCAB.encode(text)
        assert DEFAULT_VOCAB.decode(ids) == text


def test_decode_encode_round_trip_ids():
    rng = np.random.default_rng(0)
    usable = [t for t in range(DEFAULT_VOCAB.text_used) if t > V.VISION_CLOSE_ID]
    ids = [int(rng.choice(usable)) for _ in range(40)]
    assert DEFAULT_VOCAB.encode(DEFAULT_VOCAB.decode(ids)) == ids


def test_digit_runs_stay_contiguous():
    ids = DEFAULT_VOCAB.encode("1234567")
    assert len(ids) == 7
    assert DEFAULT_VOCAB.decode(ids) == "1234567"


def test_punctuation_binds_left():
    # encode ignores spacing around punctuation; decode reattaches it left
    ids = DEFAULT_VOCAB.encode("paris is 42 .")
    assert ids == DEFAULT_VOCAB.encode("paris is 42.")
    assert DEFAULT_VOCAB.decode(ids) == "paris is 42."
    assert DEFAULT_VOCAB.decode(DEFAULT_VOCAB.encode("so , no")) == "so, no"


def test_unknown_word_raises():
    with pytest.raises(VocabError):
        DEFAULT_VOCAB.encode("xylophone")
    with pytest.raises(VocabError):
        DEFAULT_VOCAB.word_id("zzz")


def test_encode_number_digits():
    assert DEFAULT_VOCAB.encode_number(402) == DEFAULT_VOCAB.encode("402")
    assert len(DEFAULT_VOCAB.encode_number(1_000_000)) == 7


def test_specials_and_vision_codes_render_bracketed():
    assert DEFAULT_VOCAB.decode([V.BOS_ID]) == "<bos>"
    assert DEFAULT_VOCAB.decode([V.EOF_ID]) == "<eof>"
    assert DEFAULT_VOCAB.decode([V.EOV_ID]) == "<eov>"
    assert "<v0>" in DEFAULT_VOCAB.decode([V.VISION_CODE_START])
    assert "<v509>" in DEFAULT_VOCAB.decode([V.VISION_CODE_START + 509])
    with pytest.raises(VocabError):
        DEFAULT_VOCAB.decode([V.VOCAB_SIZE])


def test_text_and_vision_range_predicates():
    v = DEFAULT_VOCAB
    assert v.is_text_id(0)
    assert v.is_text_id(V.TEXT_SIZE - 1)
    assert not v.is_text_id(V.TEXT_SIZE)
    assert v.is_vision_id(V.VISION_CODE_START)
    assert v.is_vision_id(V.EOV_ID)
    assert not v.is_vision_id(V.TEXT_SIZE - 1)


def test_city_ids_map_back_to_city_names():
    v = DEFAULT_VOCAB
    for cid, name in zip(v.city_ids, v.cities):
        assert v.decode([cid]) == name
        assert v.word_id(name) == cid
