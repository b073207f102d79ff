from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wordspot.phoc import (
    DEFAULT_ALPHABET,
    DEFAULT_BIGRAMS,
    PhocConfig,
    PhocError,
    describe,
    encode_string,
    in_region,
    normalize_word,
    occupancy,
    phoc_dimension,
)

from oracles import phoc_oracle

CFG = PhocConfig()
words = st.text(alphabet=DEFAULT_ALPHABET, min_size=1, max_size=12)


def oracle(word, cfg=CFG):
    return phoc_oracle(word, cfg.alphabet, cfg.unigram_levels, cfg.bigrams, cfg.bigram_levels,
                       Fraction(cfg.occupancy_overlap))


def test_default_dimension_is_604():
    assert phoc_dimension(CFG) == 604
    assert encode_string("anything").shape == (604,)


def test_dimension_formula_variants():
    assert phoc_dimension(PhocConfig(unigram_levels=(2,), bigrams=())) == 72
    cfg = PhocConfig(alphabet="abcdefghijklmnopqrstuvwxyz")
    assert phoc_dimension(cfg) == 26 * 14 + 100


def test_bigram_list_has_fifty_distinct_entries():
    assert len(DEFAULT_BIGRAMS) == 50
    assert len(set(DEFAULT_BIGRAMS)) == 50


@pytest.mark.parametrize("k,n,expected", [(0, 1, (0, 1)), (0, 2, (0, Fraction(1, 2))),
                                          (3, 4, (Fraction(3, 4), 1))])
def test_occupancy(k, n, expected):
    assert occupancy(k, n) == expected


def test_occupancy_out_of_range():
    with pytest.raises(PhocError):
        occupancy(2, 2)


def test_in_region_examples():
    assert in_region((0, 1), (0, Fraction(1, 2)), 0.5)
    assert not in_region((0, Fraction(1, 4)), (Fraction(1, 2), 1), 0.5)


def test_beta_level_two_halves():
    on = set(describe(encode_string("beta")))
    assert {n for n in on if n.startswith("L2r0")} == {"L2r0:b", "L2r0:e"}
    assert {n for n in on if n.startswith("L2r1")} == {"L2r1:t", "L2r1:a"}


def test_single_character_word():
    # One character spans the whole word: it covers exactly half of each level-2
    # region pair and less than half of any region at levels 3-5.
    vec = encode_string("a")
    assert describe(vec) == ["L2r0:a", "L2r1:a"]
    np.testing.assert_array_equal(vec, oracle("a"))


def test_position_sensitivity():
    assert not np.array_equal(encode_string("listen"), encode_string("silent"))


def test_case_insensitive_and_punctuation_dropped():
    np.testing.assert_array_equal(encode_string("Word"), encode_string("word"))
    np.testing.assert_array_equal(encode_string("it's"), encode_string("its"))
    assert normalize_word("Co-op 42!") == "coop42"


def test_empty_after_normalization():
    with pytest.raises(PhocError):
        encode_string("-- !")


def test_oracle_on_fixed_words():
    for w in ["the", "there", "company", "letters", "mississippi", "a1b2c3", "zz", "q"]:
        np.testing.assert_array_equal(encode_string(w), oracle(w), err_msg=w)


def test_non_default_overlap():
    cfg = PhocConfig(occupancy_overlap=0.25)
    for w in ["abc", "hello", "xy"]:
        np.testing.assert_array_equal(encode_string(w, cfg), oracle(w, cfg))


def test_hash_tracks_content():
    assert PhocConfig().hash == PhocConfig().hash
    assert PhocConfig(bigrams=()).hash != PhocConfig().hash
    assert PhocConfig.from_dict(CFG.to_dict()) == CFG


@settings(max_examples=200, deadline=None)
@given(words)
def test_matches_oracle(word):
    np.testing.assert_array_equal(encode_string(word), oracle(word))


@settings(max_examples=200, deadline=None)
@given(words)
def test_no_spurious_bits_and_level_union(word):
    vec = encode_string(word)
    present = set(word)
    offset = 0
    n_chars = len(CFG.alphabet)
    for L in CFG.unigram_levels:
        block = vec[offset : offset + L * n_chars].reshape(L, n_chars)
        chars = {CFG.alphabet[i] for i in np.flatnonzero(block.any(axis=0))}
        assert chars <= present
        # Each level has at least as many regions' worth of coverage as needed:
        # when L <= 2n every character overlaps some region by >= half its span.
        if L <= 2 * len(word):
            assert chars == present
        offset += L * n_chars
    assert set(np.unique(vec)) <= {0.0, 1.0}


@settings(max_examples=100, deadline=None)
@given(words)
def test_deterministic_bytes(word):
    assert encode_string(word).tobytes() == encode_string(word).tobytes()
