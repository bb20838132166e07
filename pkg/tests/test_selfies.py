import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain
from fpdecode.molgraph import canonical_hash, formula_of, with_filled_hydrogens
from fpdecode.selfies import (
    BondPrefix,
    Part,
    TokenFactor,
    Vocabulary,
    canonicalize_token,
    corpus_counts,
    decode,
    encode,
    parse_token,
    split_tokens,
)
from fpdecode.synth import random_corpus, random_molecule


# -- factor parsing


def test_parse_double_carbon():
    assert parse_token("[=C]") == TokenFactor(Part.ATOM, element="C", bond_prefix=BondPrefix.DOUBLE)


def test_parse_ring2():
    f = parse_token("[Ring2]")
    assert (f.part, f.element, f.bond_prefix, f.rb_order, f.hex_digit) == (Part.RING, None, BondPrefix.NONE, 2, None)


def test_parse_hex_a():
    f = parse_token("[A]")
    assert (f.part, f.hex_digit, f.element, f.rb_order) == (Part.HEX, 10, None, None)


@pytest.mark.parametrize("bad", ["C", "[C", "[[C]]", "[Xx]", "[Q]", "[Ring4]", "[Ring0]", "[]", "[=]"])
def test_parse_rejects(bad):
    with pytest.raises(ValueError):
        parse_token(bad)


def test_shared_element_distinct_prefix():
    a, b = parse_token("[C]"), parse_token("[=C]")
    assert a.element == b.element and a.bond_prefix != b.bond_prefix


def test_factor_invariants_enforced():
    with pytest.raises(ValueError):
        TokenFactor(Part.HEX, hex_digit=3, rb_order=1)
    with pytest.raises(ValueError):
        TokenFactor(Part.ATOM)
    with pytest.raises(ValueError):
        TokenFactor(Part.RING, element="C", rb_order=1)


@pytest.mark.parametrize("text, canon", [("[=C@H1]", "[=C]"), ("[C]", "[C]"), ("[13C+1]", "[C]"), ("[Ring1]", "[Ring1]"), ("[7]", "[7]")])
def test_canonicalize(text, canon):
    assert canonicalize_token(text) == canon


# -- vocabulary


def test_default_vocab_contents(vocab):
    assert vocab.texts[:3] == ("[BOS]", "[EOS]", "[PAD]")
    # 18 atoms, 3 ring, 4 branch, 16 hex, 3 specials
    assert len(vocab) == 44
    assert vocab.id_of("[C]") != vocab.id_of("[C]", digit_slot=True)
    assert vocab.factors[vocab.hex_id(12)].hex_digit == 12


def test_every_vocab_factor_consistent(vocab):
    full = Vocabulary.full()
    for v in (vocab, full):
        for tok in v:
            f = v.factors[tok.id]
            if f.part is not Part.HEX:
                assert canonicalize_token(canonicalize_token(tok.text)) == canonicalize_token(tok.text)
            if f.part is Part.ATOM:
                assert f.element and f.rb_order is None and f.hex_digit is None
            if f.part in (Part.RING, Part.BRANCH):
                assert f.rb_order in (1, 2, 3) and f.element is None


def test_vocab_file_round_trip(vocab):
    counted = corpus_counts(["[C][C]", "[C][=O]"], vocab)
    again = Vocabulary.loads(counted.dumps())
    assert again.texts == counted.texts
    assert again.class_counts == counted.class_counts


def test_vocab_requires_specials():
    with pytest.raises(ValueError):
        Vocabulary(["[C]", "[N]"])


# -- corpus counts


def test_corpus_counts_example(vocab):
    v = corpus_counts(["[C][C]", "[C][=O]"], vocab)
    assert v.count("[C]") == 3
    assert v.count("[=O]") == 1
    assert v.count("[N]") == 0


def test_corpus_counts_empty(vocab):
    assert set(corpus_counts([], vocab).class_counts) == {0}


def test_corpus_counts_order_invariant(vocab, rng):
    seqs = ["".join(encode(g)) for g in random_corpus(40, 1, vocab)]
    a = corpus_counts(seqs, vocab).class_counts
    b = corpus_counts(seqs[::-1], vocab).class_counts
    assert a == b


def test_digit_slot_not_counted_as_atom(vocab):
    # [Ring1][C] closes a ring twelve atoms back; the [C] there is a digit
    v = corpus_counts(["[C][Ring1][C]"], vocab)
    assert v.count("[C]") == 1


# -- encode / decode


def test_encode_examples():
    assert "".join(encode(chain(["C", "C"]))) == "[C][C]"
    assert "".join(encode(chain(["C", "O"], [2]))) == "[C][=O]"
    assert "".join(encode(chain(["C"]))) == "[C]"


def test_decode_ethane():
    assert formula_of(decode(split_tokens("[C][C]"))) == {"C": 2, "H": 6}


def test_decode_benzene(benzene):
    g = decode(split_tokens("[C][=C][C][=C][C][=C][Ring1][5]"))
    assert formula_of(g) == {"C": 6, "H": 6}
    assert canonical_hash(g) == canonical_hash(benzene)


def test_decode_dangling_ring_is_empty():
    assert decode(["[Ring1]"]).num_atoms == 0


def test_decode_caps_bond_order():
    # O=O would need a double bond; [#C] after [O] is capped to a double bond
    g = decode(split_tokens("[O][#C]"))
    assert formula_of(g) == {"C": 1, "O": 1, "H": 2}


def test_decode_stops_at_eos_and_rejects_oov(vocab):
    assert decode(split_tokens("[C][EOS][C]")).num_atoms == 1
    with pytest.raises(KeyError):
        decode(["[C]", "[Xe]"], vocab)


def test_decode_branch_span():
    # isobutane: C(C)C with a one-token branch, then the chain continues
    g = decode(split_tokens("[C][C][Branch1][0][C][C]"))
    assert canonical_hash(g) == canonical_hash(
        with_filled_hydrogens([("C", 0)] * 4, [(0, 1, 1), (1, 2, 1), (1, 3, 1)])
    )


def test_decode_ids_and_texts_agree(vocab, rng):
    for g in random_corpus(20, 2, vocab):
        texts = encode(g)
        assert canonical_hash(decode(vocab.ids(texts), vocab)) == canonical_hash(decode(texts))


def test_round_trip_random_corpus(rng):
    for g in random_corpus(300, 3):
        assert canonical_hash(decode(encode(g))) == canonical_hash(g)


def test_encode_root_invariance(rng):
    for _ in range(20):
        g = random_molecule(rng, max_atoms=12)
        hashes = {canonical_hash(decode(encode(g, root=r))) for r in range(g.num_atoms)}
        assert hashes == {canonical_hash(g)}


def test_encode_deterministic_under_permutation(rng):
    for _ in range(20):
        g = random_molecule(rng, max_atoms=14)
        assert encode(g.permute(rng.permutation(g.num_atoms))) == encode(g)


def test_encode_rejects_disconnected():
    g = with_filled_hydrogens([("C", 0), ("C", 0)], [])
    with pytest.raises(ValueError):
        encode(g)


@settings(max_examples=500, deadline=None)
@given(st.lists(st.integers(0, 43), max_size=40))
def test_decode_is_total(ids):
    vocab = Vocabulary.default()
    g = decode([vocab.texts[i] for i in ids])
    # constructing the graph re-validates every invariant
    assert g.num_atoms >= 0


def test_decode_total_on_long_fuzz(vocab):
    rng = np.random.default_rng(7)
    for _ in range(2000):
        ids = rng.integers(0, len(vocab), size=int(rng.integers(0, 80)))
        decode([vocab.texts[i] for i in ids])
