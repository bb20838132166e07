import numpy as np
import pytest

from fpdecode.molgraph import formula_of
from fpdecode.selfies import Vocabulary, decode, encode, split_tokens
from fpdecode.structure_loss import (
    LossWeights,
    decoder_loss,
    decoder_loss_from_logits,
    factor_marginals,
    structural_counts,
)
from fpdecode.synth import random_corpus, random_molecule

BENZENE = "[C][=C][C][=C][C][=C][Ring1][5]"


def _onehot(vocab, texts):
    ids = vocab.ids(texts)
    p = np.zeros((len(ids), len(vocab)))
    p[np.arange(len(ids)), ids] = 1.0
    return p, np.array(ids)


# -- marginals


def test_marginal_of_point_mass(vocab):
    p, _ = _onehot(vocab, ["[=C]"])
    m = factor_marginals(p, vocab)
    assert m.as_dict("elem")["C"] == 1.0
    assert m.as_dict("bond")["DOUBLE"] == 1.0
    assert m.as_dict("ring")[0] == 1.0


def test_marginal_of_uniform_pair(vocab):
    p = np.zeros(len(vocab))
    p[[vocab.id_of("[C]"), vocab.id_of("[=C]")]] = 0.5
    m = factor_marginals(p, vocab)
    assert m.as_dict("elem")["C"] == 1.0
    bond = m.as_dict("bond")
    assert bond["NONE"] == 0.5 and bond["DOUBLE"] == 0.5


def test_marginals_normalised(vocab, rng):
    p = rng.dirichlet(np.full(len(vocab), 0.3), size=50)
    m = factor_marginals(p, vocab)
    for name in ("elem", "bond", "ring", "branch"):
        assert np.allclose(m[name].sum(axis=1), 1.0, atol=1e-9)


def test_marginals_reject_unnormalised(vocab):
    with pytest.raises(ValueError):
        factor_marginals(np.full(len(vocab), 0.5), vocab)


# -- counts


def test_benzene_counts():
    c = structural_counts(BENZENE)
    assert (c.elements, c.double, c.triple, c.ring, c.branch) == ({"C": 6}, 3, 0, 1, 0)


def test_empty_counts():
    c = structural_counts([])
    assert (c.elements, c.multiple_bonds, c.ring, c.branch) == ({}, 0, 0, 0)


def test_counts_match_decoded_heavy_atoms(vocab):
    for g in random_corpus(100, 11, vocab):
        toks = encode(g)
        assert structural_counts(toks).elements == formula_of(decode(toks)).heavy()


def test_bond_and_ring_counts_root_invariant(rng):
    for _ in range(40):
        g = random_molecule(rng, max_atoms=14)
        seen = {
            (c.double, c.triple, c.ring)
            for c in (structural_counts(encode(g, root=r)) for r in range(g.num_atoms))
        }
        assert len(seen) == 1


def test_branch_count_invariant_over_terminal_roots_of_trees(rng):
    done = 0
    while done < 20:
        g = random_molecule(rng, max_atoms=14)
        if g.num_bonds != g.num_atoms - 1:
            continue
        leaves = [i for i in range(g.num_atoms) if len(g.adjacency[i]) == 1]
        assert len({structural_counts(encode(g, root=r)).branch for r in leaves}) <= 1
        done += 1


# -- loss


def test_perfect_prediction_is_zero(vocab):
    p, y = _onehot(vocab, split_tokens(BENZENE) + ["[EOS]"])
    out = decoder_loss(p, y, vocab)
    assert out.total == 0.0 and out.clamped == 0


def test_lambda_zero_is_token_ce(vocab, rng):
    z = rng.normal(size=(3, 7, len(vocab)))
    y = rng.integers(0, len(vocab), size=(3, 7))
    out, _ = decoder_loss_from_logits(z, y, vocab, LossWeights(lambda_sent=0.0))
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    ce = -np.take_along_axis(logp, y[..., None], -1).mean()
    assert abs(out.total - ce) <= 1e-12
    assert out.total == out.ce


def test_two_position_hand_case(vocab):
    c, dc, n, r1 = (vocab.id_of(t) for t in ("[C]", "[=C]", "[N]", "[Ring1]"))
    h5 = vocab.hex_id(5)
    p = np.zeros((2, len(vocab)))
    p[0, [c, dc, n]] = [0.5, 0.3, 0.2]
    p[1, [r1, h5, c]] = [0.1, 0.6, 0.3]
    y = np.array([dc, h5])
    w = LossWeights(lambda_sent=0.5, w_elem=1.0, w_bond=2.0, w_ring=0.5, w_branch=1.5)
    out = decoder_loss(p, y, vocab, w)
    ce = -(np.log(0.3) + np.log(0.6)) / 2
    # position 0 target [=C]: elem C gets 0.8, bond DOUBLE gets 0.3, ring class 0 gets 1, branch class 0 gets 1
    # position 1 target [5]: no element or bond, ring class 0 gets 0.9, branch class 0 gets 1
    elem = -np.log(0.8)
    bond = -np.log(0.3)
    ring = -(np.log(1.0) + np.log(0.9)) / 2
    branch = 0.0
    expected = ce + 0.5 * (elem + 2 * bond + 0.5 * ring + 1.5 * branch)
    assert abs(out.ce - ce) < 1e-10
    assert abs(out.elem - elem) < 1e-10 and abs(out.bond - bond) < 1e-10 and abs(out.ring - ring) < 1e-10
    assert abs(out.total - expected) < 1e-10


def test_aux_terms_never_lower_the_loss(vocab, rng):
    for _ in range(20):
        z = rng.normal(scale=3, size=(5, len(vocab)))
        y = rng.integers(0, len(vocab), size=5)
        out, _ = decoder_loss_from_logits(z, y, vocab, LossWeights(lambda_sent=float(rng.random())))
        assert out.total >= out.ce


def test_zero_probability_target_is_clamped(vocab):
    p = np.zeros((1, len(vocab)))
    p[0, vocab.id_of("[N]")] = 1.0
    out = decoder_loss(p, [vocab.id_of("[=C]")], vocab)
    assert out.clamped > 0 and np.isfinite(out.total)
    assert out.ce == pytest.approx(-np.log(1e-12))


def test_logit_and_prob_paths_agree(vocab, rng):
    z = rng.normal(size=(6, len(vocab)))
    y = rng.integers(0, len(vocab), size=6)
    a, _ = decoder_loss_from_logits(z, y, vocab)
    p = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
    b = decoder_loss(p, y, vocab)
    for k, v in a.as_dict().items():
        assert v == pytest.approx(b.as_dict()[k], abs=1e-10)


def test_valid_mask_excludes_positions(vocab, rng):
    z = rng.normal(size=(4, len(vocab)))
    y = rng.integers(0, len(vocab), size=4)
    full, _ = decoder_loss_from_logits(z[:2], y[:2], vocab)
    masked, g = decoder_loss_from_logits(z, y, vocab, valid=[1, 1, 0, 0])
    assert masked.total == pytest.approx(full.total)
    assert np.all(g[2:] == 0)


def _fd_check(vocab, rng, weights, shape=(2, 5)):
    z = rng.normal(scale=1.5, size=(*shape, len(vocab)))
    y = rng.integers(0, len(vocab), size=shape)
    _, g = decoder_loss_from_logits(z, y, vocab, weights)
    num = np.zeros_like(z)
    h = 1e-5
    it = np.nditer(z, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        num[idx] = (
            decoder_loss_from_logits(zp, y, vocab, weights, grad=False)[0].total
            - decoder_loss_from_logits(zm, y, vocab, weights, grad=False)[0].total
        ) / (2 * h)
    return np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12)


def test_gradient_matches_finite_differences(vocab, rng):
    assert _fd_check(vocab, rng, LossWeights(lambda_sent=0.7, w_elem=1.3, w_bond=0.4, w_ring=2.0, w_branch=0.9)) <= 1e-4


def test_gradient_on_toy_vocabulary(rng):
    toy = Vocabulary(["[BOS]", "[EOS]", "[PAD]", "[C]", "[=C]", "[O]", "[=O]", "[Ring1]", "[Branch1]", "[0]", "[1]"])
    assert _fd_check(toy, rng, LossWeights(lambda_sent=1.0), shape=(3, 4)) <= 1e-4
