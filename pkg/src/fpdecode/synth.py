"""Seeded random generator of valid, connected molecular graphs for toy corpora and tests."""

from __future__ import annotations

import numpy as np

from .molgraph import MolecularGraph, allowed_valences, canonical_hash, with_filled_hydrogens
from .selfies import Vocabulary, encode

ELEMENT_WEIGHTS = {"C": 0.62, "N": 0.12, "O": 0.14, "S": 0.03, "P": 0.01, "F": 0.03, "Cl": 0.03, "Br": 0.01, "I": 0.01}


def random_molecule(
    rng: np.random.Generator,
    max_atoms: int = 20,
    min_atoms: int = 1,
    ring_rate: float = 0.6,
    upgrade_prob: float = 0.2,
    charge_prob: float = 0.03,
    element_weights: dict[str, float] | None = None,
) -> MolecularGraph:
    weights = element_weights or ELEMENT_WEIGHTS
    symbols = list(weights)
    p = np.array([weights[s] for s in symbols], dtype=float)
    p /= p.sum()
    n = int(rng.integers(min_atoms, max_atoms + 1))

    atoms: list[tuple[str, int]] = []
    cap: list[int] = []
    for _ in range(n):
        el = symbols[rng.choice(len(symbols), p=p)]
        q = 0
        if el == "N" and rng.random() < charge_prob:
            q = 1
        elif el == "O" and rng.random() < charge_prob:
            q = -1
        vals = allowed_valences(el, q)
        # prefer the lowest valence for S and P, as in most organic molecules
        v = vals[0] if rng.random() < 0.85 else vals[int(rng.integers(len(vals)))]
        atoms.append((el, q))
        cap.append(v)

    load = [0] * n
    bonds: dict[tuple[int, int], int] = {}
    placed = 1
    for i in range(1, n):
        # the newcomer needs one bond; its parent must have spare valence
        open_ = [j for j in range(placed) if load[j] < cap[j]]
        if not open_ or cap[i] < 1:
            break
        j = open_[int(rng.integers(len(open_)))]
        bonds[(j, i)] = 1
        load[i] += 1
        load[j] += 1
        placed += 1
    atoms, cap, load = atoms[:placed], cap[:placed], load[:placed]

    for _ in range(int(rng.poisson(ring_rate))):
        open_ = [j for j in range(placed) if load[j] < cap[j]]
        if len(open_) < 2:
            break
        a, b = sorted(rng.choice(open_, size=2, replace=False).tolist())
        if (a, b) in bonds:
            continue
        bonds[(a, b)] = 1
        load[a] += 1
        load[b] += 1

    for key in sorted(bonds):
        if rng.random() >= upgrade_prob:
            continue
        a, b = key
        spare = min(cap[a] - load[a], cap[b] - load[b])
        if spare <= 0:
            continue
        extra = 1 if spare == 1 or rng.random() < 0.8 else 2
        bonds[key] += extra
        load[a] += extra
        load[b] += extra

    return with_filled_hydrogens(atoms, ((a, b, o) for (a, b), o in bonds.items()))


def random_corpus(
    n: int,
    seed: int,
    vocab: Vocabulary | None = None,
    unique: bool = True,
    **kwargs,
) -> list[MolecularGraph]:
    """``n`` random molecules; with ``vocab`` only those it can spell are kept."""
    rng = np.random.default_rng(seed)
    out: list[MolecularGraph] = []
    seen: set[str] = set()
    while len(out) < n:
        g = random_molecule(rng, **kwargs)
        if vocab is not None:
            try:
                encode(g, vocab)
            except (KeyError, ValueError):
                continue
        if unique:
            h = canonical_hash(g)
            if h in seen:
                continue
            seen.add(h)
        out.append(g)
    return out
