"""Auxiliary structural supervision on token factors.

Each position's token distribution is pushed forward onto four factors
(element, bond prefix, ring-control order, branch-control order) and scored
with cross-entropy against the target token's factor value.

Element and bond terms only count positions whose target actually carries
that factor; ring and branch classes exist for every token (class 0 means
"not a ring/branch control"), so those terms average over all positions.
"""

from __future__ import annotations

import weakref
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .molgraph import Formula
from .selfies import HEX_TEXTS, BondPrefix, Part, Vocabulary, _info

FACTORS = ("elem", "bond", "ring", "branch")
_SKIP_ABSENT = {"elem": True, "bond": True, "ring": False, "branch": False}
LOG_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class FactorTables:
    """Per-token category index for each factor; category 0 of elem/bond is 'absent'."""

    labels: dict[str, tuple]
    category: dict[str, np.ndarray]

    def pushforward(self, name: str) -> np.ndarray:
        cat = self.category[name]
        out = np.zeros((cat.size, len(self.labels[name])))
        out[np.arange(cat.size), cat] = 1.0
        return out


_TABLES: "weakref.WeakKeyDictionary[Vocabulary, FactorTables]" = weakref.WeakKeyDictionary()


def factor_tables(vocab: Vocabulary) -> FactorTables:
    cached = _TABLES.get(vocab)
    if cached is not None:
        return cached
    elements = sorted({f.element for f in vocab.factors if f.part is Part.ATOM})
    elem_index = {el: i + 1 for i, el in enumerate(elements)}
    elem = np.zeros(len(vocab), dtype=np.int64)
    bond = np.zeros(len(vocab), dtype=np.int64)
    ring = np.zeros(len(vocab), dtype=np.int64)
    branch = np.zeros(len(vocab), dtype=np.int64)
    for i, f in enumerate(vocab.factors):
        if f.part is Part.ATOM:
            elem[i] = elem_index[f.element]
        if f.part in (Part.ATOM, Part.RING, Part.BRANCH):
            bond[i] = 1 + int(f.bond_prefix)
        if f.part is Part.RING:
            ring[i] = f.rb_order
        elif f.part is Part.BRANCH:
            branch[i] = f.rb_order
    tables = FactorTables(
        labels={
            "elem": ("-", *elements),
            "bond": ("-", *(b.name for b in BondPrefix)),
            "ring": (0, 1, 2, 3),
            "branch": (0, 1, 2, 3),
        },
        category={"elem": elem, "bond": bond, "ring": ring, "branch": branch},
    )
    _TABLES[vocab] = tables
    return tables


@dataclass(frozen=True, eq=False)
class FactorMarginals:
    elem: np.ndarray
    bond: np.ndarray
    ring: np.ndarray
    branch: np.ndarray
    labels: dict[str, tuple] = field(repr=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def as_dict(self, name: str, position: int = 0) -> dict:
        return dict(zip(self.labels[name], getattr(self, name)[position].tolist()))


def factor_marginals(token_probs, vocab: Vocabulary, atol: float = 1e-6) -> FactorMarginals:
    """Sum token probabilities sharing a factor value, per position."""
    probs = np.atleast_2d(np.asarray(token_probs, dtype=float))
    if probs.shape[-1] != len(vocab):
        raise ValueError("distribution width does not match the vocabulary")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > atol):
        raise ValueError("token distributions must be normalised")
    tables = factor_tables(vocab)
    parts = {name: probs @ tables.pushforward(name) for name in FACTORS}
    return FactorMarginals(**parts, labels=tables.labels)


@dataclass(frozen=True)
class StructuralCounts:
    elements: Formula
    double: int = 0
    triple: int = 0
    ring: int = 0
    branch: int = 0

    @property
    def multiple_bonds(self) -> int:
        return self.double + self.triple


def structural_counts(tokens: Sequence[str] | str) -> StructuralCounts:
    """Token-level counts; digit slots after ring/branch controls are not atoms."""
    from .selfies import split_tokens

    texts = split_tokens(tokens) if isinstance(tokens, str) else list(tokens)
    elements: Counter = Counter()
    double = triple = ring = branch = 0
    pending = 0
    for text in texts:
        if pending and text in HEX_TEXTS:
            pending -= 1
            continue
        factor, _ = _info(text)
        pending = 0
        if factor.part is Part.ATOM:
            elements[factor.element] += 1
        elif factor.part is Part.RING:
            ring += 1
            pending = factor.rb_order
        elif factor.part is Part.BRANCH:
            branch += 1
            pending = factor.rb_order
        if factor.bond_prefix is BondPrefix.DOUBLE:
            double += 1
        elif factor.bond_prefix is BondPrefix.TRIPLE:
            triple += 1
    return StructuralCounts(Formula(elements), double, triple, ring, branch)


@dataclass(frozen=True)
class LossWeights:
    lambda_sent: float = 0.1
    w_elem: float = 1.0
    w_bond: float = 1.0
    w_ring: float = 1.0
    w_branch: float = 1.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative")

    def factor(self, name: str) -> float:
        return getattr(self, f"w_{name}")


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    elem: float
    bond: float
    ring: float
    branch: float
    total: float
    clamped: int = 0

    def as_dict(self) -> dict:
        return {"ce": self.ce, "elem": self.elem, "bond": self.bond, "ring": self.ring, "branch": self.branch, "total": self.total}


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shift = logits - logits.max(axis=-1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))


def _flatten(arr: np.ndarray, targets, valid):
    v = arr.shape[-1]
    arr = arr.reshape(-1, v)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.size != arr.shape[0]:
        raise ValueError("targets do not match the number of positions")
    valid = np.ones(targets.size, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(-1)
    return arr, targets, valid


def decoder_loss_from_logits(
    logits: np.ndarray,
    targets,
    vocab: Vocabulary,
    weights: LossWeights = LossWeights(),
    valid=None,
    grad: bool = True,
) -> tuple[LossBreakdown, np.ndarray | None]:
    """Token CE plus weighted factor CEs, with the gradient w.r.t. ``logits``.

    ``logits`` is ``(..., V)``; ``targets`` and ``valid`` share the leading shape.
    Each term is a mean over its contributing positions.
    """
    shape = logits.shape
    z, y, valid = _flatten(np.asarray(logits, dtype=float), targets, valid)
    logp = _log_softmax(z)
    p = np.exp(logp)
    rows = np.flatnonzero(valid)
    n = rows.size
    g = np.zeros_like(z) if grad else None
    if n == 0:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0.0), (g.reshape(shape) if grad else None)

    ce = float(-logp[rows, y[rows]].mean())
    if grad:
        g[rows] += p[rows] / n
        g[rows, y[rows]] -= 1.0 / n

    tables = factor_tables(vocab)
    terms: dict[str, float] = {}
    clamped = 0
    for name in FACTORS:
        cat = tables.category[name]
        tgt = cat[y[rows]]
        use = rows[tgt != 0] if _SKIP_ABSENT[name] else rows
        tgt = cat[y[use]]
        scale = weights.lambda_sent * weights.factor(name)
        if use.size == 0:
            terms[name] = 0.0
            continue
        member = cat[None, :] == tgt[:, None]
        masked = np.where(member, logp[use], -np.inf)
        top = masked.max(axis=1, keepdims=True)
        log_m = (top + np.log(np.exp(masked - top).sum(axis=1, keepdims=True)))[:, 0]
        low = log_m < np.log(LOG_FLOOR)
        clamped += int(low.sum())
        log_m = np.where(low, np.log(LOG_FLOOR), log_m)
        terms[name] = float(-log_m.mean())
        if grad and scale:
            m = np.exp(log_m)[:, None]
            gf = p[use] - p[use] * member / m
            gf[low] = 0.0
            np.add.at(g, use, scale * gf / use.size)

    total = ce + weights.lambda_sent * sum(weights.factor(k) * terms[k] for k in FACTORS)
    out = LossBreakdown(ce, terms["elem"], terms["bond"], terms["ring"], terms["branch"], total, clamped)
    return out, (g.reshape(shape) if grad else None)


def decoder_loss(
    token_probs,
    targets,
    vocab: Vocabulary,
    weights: LossWeights = LossWeights(),
    marginals: FactorMarginals | None = None,
    valid=None,
) -> LossBreakdown:
    """Loss from probabilities (no gradient). Zero-probability targets are floored at 1e-12."""
    probs = np.asarray(token_probs, dtype=float)
    p, y, valid = _flatten(probs, targets, valid)
    if marginals is None:
        marginals = factor_marginals(p, vocab)
    rows = np.flatnonzero(valid)
    if rows.size == 0:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    clamped = 0

    def nll(values: np.ndarray) -> float:
        nonlocal clamped
        clamped += int((values < LOG_FLOOR).sum())
        return float(-np.log(np.maximum(values, LOG_FLOOR)).mean())

    ce = nll(p[rows, y[rows]])
    tables = factor_tables(vocab)
    terms = {}
    for name in FACTORS:
        cat = tables.category[name]
        use = rows[cat[y[rows]] != 0] if _SKIP_ABSENT[name] else rows
        m = marginals[name].reshape(-1, len(tables.labels[name]))
        terms[name] = nll(m[use, cat[y[use]]]) if use.size else 0.0
    total = ce + weights.lambda_sent * sum(weights.factor(k) * terms[k] for k in FACTORS)
    return LossBreakdown(ce, terms["elem"], terms["bond"], terms["ring"], terms["branch"], total, clamped)
