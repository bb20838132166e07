"""Rule-aware constrained beam search over any next-token scoring model."""

from __future__ import annotations

import weakref
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .molgraph import Fingerprint, Formula, MolecularGraph, ProbFingerprint, canonical_hash, formula_of
from .selfies import Part, Vocabulary, decode

NEG_INF = -np.inf


class ScoringModel(Protocol):
    vocab: Vocabulary

    def score_batch(self, condition: Fingerprint, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """Next-token logits, one row per prefix; prefixes share one length."""
        ...


@dataclass(frozen=True, eq=False)
class _MaskTables:
    is_hex: np.ndarray
    atoms_of: dict[str, np.ndarray]
    rb_order: np.ndarray
    eos: int
    always_off: np.ndarray


_TABLES: "weakref.WeakKeyDictionary[Vocabulary, _MaskTables]" = weakref.WeakKeyDictionary()


def _tables(vocab: Vocabulary) -> _MaskTables:
    cached = _TABLES.get(vocab)
    if cached is not None:
        return cached
    is_hex = np.array([f.part is Part.HEX for f in vocab.factors])
    groups: dict[str, list[int]] = {}
    for i, f in enumerate(vocab.factors):
        if f.part is Part.ATOM:
            groups.setdefault(f.element, []).append(i)
    rb = np.array([f.rb_order if f.part in (Part.RING, Part.BRANCH) else 0 for f in vocab.factors])
    t = _MaskTables(
        is_hex=is_hex,
        atoms_of={el: np.array(ids) for el, ids in groups.items()},
        rb_order=rb,
        eos=vocab.eos,
        # BOS and PAD are never generated
        always_off=np.array([vocab.bos, vocab.pad]),
    )
    _TABLES[vocab] = t
    return t


@dataclass(frozen=True)
class ConstraintState:
    """Decoding progress relevant to the masks. ``target_formula=None`` disables element masks."""

    target_formula: Formula | None
    counts: Formula = field(default_factory=Formula)
    pending_hex: int = 0
    position: int = 0
    cap_counts: bool = True
    # the decoder opens a branch body only once an atom exists
    started: bool = False
    # exclusive end positions of open branch bodies, innermost last
    span_ends: tuple[int, ...] = ()
    digits: int = 0
    opening_branch: bool = False

    def __post_init__(self):
        if self.pending_hex < 0:
            raise ValueError("pending_hex must be non-negative")

    @classmethod
    def start(cls, formula: Formula | str | None, cap_counts: bool = True) -> ConstraintState:
        if isinstance(formula, str):
            formula = Formula.parse(formula)
        return cls(formula.heavy() if formula is not None else None, cap_counts=cap_counts)

    def element_allowed(self, element: str) -> bool:
        if self.target_formula is None:
            return True
        limit = self.target_formula.get(element, 0)
        if limit == 0:
            return False
        return not self.cap_counts or self.counts.get(element, 0) < limit


def legal_mask(state: ConstraintState, vocab: Vocabulary) -> np.ndarray:
    """0 for allowed tokens, -inf for tokens the grammar or formula rules out."""
    t = _tables(vocab)
    mask = np.zeros(len(vocab))
    if state.pending_hex > 0:
        mask[~t.is_hex] = NEG_INF
        return mask
    mask[t.is_hex] = NEG_INF
    if state.span_ends:
        # digits running past the enclosing body would make the decoder drop the control
        mask[t.rb_order > state.span_ends[-1] - state.position - 1] = NEG_INF
    for el, ids in t.atoms_of.items():
        if not state.element_allowed(el):
            mask[ids] = NEG_INF
    return mask


def step_state(state: ConstraintState, emitted: int | str, vocab: Vocabulary, check: bool = True) -> ConstraintState:
    """Advance ``state`` by one token id (or text, resolved against the digit slot)."""
    if isinstance(emitted, str):
        emitted = vocab.id_of(emitted, digit_slot=state.pending_hex > 0)
    if check and legal_mask(state, vocab)[emitted] == NEG_INF:
        raise ValueError(f"token {vocab.texts[emitted]!r} is illegal at position {state.position}")
    f = vocab.factors[emitted]
    counts, pending, started = state.counts, state.pending_hex, state.started
    digits, opening, ends = state.digits, state.opening_branch, state.span_ends
    pos = state.position + 1
    if f.part is Part.HEX and pending > 0:
        pending -= 1
        digits = digits * 16 + f.hex_digit
        if pending == 0 and opening:
            ends = ends + (min(pos + digits + 1, ends[-1]) if ends else pos + digits + 1,)
            opening = False
    else:
        pending = f.rb_order if f.part in (Part.RING, Part.BRANCH) else 0
        digits = 0
        opening = f.part is Part.BRANCH and started
        if f.part is Part.ATOM:
            counts = Formula({**counts, f.element: counts.get(f.element, 0) + 1})
            started = True
    while ends and ends[-1] <= pos:
        ends = ends[:-1]
    return ConstraintState(state.target_formula, counts, pending, pos, state.cap_counts, started, ends, digits, opening)


def binarize(pf: ProbFingerprint | Sequence[float], threshold: float = 0.2) -> Fingerprint:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    probs = pf.probs if isinstance(pf, ProbFingerprint) else np.asarray(pf, dtype=float)
    return Fingerprint.from_array(probs >= threshold)


@dataclass(frozen=True, eq=False)
class Candidate:
    tokens: tuple[str, ...]
    ids: tuple[int, ...]
    log_prob: float
    graph: MolecularGraph
    hash: str
    formula: Formula
    forced: bool = False
    formula_distance: int | None = None

    def to_json(self) -> dict:
        out = {"tokens": "".join(self.tokens), "log_prob": self.log_prob, "formula": self.formula.to_hill()}
        if self.forced:
            out["forced"] = True
        if self.formula_distance is not None:
            out["formula_distance"] = self.formula_distance
        return out


def make_candidate(vocab: Vocabulary, ids: Sequence[int], log_prob: float, forced: bool = False) -> Candidate:
    ids = tuple(int(i) for i in ids)
    graph = decode(ids, vocab)
    return Candidate(
        tokens=tuple(vocab.texts[i] for i in ids),
        ids=ids,
        log_prob=float(log_prob),
        graph=graph,
        hash=canonical_hash(graph),
        formula=formula_of(graph),
        forced=forced,
    )


def candidate_from_json(obj: dict) -> Candidate:
    """Rebuild a candidate from its serialised tokens; the graph is decoded afresh."""
    from .selfies import split_tokens

    texts = tuple(split_tokens(obj["tokens"]))
    graph = decode(texts)
    return Candidate(
        tokens=texts,
        ids=(),
        log_prob=float(obj["log_prob"]),
        graph=graph,
        hash=canonical_hash(graph),
        formula=formula_of(graph),
        forced=bool(obj.get("forced", False)),
    )


def _log_softmax(z: np.ndarray) -> np.ndarray:
    top = z.max(axis=-1, keepdims=True)
    return z - top - np.log(np.exp(z - top).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class _Beam:
    ids: tuple[int, ...]
    score: float
    state: ConstraintState
    done: bool = False
    forced: bool = False


def _masked_logprobs(model: ScoringModel, condition, beams: list[_Beam], masks_on: bool, remaining: int) -> np.ndarray:
    vocab = model.vocab
    t = _tables(vocab)
    z = np.array(model.score_batch(condition, [b.ids for b in beams]), dtype=float)
    if z.shape != (len(beams), len(vocab)):
        raise ValueError(f"scoring model returned shape {z.shape}, expected {(len(beams), len(vocab))}")
    z[:, t.always_off] = NEG_INF
    if masks_on:
        # a control token whose digits cannot fit before max_len would dangle
        too_long = t.rb_order > remaining - 1
        for r, b in enumerate(beams):
            z[r] += legal_mask(b.state, vocab)
            if b.state.pending_hex == 0:
                z[r, too_long] = NEG_INF
    return _log_softmax(z)


def beam_search(
    model: ScoringModel,
    condition: Fingerprint,
    formula: Formula | str | None,
    width: int = 100,
    max_len: int = 64,
    n_candidates: int | None = None,
    masks_on: bool = True,
    cap_counts: bool = True,
) -> list[Candidate]:
    """Length-synchronous beam search; finished hypotheses keep their beam slot.

    Returns up to ``n_candidates`` distinct molecules, best log-probability first.
    Equal scores are broken by the lower token id, then the earlier parent beam.
    """
    vocab = model.vocab
    if len(vocab) == 0:
        raise ValueError("empty vocabulary")
    if width < 1:
        raise ValueError("beam width must be at least 1")
    n_candidates = width if n_candidates is None else n_candidates
    if not 1 <= n_candidates <= width:
        raise ValueError("need 1 <= n_candidates <= width")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    eos = vocab.eos

    beams = [_Beam((), 0.0, ConstraintState.start(formula, cap_counts))]
    for step in range(max_len):
        active = [b for b in beams if not b.done]
        if not active:
            break
        finished = [b for b in beams if b.done]
        logp = _masked_logprobs(model, condition, active, masks_on, max_len - step)
        total = np.array([b.score for b in active])[:, None] + logp
        par, tok = np.nonzero(np.isfinite(total))
        scores = np.concatenate([[b.score for b in finished], total[par, tok]])
        toks = np.concatenate([np.full(len(finished), -1), tok])
        pars = np.concatenate([np.arange(len(finished)), par])
        order = np.lexsort((pars, toks, -scores))[:width]
        nxt: list[_Beam] = []
        for k in order:
            if toks[k] < 0:
                nxt.append(finished[pars[k]])
                continue
            parent = active[pars[k]]
            v = int(toks[k])
            if v == eos:
                nxt.append(_Beam(parent.ids, float(scores[k]), parent.state, done=True))
            else:
                state = step_state(parent.state, v, vocab, check=False)
                nxt.append(_Beam(parent.ids + (v,), float(scores[k]), state))
        beams = nxt
    beams = [b if b.done else _Beam(b.ids, b.score, b.state, done=True, forced=True) for b in beams]
    beams.sort(key=lambda b: -b.score)

    out: list[Candidate] = []
    seen: set[str] = set()
    for b in beams:
        cand = make_candidate(vocab, b.ids, b.score, b.forced)
        if cand.hash in seen:
            continue
        seen.add(cand.hash)
        out.append(cand)
        if len(out) == n_candidates:
            break
    return out


def greedy_decode(
    model: ScoringModel,
    condition: Fingerprint,
    formula: Formula | str | None,
    max_len: int = 64,
    masks_on: bool = True,
    cap_counts: bool = True,
) -> Candidate:
    """Arg-max decoding under the same masks; ties go to the lowest token id."""
    vocab = model.vocab
    beam = _Beam((), 0.0, ConstraintState.start(formula, cap_counts))
    for step in range(max_len):
        logp = _masked_logprobs(model, condition, [beam], masks_on, max_len - step)[0]
        v = int(np.argmax(logp))
        score = beam.score + float(logp[v])
        if v == vocab.eos:
            return make_candidate(vocab, beam.ids, score)
        beam = _Beam(beam.ids + (v,), score, step_state(beam.state, v, vocab, check=False))
    return make_candidate(vocab, beam.ids, beam.score, forced=True)


def constraint_violations(candidate: Candidate | Sequence[str], formula: Formula | str, vocab: Vocabulary | None = None) -> dict[str, int]:
    """Re-parse a token sequence and count out-of-formula atoms and stray or missing hex digits."""
    from .selfies import EOS, HEX_TEXTS, _info

    if isinstance(formula, str):
        formula = Formula.parse(formula)
    texts = candidate.tokens if isinstance(candidate, Candidate) else tuple(candidate)
    if EOS in texts:
        texts = texts[: texts.index(EOS)]
    heavy = formula.heavy()
    emitted: dict[str, int] = {}
    stray = dangling = 0

    # same walk as the decoder: a control whose digits are missing or cut off by
    # the enclosing branch body is dropped and the next token is read afresh
    def walk(i: int, end: int, started: bool) -> None:
        nonlocal stray, dangling
        while i < end:
            factor, _ = _info(texts[i])
            if factor.part in (Part.RING, Part.BRANCH):
                q = factor.rb_order
                body = i + 1 + q
                if body > end or any(t not in HEX_TEXTS for t in texts[i + 1 : body]):
                    dangling += 1
                    i += 1
                    continue
                if factor.part is Part.BRANCH and started:
                    n = 0
                    for t in texts[i + 1 : body]:
                        n = n * 16 + HEX_TEXTS.index(t)
                    span_end = min(body + n + 1, end)
                    walk(body, span_end, True)
                    i = span_end
                else:
                    i = body
            else:
                if factor.part is Part.HEX:
                    stray += 1
                elif factor.part is Part.ATOM:
                    emitted[factor.element] = emitted.get(factor.element, 0) + 1
                    started = True
                i += 1

    walk(0, len(texts), False)
    over = sum(max(0, n - heavy.get(el, 0)) for el, n in emitted.items())
    foreign = sum(n for el, n in emitted.items() if el not in heavy)
    return {"foreign_element": foreign, "over_count": over, "stray_hex": stray, "dangling_hex": dangling}
