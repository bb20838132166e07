"""Modified SELFIES: factorised tokens, vocabulary, encoder and robust decoder.

Grammar
-------
* atom tokens ``[<bond><isotope><El><chirality><H n><charge>]`` with bond prefix
  ``=``/``#``; only the bond prefix, element, explicit H and charge matter when
  decoding.
* ``[Ring q]`` / ``[Branch q]`` (q in 1..3, optional ``=``/``#`` prefix) are followed
  by exactly ``q`` hexadecimal digit tokens ``[0]``..``[F]`` giving an index N.
  A ring closes a bond from the current atom to the atom N positions earlier in
  creation order; a branch spans the next N + 1 tokens.
* ``[BOS]``, ``[EOS]``, ``[PAD]`` are control symbols.

``[C]`` and ``[F]`` are both atoms and hex digits. Their role is positional: a
token in a digit slot after a ring/branch control is read as a digit, anywhere
else as an atom. Vocabularies keep separate ids for the two roles.
"""

from __future__ import annotations

import enum
import re
from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

from .molgraph import (
    VALENCE_TABLE,
    Atom,
    MolecularGraph,
    canonical_ranks,
    fill_hydrogens,
    max_valence,
)

BOS, EOS, PAD = "[BOS]", "[EOS]", "[PAD]"
SPECIALS = (BOS, EOS, PAD)
HEX_CHARS = "0123456789ABCDEF"
HEX_TEXTS = tuple(f"[{c}]" for c in HEX_CHARS)
_HEX_VALUE = {t: i for i, t in enumerate(HEX_TEXTS)}

DEFAULT_TAU = 100

_ATOM_RE = re.compile(
    r"^\[(?P<bond>[=#]?)(?P<iso>\d+)?(?P<el>[A-Z][a-z]?)(?P<chi>@@?)?(?:H(?P<h>\d*))?(?P<chg>[+-]\d*)?\]$"
)
_CTRL_RE = re.compile(r"^\[(?P<bond>[=#]?)(?P<kind>Ring|Branch)(?P<q>\d+)\]$")
_SPLIT_RE = re.compile(r"\[[^\[\]]*\]")


class Part(enum.IntEnum):
    ATOM = 0
    RING = 1
    BRANCH = 2
    HEX = 3
    SPECIAL = 4


class BondPrefix(enum.IntEnum):
    NONE = 0
    DOUBLE = 1
    TRIPLE = 2

    @property
    def order(self) -> int:
        return int(self) + 1


_PREFIX = {"": BondPrefix.NONE, "=": BondPrefix.DOUBLE, "#": BondPrefix.TRIPLE}
_PREFIX_TEXT = {1: "", 2: "=", 3: "#"}


@dataclass(frozen=True)
class TokenFactor:
    """Compositional view of a token: part, element, bond prefix, ring/branch order, hex digit."""

    part: Part
    element: str | None = None
    bond_prefix: BondPrefix = BondPrefix.NONE
    rb_order: int | None = None
    hex_digit: int | None = None

    def __post_init__(self):
        p = self.part
        if p is Part.ATOM and (self.element is None or self.rb_order is not None or self.hex_digit is not None):
            raise ValueError("atom factor needs an element and no ring/branch order or digit")
        if p in (Part.RING, Part.BRANCH) and (self.rb_order is None or self.element is not None or self.hex_digit is not None):
            raise ValueError("ring/branch factor needs an order and no element or digit")
        if p is Part.HEX and (
            self.hex_digit is None or not 0 <= self.hex_digit < 16 or self.element is not None or self.rb_order is not None
        ):
            raise ValueError("hex factor needs a digit in 0..15 and nothing else")
        if self.bond_prefix is not BondPrefix.NONE and p not in (Part.ATOM, Part.RING, Part.BRANCH):
            raise ValueError(f"bond prefix not allowed on {p.name} tokens")


@dataclass(frozen=True)
class AtomSpec:
    element: str
    charge: int = 0
    explicit_h: int = 0


def _parse(text: str, elements: Mapping[str, object] = VALENCE_TABLE) -> tuple[TokenFactor, AtomSpec | None]:
    if not isinstance(text, str) or len(text) < 3 or text[0] != "[" or text[-1] != "]" or "[" in text[1:-1] or "]" in text[1:-1]:
        raise ValueError(f"malformed token {text!r}")
    if text in SPECIALS:
        return TokenFactor(Part.SPECIAL), None
    m = _CTRL_RE.match(text)
    if m:
        q = int(m.group("q"))
        if not 1 <= q <= 3:
            raise ValueError(f"ring/branch order out of range in {text!r}")
        part = Part.RING if m.group("kind") == "Ring" else Part.BRANCH
        return TokenFactor(part, bond_prefix=_PREFIX[m.group("bond")], rb_order=q), None
    inner = text[1:-1]
    if len(inner) == 1 and inner in HEX_CHARS and inner not in elements:
        return TokenFactor(Part.HEX, hex_digit=HEX_CHARS.index(inner)), None
    m = _ATOM_RE.match(text)
    if m is None:
        if len(inner) == 1 and inner.isalnum():
            raise ValueError(f"hex digit out of range in {text!r}")
        raise ValueError(f"malformed token {text!r}")
    el = m.group("el")
    if el not in elements:
        raise ValueError(f"unknown element {el!r} in {text!r}")
    h = m.group("h")
    explicit_h = 0 if h is None else (int(h) if h else 1)
    chg = m.group("chg")
    charge = 0
    if chg:
        sign = 1 if chg[0] == "+" else -1
        charge = sign * (int(chg[1:]) if len(chg) > 1 else 1)
    factor = TokenFactor(Part.ATOM, element=el, bond_prefix=_PREFIX[m.group("bond")])
    return factor, AtomSpec(el, charge, explicit_h)


def parse_token(text: str) -> TokenFactor:
    """Parse a bracketed token into its factor tuple. Raises ``ValueError`` on bad input."""
    return _parse(text)[0]


def canonicalize_token(text: str) -> str:
    """Strip isotope, chirality, explicit H and charge; keep bond prefix and element."""
    factor = parse_token(text)
    if factor.part is Part.ATOM:
        return f"[{_PREFIX_TEXT[factor.bond_prefix.order]}{factor.element}]"
    return text


@lru_cache(maxsize=4096)
def _info(text: str):
    return _parse(text)


class Token(NamedTuple):
    text: str
    id: int


class Vocabulary:
    """Ordered token inventory with factors, canonical classes and corpus counts.

    Texts may repeat exactly when a symbol is both an atom and a hex digit
    (``[C]``, ``[F]``): the first occurrence is the atom, the second the digit.
    """

    def __init__(self, texts: Sequence[str], counts: Mapping[tuple[Part, str], int] | None = None, require_specials: bool = True):
        texts = tuple(texts)
        factors: list[TokenFactor] = []
        specs: list[AtomSpec | None] = []
        first_id: dict[str, int] = {}
        hex_ids: dict[int, int] = {}
        for i, text in enumerate(texts):
            if text in first_id:
                inner = text[1:-1]
                if len(inner) != 1 or inner not in HEX_CHARS or factors[first_id[text]].part is not Part.ATOM:
                    raise ValueError(f"duplicate token {text!r} in vocabulary")
                factor, spec = TokenFactor(Part.HEX, hex_digit=HEX_CHARS.index(inner)), None
            else:
                factor, spec = _parse(text)
                first_id[text] = i
            if factor.part is Part.HEX:
                if factor.hex_digit in hex_ids:
                    raise ValueError(f"hex digit {text} listed twice")
                hex_ids[factor.hex_digit] = i
            factors.append(factor)
            specs.append(spec)
        if require_specials:
            missing = [s for s in SPECIALS if s not in first_id]
            if missing:
                raise ValueError(f"vocabulary lacks special tokens {missing}")
        self.texts = texts
        self.factors = tuple(factors)
        self.atom_specs = tuple(specs)
        self._first = first_id
        self._hex_ids = hex_ids
        keys = [(f.part, canonicalize_token(t) if f.part is not Part.HEX else t) for t, f in zip(texts, factors)]
        self.canonical_keys = tuple(dict.fromkeys(keys))
        index = {k: i for i, k in enumerate(self.canonical_keys)}
        self.canonical_index = tuple(index[k] for k in keys)
        counts = dict(counts or {})
        self.class_counts = tuple(int(counts.get(k, 0)) for k in self.canonical_keys)
        if any(c < 0 for c in self.class_counts):
            raise ValueError("corpus counts must be non-negative")

    # -- construction helpers

    @classmethod
    def default(cls) -> Vocabulary:
        return cls(DEFAULT_TOKENS)

    @classmethod
    def full(cls, elements: Iterable[str] = ("C", "N", "O", "S", "P", "F", "Cl", "Br", "I"), charges: Iterable[int] = (0, 1, -1)) -> Vocabulary:
        """Every atom/prefix/charge combination plus all ring and branch controls."""
        texts = list(SPECIALS)
        for el in elements:
            for q in charges:
                for prefix in ("", "=", "#"):
                    texts.append(_atom_text(el, q, prefix))
        for kind in ("Ring", "Branch"):
            for q in (1, 2, 3):
                for prefix in ("", "=", "#"):
                    texts.append(f"[{prefix}{kind}{q}]")
        texts += HEX_TEXTS
        return cls(texts)

    def with_counts(self, counts: Mapping[tuple[Part, str], int]) -> Vocabulary:
        return Vocabulary(self.texts, counts, require_specials=False)

    # -- lookup

    def __len__(self) -> int:
        return len(self.texts)

    def __iter__(self):
        return (Token(t, i) for i, t in enumerate(self.texts))

    def __contains__(self, text: str) -> bool:
        return text in self._first

    def id_of(self, text: str, digit_slot: bool = False) -> int:
        if digit_slot and text in _HEX_VALUE and _HEX_VALUE[text] in self._hex_ids:
            return self._hex_ids[_HEX_VALUE[text]]
        try:
            return self._first[text]
        except KeyError:
            raise KeyError(f"token {text!r} is not in the vocabulary") from None

    def hex_id(self, digit: int) -> int:
        return self._hex_ids[digit]

    @property
    def bos(self) -> int:
        return self._first[BOS]

    @property
    def eos(self) -> int:
        return self._first[EOS]

    @property
    def pad(self) -> int:
        return self._first[PAD]

    def count(self, text: str) -> int:
        """Corpus count of the canonical class of ``text`` (atom role for ``[C]``/``[F]``)."""
        return self.class_counts[self.canonical_index[self.id_of(text)]]

    def ids(self, texts: Sequence[str]) -> list[int]:
        """Map token texts to ids, resolving digit slots after ring/branch controls."""
        out = []
        pending = 0
        for text in texts:
            if pending and text in _HEX_VALUE:
                out.append(self.id_of(text, digit_slot=True))
                pending -= 1
                continue
            i = self.id_of(text)
            f = self.factors[i]
            pending = f.rb_order if f.part in (Part.RING, Part.BRANCH) else 0
            out.append(i)
        return out

    def tokenize(self, sequence: str) -> list[int]:
        return self.ids(split_tokens(sequence))

    def detokenize(self, ids: Iterable[int]) -> str:
        return "".join(self.texts[i] for i in ids)

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256("\n".join(self.texts).encode()).hexdigest()[:16]

    # -- files

    def dumps(self) -> str:
        lines = []
        for i, text in enumerate(self.texts):
            c = self.class_counts[self.canonical_index[i]]
            lines.append(f"{text}\t{c}" if c else text)
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, data: str) -> Vocabulary:
        texts: list[str] = []
        raw_counts: list[int | None] = []
        for lineno, line in enumerate(data.splitlines(), 1):
            if not line.strip():
                continue
            text, _, cnt = line.partition("\t")
            texts.append(text.strip())
            try:
                raw_counts.append(int(cnt) if cnt.strip() else None)
            except ValueError:
                raise ValueError(f"bad count on vocabulary line {lineno}: {cnt!r}") from None
        vocab = cls(texts)
        counts: dict[tuple[Part, str], int] = {}
        for i, c in enumerate(raw_counts):
            if c is not None:
                key = vocab.canonical_keys[vocab.canonical_index[i]]
                counts[key] = max(counts.get(key, 0), c)
        return vocab.with_counts(counts) if counts else vocab


DEFAULT_TOKENS: tuple[str, ...] = (
    BOS, EOS, PAD,
    "[C]", "[=C]", "[#C]", "[N]", "[=N]", "[#N]", "[O]", "[=O]", "[S]", "[=S]", "[P]",
    "[F]", "[Cl]", "[Br]", "[I]", "[NH1]", "[N+1]", "[O-1]",
    "[Ring1]", "[=Ring1]", "[Ring2]",
    "[Branch1]", "[=Branch1]", "[#Branch1]", "[Branch2]",
) + HEX_TEXTS


def split_tokens(sequence: str) -> list[str]:
    parts = _SPLIT_RE.findall(sequence)
    if "".join(parts) != sequence:
        raise ValueError(f"not a concatenation of bracketed tokens: {sequence!r}")
    return parts


def _atom_text(element: str, charge: int, prefix: str = "") -> str:
    chg = "" if charge == 0 else f"{'+' if charge > 0 else '-'}{abs(charge)}"
    return f"[{prefix}{element}{chg}]"


def _hex_digits(n: int) -> list[str]:
    if n < 0:
        raise ValueError("index must be non-negative")
    digits = []
    while True:
        digits.append(HEX_TEXTS[n % 16])
        n //= 16
        if n == 0:
            break
    if len(digits) > 3:
        raise ValueError("index needs more than three hex digits")
    return digits[::-1]


# --------------------------------------------------------------------------- encoding


def encode(graph: MolecularGraph, vocab: Vocabulary | None = None, root: int | None = None) -> list[str]:
    """Deterministic token texts for a connected graph.

    DFS from the canonical rank-0 atom (or ``root``), neighbours visited in
    canonical order; at each atom the smaller subtrees open branches and the
    largest continues the chain. With ``vocab`` every token must be in it.
    """
    n = graph.num_atoms
    if n == 0:
        return []
    if not graph.is_connected():
        raise ValueError("graph is disconnected")
    for i, atom in enumerate(graph.atoms):
        if atom.element not in VALENCE_TABLE or atom.element == "H":
            raise ValueError(f"atom {i}: element {atom.element!r} cannot be encoded")
        if atom.implicit_h != fill_hydrogens(atom.element, atom.charge, graph.bond_order_sums[i]):
            raise ValueError(f"atom {i}: implicit hydrogens do not match the valence model")
    ranks = canonical_ranks(graph)
    if root is None:
        root = min(range(n), key=ranks.__getitem__)
    elif not 0 <= root < n:
        raise ValueError("root out of range")
    adj = graph.adjacency
    order_of = {(min(a, b), max(a, b)): o for a, b, o in graph.bonds}

    children: dict[int, list[int]] = defaultdict(list)
    parent = {root: -1}
    tree = set()
    stack = [(root, iter(sorted(adj[root], key=lambda x: ranks[x[0]])))]
    while stack:
        u, it = stack[-1]
        for v, _ in it:
            if v not in parent:
                parent[v] = u
                children[u].append(v)
                tree.add((min(u, v), max(u, v)))
                stack.append((v, iter(sorted(adj[v], key=lambda x: ranks[x[0]]))))
                break
        else:
            stack.pop()

    size: dict[int, int] = {}

    def subtree(u: int) -> int:
        size[u] = 1 + sum(subtree(c) for c in children[u])
        return size[u]

    subtree(root)
    for u in children:
        children[u].sort(key=lambda c: (size[c], ranks[c]))

    pos: dict[int, int] = {}
    walk = [root]
    while walk:
        u = walk.pop()
        pos[u] = len(pos)
        walk.extend(reversed(children[u]))

    rings: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for a, b, o in graph.bonds:
        if (a, b) in tree:
            continue
        late, early = (a, b) if pos[a] > pos[b] else (b, a)
        rings[late].append((pos[early], o))

    def emit(u: int, bond: int) -> list[str]:
        atom = graph.atoms[u]
        out = [_atom_text(atom.element, atom.charge, _PREFIX_TEXT[bond])]
        for early, o in sorted(rings[u]):
            digits = _hex_digits(pos[u] - early)
            out.append(f"[{_PREFIX_TEXT[o]}Ring{len(digits)}]")
            out += digits
        kids = children[u]
        for c in kids[:-1]:
            sub = emit(c, order_of[(min(u, c), max(u, c))])
            digits = _hex_digits(len(sub) - 1)
            out.append(f"[Branch{len(digits)}]")
            out += digits
            out += sub
        if kids:
            c = kids[-1]
            out += emit(c, order_of[(min(u, c), max(u, c))])
        return out

    tokens = emit(root, 1)
    if vocab is not None:
        vocab.ids(tokens)
    return tokens


# --------------------------------------------------------------------------- decoding


def decode(tokens: Sequence[str] | Sequence[int], vocab: Vocabulary | None = None) -> MolecularGraph:
    """Derive a valid graph from any in-vocabulary token sequence.

    Bond orders are capped by remaining valence, atoms that cannot bond are
    skipped, impossible ring closures and controls lacking their digits are
    dropped, branch spans are truncated at the end, and decoding stops at EOS.
    """
    if tokens and not isinstance(tokens[0], str):
        if vocab is None:
            raise ValueError("token ids need a vocabulary")
        texts = [vocab.texts[i] for i in tokens]
    else:
        texts = list(tokens)
        if vocab is not None:
            for t in texts:
                if t not in vocab:
                    raise KeyError(f"token {t!r} is not in the vocabulary")
    if EOS in texts:
        texts = texts[: texts.index(EOS)]

    elements: list[str] = []
    charges: list[int] = []
    extra_h: list[int] = []
    cap: list[int] = []
    load: list[int] = []
    bonds: dict[tuple[int, int], int] = {}

    def read_index(start: int, q: int, end: int) -> int | None:
        if start + q > end:
            return None
        value = 0
        for k in range(start, start + q):
            d = _HEX_VALUE.get(texts[k])
            if d is None:
                return None
            value = value * 16 + d
        return value

    def add_bond(a: int, b: int, order: int) -> None:
        bonds[(min(a, b), max(a, b))] = order
        load[a] += order
        load[b] += order

    def chain(i: int, end: int, prev: int | None, branch_bond: int) -> None:
        while i < end:
            factor, spec = _info(texts[i])
            part = factor.part
            if part is Part.ATOM:
                i += 1
                atom_cap = max(max_valence(spec.element, spec.charge) - spec.explicit_h, 0)
                if prev is None:
                    if elements:
                        continue
                    order = 0
                else:
                    want = max(factor.bond_prefix.order, branch_bond)
                    order = min(want, cap[prev] - load[prev], atom_cap)
                    if order <= 0:
                        continue
                elements.append(spec.element)
                charges.append(spec.charge)
                extra_h.append(spec.explicit_h)
                cap.append(atom_cap)
                load.append(0)
                new = len(elements) - 1
                if prev is not None:
                    add_bond(prev, new, order)
                prev = new
                branch_bond = 0
            elif part is Part.RING or part is Part.BRANCH:
                q = factor.rb_order
                n = read_index(i + 1, q, end)
                if n is None:
                    i += 1
                    continue
                body = i + 1 + q
                if part is Part.RING:
                    i = body
                    if prev is None:
                        continue
                    target = prev - n
                    if n == 0 or target < 0 or (min(prev, target), max(prev, target)) in bonds:
                        continue
                    order = min(factor.bond_prefix.order, cap[prev] - load[prev], cap[target] - load[target])
                    if order > 0:
                        add_bond(prev, target, order)
                else:
                    if prev is None:
                        i = body
                        continue
                    span_end = min(body + n + 1, end)
                    chain(body, span_end, prev, factor.bond_prefix.order if factor.bond_prefix else 0)
                    i = span_end
            else:
                i += 1

    chain(0, len(texts), None, 0)
    atoms = tuple(
        Atom(el, max(fill_hydrogens(el, q, load[k]), extra_h[k]), q)
        for k, (el, q) in enumerate(zip(elements, charges))
    )
    return MolecularGraph(atoms, tuple((a, b, o) for (a, b), o in bonds.items()))


def corpus_counts(sequences: Iterable[Sequence[str] | str], vocab: Vocabulary) -> Vocabulary:
    """Count canonical token classes over a corpus; returns a vocabulary carrying the counts."""
    counts: Counter = Counter()
    for seq in sequences:
        ids = vocab.tokenize(seq) if isinstance(seq, str) else vocab.ids(seq)
        for i in ids:
            counts[vocab.canonical_keys[vocab.canonical_index[i]]] += 1
    return vocab.with_counts(counts)
