"""Heavy-atom molecular graphs, formulas, Morgan fingerprints and canonical identity.

Graphs carry explicit heavy atoms only; hydrogens live as per-atom
``implicit_h`` counts. Everything here is immutable and side-effect free.
"""

from __future__ import annotations

import hashlib
import re
import struct
from collections import Counter
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

FP_BITS = 4096
FP_RADIUS = 2

# Allowed valences for neutral atoms. The largest entry is the maximum valence;
# implicit hydrogens fill up to the smallest allowed valence that fits the bonds.
VALENCE_TABLE: dict[str, tuple[int, ...]] = {
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "S": (2, 4, 6),
    "P": (3, 5),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
    "H": (1,),
}

# Elements whose valence grows with positive charge (N+ -> 4, O- -> 1).
_CHARGE_SHIFTED = frozenset({"N", "P", "O", "S"})

_PERIODIC = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
ATOMIC_NUMBER: dict[str, int] = {sym: i + 1 for i, sym in enumerate(_PERIODIC)}

_MASK64 = (1 << 64) - 1


def allowed_valences(element: str, charge: int = 0, table: Mapping[str, tuple[int, ...]] = VALENCE_TABLE) -> tuple[int, ...]:
    try:
        base = table[element]
    except KeyError:
        raise ValueError(f"no valence known for element {element!r}") from None
    if charge == 0:
        return base
    if element in _CHARGE_SHIFTED:
        shifted = {v + charge for v in base}
    else:
        shifted = {v - abs(charge) for v in base}
    return tuple(sorted(v for v in shifted if v >= 0)) or (0,)


def max_valence(element: str, charge: int = 0, table: Mapping[str, tuple[int, ...]] = VALENCE_TABLE) -> int:
    return max(allowed_valences(element, charge, table))


def fill_hydrogens(element: str, charge: int, bond_sum: int, table: Mapping[str, tuple[int, ...]] = VALENCE_TABLE) -> int:
    """Implicit hydrogens needed to reach the smallest allowed valence >= ``bond_sum``."""
    for v in allowed_valences(element, charge, table):
        if v >= bond_sum:
            return v - bond_sum
    return 0


@dataclass(frozen=True)
class Atom:
    element: str
    implicit_h: int = 0
    charge: int = 0

    @property
    def label(self) -> tuple[str, int, int]:
        return (self.element, self.charge, self.implicit_h)


@dataclass(frozen=True)
class MolecularGraph:
    """Undirected heavy-atom graph with bond orders in {1, 2, 3}.

    Bonds are stored as ``(a, b, order)`` with ``a < b``.
    """

    atoms: tuple[Atom, ...] = ()
    bonds: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        atoms = tuple(self.atoms)
        bonds = []
        seen = set()
        n = len(atoms)
        for a, b, order in self.bonds:
            a, b, order = int(a), int(b), int(order)
            if a == b:
                raise ValueError(f"self-bond on atom {a}")
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"bond ({a}, {b}) references a missing atom")
            if order not in (1, 2, 3):
                raise ValueError(f"bond order {order} not in {{1,2,3}}")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise ValueError(f"duplicate bond between atoms {key}")
            seen.add(key)
            bonds.append((*key, order))
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "bonds", tuple(bonds))
        load = self.bond_order_sums
        for i, atom in enumerate(atoms):
            if atom.implicit_h < 0:
                raise ValueError(f"atom {i} has negative implicit_h")
            if load[i] + atom.implicit_h > max_valence(atom.element, atom.charge):
                raise ValueError(
                    f"atom {i} ({atom.element}, charge {atom.charge}) exceeds its valence: "
                    f"bonds {load[i]} + H {atom.implicit_h}"
                )

    @cached_property
    def adjacency(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per atom, the ``(neighbor, order)`` pairs."""
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for a, b, order in self.bonds:
            adj[a].append((b, order))
            adj[b].append((a, order))
        return tuple(tuple(sorted(x)) for x in adj)

    @cached_property
    def bond_order_sums(self) -> tuple[int, ...]:
        load = [0] * len(self.atoms)
        for a, b, order in self.bonds:
            load[a] += order
            load[b] += order
        return tuple(load)

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    @property
    def num_bonds(self) -> int:
        return len(self.bonds)

    def is_connected(self) -> bool:
        if len(self.atoms) <= 1:
            return True
        seen = {0}
        stack = [0]
        while stack:
            for nb, _ in self.adjacency[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(self.atoms)

    def permute(self, order: Sequence[int]) -> MolecularGraph:
        """Return the graph with atom ``order[i]`` moved to index ``i``."""
        if sorted(order) != list(range(len(self.atoms))):
            raise ValueError("order must be a permutation of atom indices")
        where = {old: new for new, old in enumerate(order)}
        atoms = tuple(self.atoms[old] for old in order)
        bonds = tuple((where[a], where[b], o) for a, b, o in self.bonds)
        return MolecularGraph(atoms, bonds)

    def to_json(self) -> dict:
        return {
            "atoms": [{"el": a.element, "h": a.implicit_h, "q": a.charge} for a in self.atoms],
            "bonds": [list(b) for b in self.bonds],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> MolecularGraph:
        try:
            atoms = tuple(Atom(str(a["el"]), int(a.get("h", 0)), int(a.get("q", 0))) for a in obj["atoms"])
            bonds = tuple((int(a), int(b), int(o)) for a, b, o in obj.get("bonds", ()))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed molecule record: {exc}") from exc
        for atom in atoms:
            if atom.element not in ATOMIC_NUMBER:
                raise ValueError(f"unknown element {atom.element!r}")
        return cls(atoms, bonds)


def with_filled_hydrogens(atoms: Sequence[tuple[str, int]], bonds: Iterable[tuple[int, int, int]]) -> MolecularGraph:
    """Build a graph from ``(element, charge)`` atoms, filling implicit H by valence."""
    bonds = tuple(bonds)
    load = [0] * len(atoms)
    for a, b, o in bonds:
        load[a] += o
        load[b] += o
    full = tuple(Atom(el, fill_hydrogens(el, q, load[i]), q) for i, (el, q) in enumerate(atoms))
    return MolecularGraph(full, bonds)


# --------------------------------------------------------------------------- formulas

_HILL_TOKEN = re.compile(r"([A-Z][a-z]?)(\d*)")


class Formula(Mapping[str, int]):
    """Element -> count mapping; zero counts are dropped, hydrogens included."""

    __slots__ = ("_counts", "_hash")

    def __init__(self, counts: Mapping[str, int] | Iterable[tuple[str, int]] = ()):
        items = counts.items() if isinstance(counts, Mapping) else counts
        clean: dict[str, int] = {}
        for el, n in items:
            n = int(n)
            if n < 0:
                raise ValueError(f"negative count for {el}")
            if n:
                clean[el] = clean.get(el, 0) + n
        self._counts = dict(sorted(clean.items()))
        self._hash = hash(tuple(self._counts.items()))

    def __getitem__(self, el: str) -> int:
        return self._counts[el]

    def get(self, el, default=0):
        return self._counts.get(el, default)

    def __iter__(self) -> Iterator[str]:
        return iter(self._counts)

    def __len__(self) -> int:
        return len(self._counts)

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:
        if isinstance(other, Formula):
            return self._counts == other._counts
        if isinstance(other, Mapping):
            return self._counts == Formula(other)._counts
        return NotImplemented

    def __repr__(self) -> str:
        return f"Formula({self.to_hill()!r})"

    def heavy(self) -> Formula:
        return Formula({el: n for el, n in self._counts.items() if el != "H"})

    def to_hill(self) -> str:
        counts = dict(self._counts)
        order: list[str] = []
        if "C" in counts:
            order.append("C")
            if "H" in counts:
                order.append("H")
        order += sorted(el for el in counts if el not in order)
        return "".join(el + (str(counts[el]) if counts[el] != 1 else "") for el in order)

    @classmethod
    def parse(cls, text: str) -> Formula:
        """Strict Hill-notation parser: symbols are ``[A-Z][a-z]?``, count defaults to 1."""
        if not isinstance(text, str):
            raise ValueError("formula must be a string")
        pos = 0
        counts: dict[str, int] = {}
        while pos < len(text):
            m = _HILL_TOKEN.match(text, pos)
            if m is None:
                raise ValueError(f"bad formula {text!r} at offset {pos}")
            el, num = m.group(1), m.group(2)
            if el in counts:
                raise ValueError(f"element {el} repeated in formula {text!r}")
            n = int(num) if num else 1
            if num and num.startswith("0"):
                raise ValueError(f"bad count {num!r} in formula {text!r}")
            counts[el] = n
            pos = m.end()
        return cls(counts)


def formula_of(graph: MolecularGraph) -> Formula:
    counts = Counter(a.element for a in graph.atoms)
    h = sum(a.implicit_h for a in graph.atoms)
    if h:
        counts["H"] += h
    return Formula(counts)


# --------------------------------------------------------------------------- fingerprints


@dataclass(frozen=True)
class Fingerprint:
    """Binary fingerprint packed into a Python int (bit ``j`` = ``(bits >> j) & 1``)."""

    bits: int
    nbits: int = FP_BITS

    def __post_init__(self):
        if self.nbits < 1:
            raise ValueError("nbits must be >= 1")
        if self.bits < 0 or self.bits >> self.nbits:
            raise ValueError("bits outside the fingerprint length")

    @classmethod
    def from_indices(cls, indices: Iterable[int], nbits: int = FP_BITS) -> Fingerprint:
        bits = 0
        for j in indices:
            j = int(j)
            if not 0 <= j < nbits:
                raise ValueError(f"bit index {j} out of range for length {nbits}")
            bits |= 1 << j
        return cls(bits, nbits)

    @classmethod
    def from_array(cls, arr) -> Fingerprint:
        arr = np.asarray(arr).astype(bool)
        packed = np.packbits(arr, bitorder="little")
        return cls(int.from_bytes(packed.tobytes(), "little"), arr.size)

    def to_array(self) -> np.ndarray:
        raw = np.frombuffer(self.bits.to_bytes((self.nbits + 7) // 8, "little"), dtype=np.uint8)
        return np.unpackbits(raw, bitorder="little")[: self.nbits].astype(bool)

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.to_array())

    def popcount(self) -> int:
        return self.bits.bit_count()

    def __len__(self) -> int:
        return self.nbits

    def __contains__(self, j: int) -> bool:
        return bool((self.bits >> j) & 1)


class ProbFingerprint:
    """Read-only vector of per-bit probabilities in [0, 1]."""

    __slots__ = ("probs",)

    def __init__(self, probs):
        arr = np.array(probs, dtype=float)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("probabilities must be a non-empty vector")
        if not np.all((arr >= 0.0) & (arr <= 1.0)):
            raise ValueError("probabilities must lie in [0, 1]")
        arr.setflags(write=False)
        self.probs = arr

    def __len__(self) -> int:
        return self.probs.size


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    if a.nbits != b.nbits:
        raise ValueError(f"fingerprint length mismatch: {a.nbits} vs {b.nbits}")
    union = (a.bits | b.bits).bit_count()
    if union == 0:
        return 1.0
    return (a.bits & b.bits).bit_count() / union


def _hash64(*values: int) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack(f"<{len(values)}Q", *(v & _MASK64 for v in values)))
    return int.from_bytes(h.digest(), "little")


def atom_invariants(graph: MolecularGraph) -> list[int]:
    """Initial 64-bit identifiers from (element, degree, H, charge, total bond order)."""
    out = []
    for i, atom in enumerate(graph.atoms):
        out.append(
            _hash64(
                ATOMIC_NUMBER.get(atom.element, 0),
                len(graph.adjacency[i]),
                atom.implicit_h,
                atom.charge,
                graph.bond_order_sums[i],
            )
        )
    return out


def morgan_environments(graph: MolecularGraph, radius: int = FP_RADIUS, invariants: Sequence[int] | None = None) -> dict[int, list[tuple[int, int]]]:
    """Unfolded ECFP identifiers mapped to the ``(atom, radius)`` centres producing them.

    Environments whose bond set duplicates an earlier one (earlier layer, or
    same layer with a smaller identifier) are dropped, as in standard ECFP.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    n = graph.num_atoms
    ids = list(invariants) if invariants is not None else atom_invariants(graph)
    features: dict[int, list[tuple[int, int]]] = {}
    for a in range(n):
        features.setdefault(ids[a], []).append((a, 0))

    bond_index = {(a, b): k for k, (a, b, _) in enumerate(graph.bonds)}
    envs: list[frozenset[int]] = [frozenset()] * n
    seen: set[frozenset[int]] = {frozenset()}
    for r in range(1, radius + 1):
        new_ids = []
        new_envs = []
        for a in range(n):
            nbrs = graph.adjacency[a]
            flat = [x for order, nid in sorted((o, ids[nb]) for nb, o in nbrs) for x in (order, nid)]
            new_ids.append(_hash64(r, ids[a], *flat))
            env = set(envs[a])
            for nb, _ in nbrs:
                env |= envs[nb]
                env.add(bond_index[(min(a, nb), max(a, nb))])
            new_envs.append(frozenset(env))
        layer = sorted(range(n), key=lambda a: (sorted(new_envs[a]), new_ids[a], a))
        for a in layer:
            if new_envs[a] in seen:
                continue
            seen.add(new_envs[a])
            features.setdefault(new_ids[a], []).append((a, r))
        ids, envs = new_ids, new_envs
    return features


def morgan_fingerprint(graph: MolecularGraph, radius: int = FP_RADIUS, nbits: int = FP_BITS) -> Fingerprint:
    if nbits < 1:
        raise ValueError("nbits must be >= 1")
    return Fingerprint.from_indices({ident % nbits for ident in morgan_environments(graph, radius)}, nbits)


# --------------------------------------------------------------------------- canonical identity


def _refine(colors: list[int], adj) -> list[int]:
    """Iterated neighbourhood refinement; colours are dense, order-preserving ranks."""
    n_classes = len(set(colors))
    while True:
        keys = [(colors[a], tuple(sorted((o, colors[b]) for b, o in adj[a]))) for a in range(len(colors))]
        index = {k: i for i, k in enumerate(sorted(set(keys)))}
        colors = [index[k] for k in keys]
        if len(index) == n_classes:
            return colors
        n_classes = len(index)


def _certificate(graph: MolecularGraph, ranks: list[int]) -> tuple:
    by_rank = sorted(range(len(ranks)), key=ranks.__getitem__)
    labels = tuple(graph.atoms[a].label for a in by_rank)
    edges = tuple(sorted((min(ranks[a], ranks[b]), max(ranks[a], ranks[b]), o) for a, b, o in graph.bonds))
    return labels, edges


def _canonical_search(graph: MolecularGraph, colors: list[int]) -> tuple[tuple, list[int]]:
    colors = _refine(colors, graph.adjacency)
    counts = Counter(colors)
    if len(counts) == len(colors):
        return _certificate(graph, colors), colors
    target = min(c for c, k in counts.items() if k > 1)
    best: tuple[tuple, list[int]] | None = None
    for v in (a for a, c in enumerate(colors) if c == target):
        split = [2 * c + (1 if (c == target and a != v) else 0) for a, c in enumerate(colors)]
        result = _canonical_search(graph, split)
        if best is None or result[0] < best[0]:
            best = result
    assert best is not None
    return best


def canonical_ranks(graph: MolecularGraph) -> list[int]:
    """Canonical atom ranks: refinement, then exhaustive branching on the first tied cell."""
    if graph.num_atoms == 0:
        return []
    labels = [(a.label, len(graph.adjacency[i])) for i, a in enumerate(graph.atoms)]
    index = {lab: i for i, lab in enumerate(sorted(set(labels)))}
    return _canonical_search(graph, [index[lab] for lab in labels])[1]


def canonical_hash(graph: MolecularGraph) -> str:
    if graph.num_atoms == 0:
        cert: tuple = ((), ())
    else:
        cert = _certificate(graph, canonical_ranks(graph))
    return hashlib.sha256(repr(cert).encode()).hexdigest()
