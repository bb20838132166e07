"""Maximum common edge subgraph distance by branch and bound.

Edges are compatible when bond orders agree and endpoint elements agree
under one injective vertex correspondence. The common subgraph need not be
connected. Distance is ``|E1| + |E2| - 2 |MCES|``.
"""

from __future__ import annotations

import time
from collections import Counter
from typing import NamedTuple

from .molgraph import MolecularGraph, canonical_hash

MAX_EXACT_EDGES = 30
TIME_BUDGET = 2.0


class MCESResult(NamedTuple):
    value: int
    exact: bool


def _edge_label(g: MolecularGraph, a: int, b: int, order: int) -> tuple:
    ea, eb = g.atoms[a].element, g.atoms[b].element
    return (min(ea, eb), max(ea, eb), order)


def _label_bound(labels1, labels2) -> int:
    c1, c2 = Counter(labels1), Counter(labels2)
    return sum(min(n, c2[k]) for k, n in c1.items())


def _bfs_edge_order(g: MolecularGraph, rarity: Counter) -> list[int]:
    """Edges grouped so each one touches earlier ones where possible; rare labels first."""
    edges = g.bonds
    touching: dict[int, list[int]] = {}
    for k, (a, b, _) in enumerate(edges):
        touching.setdefault(a, []).append(k)
        touching.setdefault(b, []).append(k)
    labels = [_edge_label(g, *e) for e in edges]
    remaining = set(range(len(edges)))
    order: list[int] = []
    while remaining:
        seed = min(remaining, key=lambda k: (rarity[labels[k]], k))
        queue = [seed]
        remaining.discard(seed)
        while queue:
            k = queue.pop(0)
            order.append(k)
            a, b, _ = edges[k]
            for nb in sorted(touching[a] + touching[b], key=lambda j: (rarity[labels[j]], j)):
                if nb in remaining:
                    remaining.discard(nb)
                    queue.append(nb)
    return order


class _Timeout(Exception):
    pass


def _mces_size(g1: MolecularGraph, g2: MolecularGraph, deadline: float | None, node_budget: int | None = None) -> tuple[int, bool]:
    e1, e2 = g1.bonds, g2.bonds
    lab1 = [_edge_label(g1, *e) for e in e1]
    lab2 = [_edge_label(g2, *e) for e in e2]
    rarity = Counter(lab2)
    order = _bfs_edge_order(g1, rarity)
    by_label: dict[tuple, list[int]] = {}
    for k, lab in enumerate(lab2):
        by_label.setdefault(lab, []).append(k)
    el1 = [a.element for a in g1.atoms]
    el2 = [a.element for a in g2.atoms]

    fwd: dict[int, int] = {}
    rev: dict[int, int] = {}
    used2 = [False] * len(e2)
    # remaining-label counts for the bound
    left1 = Counter(lab1)
    free2 = Counter(lab2)
    best = 0
    calls = 0

    def bound() -> int:
        return sum(min(n, free2[k]) for k, n in left1.items() if n)

    def fits(u: int, v: int) -> bool:
        if el1[u] != el2[v]:
            return False
        m = fwd.get(u)
        if m is not None:
            return m == v
        return v not in rev

    def search(depth: int, size: int) -> None:
        nonlocal best, calls
        calls += 1
        if node_budget is not None and calls > node_budget:
            raise _Timeout
        if deadline is not None and calls % 256 == 0 and time.monotonic() > deadline:
            raise _Timeout
        if size > best:
            best = size
        if depth == len(order) or size + bound() <= best:
            return
        k = order[depth]
        a, b, _ = e1[k]
        lab = lab1[k]
        left1[lab] -= 1
        for j in by_label.get(lab, ()):
            if used2[j]:
                continue
            c, d, _ = e2[j]
            for x, y in ((c, d), (d, c)):
                if not (fits(a, x) and fits(b, y)):
                    continue
                added = []
                for u, v in ((a, x), (b, y)):
                    if u not in fwd:
                        fwd[u] = v
                        rev[v] = u
                        added.append(u)
                used2[j] = True
                free2[lab] -= 1
                search(depth + 1, size + 1)
                free2[lab] += 1
                used2[j] = False
                for u in added:
                    del rev[fwd.pop(u)]
        # leave e1[k] unmatched
        if size + bound() > best:
            search(depth + 1, size)
        left1[lab] += 1

    try:
        search(0, 0)
    except _Timeout:
        return best, False
    return best, True


def mces_lower_bound(g1: MolecularGraph, g2: MolecularGraph) -> int:
    """Distance lower bound from edge-label multisets alone."""
    lab1 = [_edge_label(g1, *e) for e in g1.bonds]
    lab2 = [_edge_label(g2, *e) for e in g2.bonds]
    return len(lab1) + len(lab2) - 2 * _label_bound(lab1, lab2)


def mces_distance(
    g1: MolecularGraph,
    g2: MolecularGraph,
    threshold: int | None = None,
    time_budget: float | None = TIME_BUDGET,
    max_edges: int = MAX_EXACT_EDGES,
    node_budget: int | None = None,
) -> MCESResult:
    """Exact MCES distance, or a flagged inexact value.

    Inexact cases: the label lower bound already exceeds ``threshold`` or a
    graph has more than ``max_edges`` edges (the lower bound is returned), or
    the time or search-node budget ran out (the best distance found so far is
    returned). A node budget, unlike wall time, gives machine-independent output.
    """
    n1, n2 = g1.num_bonds, g2.num_bonds
    lower = mces_lower_bound(g1, g2)
    if threshold is not None and lower > threshold:
        return MCESResult(lower, False)
    if lower == 0 and n1 == n2 and canonical_hash(g1) == canonical_hash(g2):
        return MCESResult(0, True)
    if max(n1, n2) > max_edges:
        return MCESResult(lower, False)
    # search from the smaller edge set; the common subgraph is symmetric
    if n1 > n2:
        g1, g2 = g2, g1
    deadline = None if time_budget is None else time.monotonic() + time_budget
    size, exact = _mces_size(g1, g2, deadline, node_budget)
    return MCESResult(n1 + n2 - 2 * size, exact)
